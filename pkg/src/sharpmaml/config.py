"""Flat dotted-key run configuration.

The on-disk format is one ``key = value`` assignment per line with ``#``
comments — language-neutral and diff-friendly.  Unknown keys are rejected;
parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .models import ConfigError, ModelSpec
from .meta import InnerConfig, MetaConfig
from .sharp import SharpConfig
from .tasks import TaskFamily

__all__ = ["RunConfig", "parse_config", "serialize_config", "load_config"]


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_int_list(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(part) for part in raw.split(","))


# key -> (parser, default). The parsed dict stores exactly these keys.
SCHEMA = {
    "task.family": (str, "sinusoid"),
    "task.n_support": (int, 5),
    "task.n_query": (int, 10),
    "task.dim": (int, 1),
    "task.ways": (int, 2),
    "task.noise": (float, 0.5),
    "task.lambda_min": (float, 0.5),
    "task.lambda_max": (float, 2.0),
    "model.hidden": (_parse_int_list, (40, 40)),
    "model.activation": (str, "tanh"),
    "model.head_split": (int, 0),
    "train.variant": (str, "maml"),
    "train.M": (int, 4),
    "train.T": (int, 100),
    "train.inner_steps": (int, 1),
    "train.beta_low": (float, 0.01),
    "train.beta_up": (float, 0.001),
    "train.subsample": (int, 0),
    "sharp.alpha_low": (float, 0.0),
    "sharp.alpha_up": (float, 0.0),
    "sharp.resample_query": (_parse_bool, False),
    "esam.enabled": (_parse_bool, False),
    "esam.xi": (float, 1.0),
    "esam.mu": (float, 1.0),
    "anil.enabled": (_parse_bool, False),
    "seed": (int, 0),
    "out_dir": (str, "out"),
    "eval.n_test_tasks": (int, 50),
    "eval.eval_every": (int, 0),
}


def parse_config(text: str) -> dict:
    """Parse the flat key = value format into a fully defaulted dict."""
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(raw)
        except (ValueError, TypeError) as err:
            raise ConfigError(f"line {lineno}: bad value for {key}: {err}") from err
    for key, (_, default) in SCHEMA.items():
        values.setdefault(key, default)
    return values


def serialize_config(values: dict) -> str:
    lines = []
    for key in SCHEMA:
        v = values[key]
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, tuple):
            text = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path) -> "RunConfig":
    with open(path, "r", encoding="utf-8") as fh:
        return RunConfig.from_dict(parse_config(fh.read()))


@dataclass(frozen=True)
class RunConfig:
    """A validated experiment configuration.

    Mirrors the flat config file one-to-one and materializes the typed
    sub-configurations the library operates on.
    """

    values: dict = field(default_factory=dict)

    @staticmethod
    def from_dict(values: dict) -> "RunConfig":
        cfg = RunConfig(dict(values))
        # Constructing the pieces runs all their invariant checks.
        cfg.family()
        cfg.model()
        cfg.inner()
        cfg.meta()
        cfg.sharp()
        return cfg

    @staticmethod
    def from_text(text: str) -> "RunConfig":
        return RunConfig.from_dict(parse_config(text))

    def __getitem__(self, key):
        return self.values[key]

    def family(self) -> TaskFamily:
        v = self.values
        return TaskFamily(
            kind=v["task.family"],
            n_support=v["task.n_support"],
            n_query=v["task.n_query"],
            dim=v["task.dim"],
            ways=v["task.ways"],
            noise=v["task.noise"],
            lambda_min=v["task.lambda_min"],
            lambda_max=v["task.lambda_max"],
        )

    def model(self) -> ModelSpec:
        v = self.values
        family = self.family()
        if family.kind == "quadratic":
            return ModelSpec("quadratic", (family.dim,))
        widths = (family.input_dim, *v["model.hidden"], family.output_dim)
        spec = ModelSpec("mlp", widths, v["model.activation"], head_split=0)
        split = v["model.head_split"]
        if split == -1:
            split = spec.last_layer_split()
        return ModelSpec("mlp", widths, v["model.activation"], head_split=split)

    def inner(self) -> InnerConfig:
        v = self.values
        return InnerConfig(
            beta_low=v["train.beta_low"],
            steps=v["train.inner_steps"],
            first_order=v["train.variant"] == "fomaml",
            subsample=v["train.subsample"],
        )

    def meta(self) -> MetaConfig:
        v = self.values
        return MetaConfig(beta_up=v["train.beta_up"], m=v["train.M"], t=v["train.T"])

    def sharp(self) -> SharpConfig:
        v = self.values
        return SharpConfig(
            variant=v["train.variant"],
            alpha_low=v["sharp.alpha_low"],
            alpha_up=v["sharp.alpha_up"],
            esam_enabled=v["esam.enabled"],
            xi=v["esam.xi"],
            mu=v["esam.mu"],
            anil_enabled=v["anil.enabled"],
            resample_query=v["sharp.resample_query"],
        )

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def out_dir(self) -> str:
        return self.values["out_dir"]

    def serialize(self) -> str:
        return serialize_config(self.values)

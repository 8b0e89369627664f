"""Model families with exact first- and second-order derivatives.

Two model kinds are supported:

* ``mlp`` -- fully-connected networks with a twice-differentiable activation
  (``tanh``, ``softplus`` or ``identity``) and a linear output layer, trained
  with mean-squared error or softmax cross-entropy.
* ``quadratic`` -- the analytic objective ``0.5 * (theta - c)^T A (theta - c)``
  whose gradient ``A (theta - c)`` and Hessian ``A`` are closed forms.  Every
  closed-form oracle in the test suite is built on this family.

Parameters live in one flat float64 vector.  The layout is fixed: for each
layer in order, the weight matrix in row-major order followed by the bias
vector.  Perturbations, Hessian-vector products and checkpoints all share this
layout, so ``head_split`` (the index separating the frozen body from the
adaptable head in ANIL) is well defined.

Gradients are exact reverse-mode sweeps written out by hand.  Hessian-vector
products are exact as well: a forward (tangent) pass is layered over the
gradient program, i.e. ``hvp(theta, v) = d/ds grad(theta + s v) |_{s=0}``.
Finite differences appear only as the independent test oracle ``fd_grad``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConfigError",
    "DivergenceError",
    "ModelSpec",
    "Dataset",
    "ACTIVATIONS",
    "init_params",
    "loss",
    "per_sample_loss",
    "grad",
    "loss_and_grad",
    "hvp",
    "fd_grad",
]


class ConfigError(ValueError):
    """Invalid configuration or mismatched dimensions."""


class DivergenceError(RuntimeError):
    """A non-finite value appeared where the computation must stay finite.

    ``step`` carries the inner-loop step index and ``task_index`` the position
    of the offending task inside the meta-batch, when known.
    """

    def __init__(self, message, step=None, task_index=None, iteration=None):
        super().__init__(message)
        self.step = step
        self.task_index = task_index
        self.iteration = iteration


def _tanh(z):
    t = np.tanh(z)
    return t, 1.0 - t * t, -2.0 * t * (1.0 - t * t)


def _softplus(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return np.logaddexp(0.0, z), s, s * (1.0 - s)


def _identity(z):
    one = np.ones_like(z)
    return z, one, np.zeros_like(z)


# name -> callable returning (value, first derivative, second derivative).
# ReLU is deliberately absent: its a.e.-zero second derivative would silently
# null the Hessian term of the meta-gradient.
ACTIVATIONS = {"tanh": _tanh, "softplus": _softplus, "identity": _identity}


@dataclass(frozen=True)
class ModelSpec:
    """Shape and activation of a model plus the ANIL body/head split.

    ``layer_widths`` is ``(d_in, hidden..., d_out)`` for MLPs and ``(d,)`` for
    the quadratic family.  ``head_split`` indexes into the flat parameter
    vector; entries below it form the body, entries at or above it the head.
    ``head_split == 0`` means the whole vector is head (ANIL reduces to MAML).
    """

    kind: str
    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    head_split: int = 0

    def __post_init__(self):
        if self.kind not in ("mlp", "quadratic"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if any(w < 1 for w in self.layer_widths):
            raise ConfigError("layer widths must be positive")
        if self.kind == "mlp":
            if len(self.layer_widths) < 2:
                raise ConfigError("an mlp needs at least input and output widths")
            if self.activation not in ACTIVATIONS:
                raise ConfigError(
                    f"activation {self.activation!r} not supported; "
                    f"choose one of {sorted(ACTIVATIONS)}"
                )
        else:
            if len(self.layer_widths) != 1:
                raise ConfigError("quadratic models take a single width (the dimension)")
        if not 0 <= self.head_split <= self.dim:
            raise ConfigError(f"head_split {self.head_split} outside [0, {self.dim}]")

    @property
    def dim(self) -> int:
        if self.kind == "quadratic":
            return self.layer_widths[0]
        total = 0
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            total += fan_in * fan_out + fan_out
        return total

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1 if self.kind == "mlp" else 0

    def last_layer_split(self) -> int:
        """Flat index where the final layer's parameters begin."""
        if self.kind != "mlp":
            return 0
        fan_in, fan_out = self.layer_widths[-2], self.layer_widths[-1]
        return self.dim - (fan_in * fan_out + fan_out)

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views of the flat vector as per-layer (W, b) pairs."""
        check_params(self, params)
        out = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            w = params[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = params[offset : offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out

    def pack(self, layers) -> np.ndarray:
        parts = []
        for w, b in layers:
            parts.append(np.asarray(w, dtype=np.float64).ravel())
            parts.append(np.asarray(b, dtype=np.float64).ravel())
        flat = np.concatenate(parts) if parts else np.zeros(0)
        if flat.shape != (self.dim,):
            raise ConfigError(f"packed {flat.size} values, model has {self.dim}")
        return flat


def check_params(model: ModelSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (model.dim,):
        raise ConfigError(f"parameter vector has shape {params.shape}, expected ({model.dim},)")
    return params


def init_params(model: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Seeded initialization: 1/sqrt(fan_in) Gaussian weights, zero biases.

    Quadratic models start at the origin.
    """
    if model.kind == "quadratic":
        return np.zeros(model.dim)
    layers = []
    for fan_in, fan_out in zip(model.layer_widths[:-1], model.layer_widths[1:]):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        layers.append((w, np.zeros(fan_out)))
    return model.pack(layers)


@dataclass(frozen=True)
class Dataset:
    """A finite sample (inputs/targets) or an analytic quadratic objective.

    ``loss_kind`` is one of ``mse``, ``cross_entropy``, ``quadratic_analytic``.
    For the analytic kind the data is the SPD matrix ``quad_a`` and center
    ``quad_center`` instead of samples.
    """

    loss_kind: str
    inputs: np.ndarray | None = None
    targets: np.ndarray | None = None
    quad_a: np.ndarray | None = None
    quad_center: np.ndarray | None = None

    def __post_init__(self):
        if self.loss_kind == "quadratic_analytic":
            a = np.asarray(self.quad_a, dtype=np.float64)
            c = np.asarray(self.quad_center, dtype=np.float64)
            if a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise ConfigError("quadratic data needs a square matrix")
            if c.shape != (a.shape[0],):
                raise ConfigError("quadratic center does not match the matrix")
            if not np.allclose(a, a.T, atol=1e-12):
                raise ConfigError("quadratic matrix must be symmetric")
            object.__setattr__(self, "quad_a", a)
            object.__setattr__(self, "quad_center", c)
            return
        if self.loss_kind not in ("mse", "cross_entropy"):
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ConfigError("inputs must be a nonempty (n, d_in) matrix")
        if self.loss_kind == "mse":
            y = np.asarray(self.targets, dtype=np.float64)
            if y.ndim != 2 or y.shape[0] != x.shape[0]:
                raise ConfigError("mse targets must be (n, d_out)")
        else:
            y = np.asarray(self.targets)
            if y.ndim != 1 or y.shape[0] != x.shape[0]:
                raise ConfigError("cross-entropy targets must be an (n,) label vector")
            y = y.astype(np.int64)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @staticmethod
    def quadratic(a, center) -> "Dataset":
        return Dataset(loss_kind="quadratic_analytic", quad_a=a, quad_center=center)

    @property
    def n(self) -> int:
        if self.loss_kind == "quadratic_analytic":
            return 1
        return self.inputs.shape[0]

    def subset(self, idx) -> "Dataset":
        """Restriction to the given sample indices (sample datasets only)."""
        if self.loss_kind == "quadratic_analytic":
            raise ConfigError("the analytic quadratic has no per-sample structure")
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            raise ConfigError("empty subset")
        return Dataset(self.loss_kind, self.inputs[idx], self.targets[idx])


def _check_pair(model: ModelSpec, params: np.ndarray, data: Dataset) -> np.ndarray:
    params = check_params(model, params)
    if model.kind == "quadratic":
        if data.loss_kind != "quadratic_analytic":
            raise ConfigError("quadratic models pair with quadratic_analytic data")
        if data.quad_a.shape[0] != model.dim:
            raise ConfigError("quadratic data dimension does not match the model")
    else:
        if data.loss_kind == "quadratic_analytic":
            raise ConfigError("analytic quadratic data pairs with a quadratic model")
        if data.inputs.shape[1] != model.layer_widths[0]:
            raise ConfigError("input width does not match the model")
        d_out = model.layer_widths[-1]
        if data.loss_kind == "mse" and data.targets.shape[1] != d_out:
            raise ConfigError("target width does not match the model")
        if data.loss_kind == "cross_entropy" and data.targets.max(initial=0) >= d_out:
            raise ConfigError("label exceeds the number of output logits")
    return params


def _forward(model: ModelSpec, params: np.ndarray, x: np.ndarray):
    """Returns per-layer pre-activations ``zs`` and activations ``acts``.

    ``acts[0]`` is the input; ``acts[-1]`` the linear network output.
    """
    act = ACTIVATIONS[model.activation]
    layers = model.unpack(params)
    acts = [x]
    zs = []
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        zs.append(z)
        if i < len(layers) - 1:
            a, _, _ = act(z)
            acts.append(a)
        else:
            acts.append(z)
    return zs, acts


def _logsumexp_rows(z):
    m = np.max(z, axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=1, keepdims=True)))[:, 0]


def _softmax_rows(z):
    m = np.max(z, axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=1, keepdims=True)


def _per_sample_from_output(data: Dataset, out: np.ndarray) -> np.ndarray:
    if data.loss_kind == "mse":
        return np.mean((out - data.targets) ** 2, axis=1)
    # Softmax + negative log-likelihood fused through log-sum-exp so grids far
    # from optima stay finite.
    lse = _logsumexp_rows(out)
    picked = out[np.arange(out.shape[0]), data.targets]
    return lse - picked


def _output_grad(data: Dataset, out: np.ndarray) -> np.ndarray:
    n = out.shape[0]
    if data.loss_kind == "mse":
        return 2.0 * (out - data.targets) / (n * out.shape[1])
    p = _softmax_rows(out)
    g = p.copy()
    g[np.arange(n), data.targets] -= 1.0
    return g / n


def per_sample_loss(model: ModelSpec, params: np.ndarray, data: Dataset) -> np.ndarray:
    """Vector of per-datum losses; the mean equals :func:`loss`."""
    params = _check_pair(model, params, data)
    if model.kind == "quadratic":
        raise ConfigError("the analytic quadratic has no per-sample losses")
    _, acts = _forward(model, params, data.inputs)
    return _per_sample_from_output(data, acts[-1])


def loss(model: ModelSpec, params: np.ndarray, data: Dataset) -> float:
    """Mean per-datum loss; ``0.5 (theta-c)^T A (theta-c)`` for quadratics."""
    params = _check_pair(model, params, data)
    if model.kind == "quadratic":
        d = params - data.quad_center
        return float(0.5 * d @ (data.quad_a @ d))
    _, acts = _forward(model, params, data.inputs)
    return float(np.mean(_per_sample_from_output(data, acts[-1])))


def _mlp_backward(model, params, data, zs, acts):
    """Reverse sweep; returns (flat gradient, cached dz per layer)."""
    act = ACTIVATIONS[model.activation]
    layers = model.unpack(params)
    n_layers = len(layers)
    da = _output_grad(data, acts[-1])
    grads_w = [None] * n_layers
    grads_b = [None] * n_layers
    dzs = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        if i == n_layers - 1:
            dz = da
        else:
            _, d1, _ = act(zs[i])
            dz = da * d1
        dzs[i] = dz
        grads_w[i] = acts[i].T @ dz
        grads_b[i] = dz.sum(axis=0)
        if i > 0:
            da = dz @ layers[i][0].T
    return model.pack(zip(grads_w, grads_b)), dzs


def grad(model: ModelSpec, params: np.ndarray, data: Dataset) -> np.ndarray:
    """Exact gradient of :func:`loss` with respect to the flat parameters."""
    params = _check_pair(model, params, data)
    if model.kind == "quadratic":
        return data.quad_a @ (params - data.quad_center)
    zs, acts = _forward(model, params, data.inputs)
    g, _ = _mlp_backward(model, params, data, zs, acts)
    return g


def loss_and_grad(model: ModelSpec, params: np.ndarray, data: Dataset):
    params = _check_pair(model, params, data)
    if model.kind == "quadratic":
        d = params - data.quad_center
        ad = data.quad_a @ d
        return float(0.5 * d @ ad), ad
    zs, acts = _forward(model, params, data.inputs)
    value = float(np.mean(_per_sample_from_output(data, acts[-1])))
    g, _ = _mlp_backward(model, params, data, zs, acts)
    return value, g


def hvp(model: ModelSpec, params: np.ndarray, data: Dataset, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product ``H(params) @ v``.

    Computed as the tangent of the gradient program in direction ``v``
    (forward-over-reverse), so it is exact down to roundoff and linear in
    ``v`` by construction.
    """
    params = _check_pair(model, params, data)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (model.dim,):
        raise ConfigError(f"direction has shape {v.shape}, expected ({model.dim},)")
    if model.kind == "quadratic":
        return data.quad_a @ v

    act = ACTIVATIONS[model.activation]
    layers = model.unpack(params)
    v_layers = model.unpack(v)
    n_layers = len(layers)
    x = data.inputs

    # Forward pass with tangents: t_* denotes d(*)/ds along theta + s v.
    acts = [x]
    t_acts = [np.zeros_like(x)]
    zs, t_zs, d1s, d2s = [], [], [], []
    for i, ((w, b), (vw, vb)) in enumerate(zip(layers, v_layers)):
        z = acts[-1] @ w + b
        tz = t_acts[-1] @ w + acts[-1] @ vw + vb
        zs.append(z)
        t_zs.append(tz)
        if i < n_layers - 1:
            a, d1, d2 = act(z)
            acts.append(a)
            t_acts.append(d1 * tz)
            d1s.append(d1)
            d2s.append(d2)
        else:
            acts.append(z)
            t_acts.append(tz)
            d1s.append(None)
            d2s.append(None)

    out, t_out = acts[-1], t_acts[-1]
    n = out.shape[0]
    if data.loss_kind == "mse":
        da = 2.0 * (out - data.targets) / (n * out.shape[1])
        t_da = 2.0 * t_out / (n * out.shape[1])
    else:
        p = _softmax_rows(out)
        da = p.copy()
        da[np.arange(n), data.targets] -= 1.0
        da /= n
        # Tangent of softmax: p * (t - sum(p * t)) row-wise.
        t_da = p * (t_out - np.sum(p * t_out, axis=1, keepdims=True)) / n

    hw = [None] * n_layers
    hb = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        if i == n_layers - 1:
            dz, t_dz = da, t_da
        else:
            dz = da * d1s[i]
            t_dz = t_da * d1s[i] + da * d2s[i] * t_zs[i]
        hw[i] = t_acts[i].T @ dz + acts[i].T @ t_dz
        hb[i] = t_dz.sum(axis=0)
        if i > 0:
            da = dz @ layers[i][0].T
            t_da = t_dz @ layers[i][0].T + dz @ v_layers[i][0].T
    return model.pack(zip(hw, hb))


def fd_grad(model: ModelSpec, params: np.ndarray, data: Dataset, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate; the independent test oracle."""
    if h <= 0:
        raise ConfigError("finite-difference step must be positive")
    params = _check_pair(model, params, data)
    out = np.empty(model.dim)
    probe = params.copy()
    for i in range(model.dim):
        orig = probe[i]
        probe[i] = orig + h
        up = loss(model, probe, data)
        probe[i] = orig - h
        down = loss(model, probe, data)
        probe[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return out

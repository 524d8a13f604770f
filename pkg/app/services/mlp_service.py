"""
Fully-connected networks with reverse-mode parameter gradients and forward-mode
propagation of the input Jacobian and Hessian tensor.

Inputs may be a single sample (m,) or a batch (B, m); outputs follow the same
convention. Weight matrices are stored (fan_out, fan_in).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np
from scipy.special import expit

from app.services.linalg_service import ShapeMismatch

logger = logging.getLogger(__name__)

Activation = Literal["tanh", "softplus"]


class MlpError(Exception):
    pass


class InvalidArchitecture(MlpError):
    pass


@dataclass(frozen=True)
class Mlp:
    layer_dims: tuple[int, ...]
    activation: Activation
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in (W0, b0, W1, b1, ...) order; optimizers update them in place."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())


@dataclass(frozen=True)
class DiffEval:
    value: np.ndarray
    jacobian: np.ndarray
    hessian: np.ndarray


@dataclass(frozen=True)
class ParamGrads:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def as_list(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def __add__(self, other: ParamGrads) -> ParamGrads:
        return ParamGrads(
            weights=tuple(a + b for a, b in zip(self.weights, other.weights)),
            biases=tuple(a + b for a, b in zip(self.biases, other.biases)),
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.as_list())


ActivationFns = tuple[
    Callable[[np.ndarray], np.ndarray],
    Callable[[np.ndarray, np.ndarray], np.ndarray],
    Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
]


def _tanh_fns() -> ActivationFns:
    # s' = 1 - s², s'' = -2 s s'
    return (
        np.tanh,
        lambda u, s: 1.0 - s * s,
        lambda u, s, ds: -2.0 * s * ds,
    )


def _softplus_fns() -> ActivationFns:
    # s' = sigmoid, s'' = sigmoid (1 - sigmoid)
    return (
        lambda u: np.logaddexp(0.0, u),
        lambda u, s: expit(u),
        lambda u, s, ds: ds * (1.0 - ds),
    )


_ACTIVATIONS: dict[str, Callable[[], ActivationFns]] = {
    "tanh": _tanh_fns,
    "softplus": _softplus_fns,
}


def _activation_fns(name: str) -> ActivationFns:
    try:
        return _ACTIVATIONS[name]()
    except KeyError as e:
        raise InvalidArchitecture(f"Unknown activation: {name}") from e


def init_mlp(layer_dims: Sequence[int], activation: Activation = "tanh", seed: int = 0) -> Mlp:
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2:
        raise InvalidArchitecture(f"Need at least input and output dims, got {dims}")
    if any(d < 1 for d in dims):
        raise InvalidArchitecture(f"All layer dims must be >= 1, got {dims}")
    _activation_fns(activation)

    rng = np.random.default_rng(seed)
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(layer_dims=dims, activation=activation, weights=tuple(weights), biases=tuple(biases))


def _as_batch(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != net.input_dim:
        raise ShapeMismatch(f"Network expects inputs of width {net.input_dim}, got shape {np.shape(x)}")
    return arr, single


def _forward_cache(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Forward pass keeping each layer's input and pre-activation for backprop."""
    act = _activation_fns(net.activation)[0]
    inputs: list[np.ndarray] = []
    pre: list[np.ndarray] = []
    u = x
    last = len(net.weights) - 1
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(u)
        z = u @ w.T + b
        pre.append(z)
        u = z if layer == last else act(z)
    return u, inputs, pre


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    xb, single = _as_batch(net, x)
    out, _, _ = _forward_cache(net, xb)
    return out[0] if single else out


def forward_with_input_derivatives(net: Mlp, x: np.ndarray) -> DiffEval:
    """
    Propagate (value, ∂/∂x, ∂²/∂x²) through the network in forward mode.

    Affine layer z = W u + b:   J_z = W J_u,   H_z[k] = Σ_j W[k, j] H_u[j]
    Activation s(z):            J = s'(z) J_z, H[k] = s'(z_k) H_z[k] + s''(z_k) J_z[k]ᵀ J_z[k]
    """
    xb, single = _as_batch(net, x)
    act, dact, d2act = _activation_fns(net.activation)
    batch, m = xb.shape

    u = xb
    jac = np.broadcast_to(np.eye(m), (batch, m, m)).copy()
    hess: np.ndarray | None = None  # zero until the first nonlinearity
    last = len(net.weights) - 1
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = u @ w.T + b
        jz = np.einsum("kj,bjp->bkp", w, jac, optimize=True)
        hz = None if hess is None else np.einsum("kj,bjpq->bkpq", w, hess, optimize=True)
        if layer == last:
            u, jac, hess = z, jz, hz
            break
        s = act(z)
        ds = dact(z, s)
        d2s = d2act(z, s, ds)
        outer = np.einsum("bkp,bkq->bkpq", jz, jz)
        hess = d2s[:, :, None, None] * outer
        if hz is not None:
            hess = hess + ds[:, :, None, None] * hz
        jac = ds[:, :, None] * jz
        u = s

    if hess is None:
        hess = np.zeros((batch, u.shape[1], m, m))
    if single:
        return DiffEval(value=u[0], jacobian=jac[0], hessian=hess[0])
    return DiffEval(value=u, jacobian=jac, hessian=hess)


def backprop_params(net: Mlp, x: np.ndarray, upstream: np.ndarray) -> ParamGrads:
    """
    Exact reverse-mode gradients of ⟨upstream, f(x)⟩ with respect to the parameters.
    For a batch the per-sample gradients are summed.
    """
    xb, single = _as_batch(net, x)
    g = np.asarray(upstream, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != (xb.shape[0], net.output_dim):
        raise ShapeMismatch(f"Upstream gradient shape {np.shape(upstream)} does not match outputs")

    act, dact, _ = _activation_fns(net.activation)
    _, inputs, pre = _forward_cache(net, xb)

    n_layers = len(net.weights)
    grad_w: list[np.ndarray] = [np.empty(0)] * n_layers
    grad_b: list[np.ndarray] = [np.empty(0)] * n_layers
    delta = g
    for layer in range(n_layers - 1, -1, -1):
        grad_w[layer] = delta.T @ inputs[layer]
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            z_prev = pre[layer - 1]
            delta = (delta @ net.weights[layer]) * dact(z_prev, act(z_prev))
    return ParamGrads(weights=tuple(grad_w), biases=tuple(grad_b))


def zero_grads(net: Mlp) -> ParamGrads:
    return ParamGrads(
        weights=tuple(np.zeros_like(w) for w in net.weights),
        biases=tuple(np.zeros_like(b) for b in net.biases),
    )


def copy_mlp(net: Mlp) -> Mlp:
    return Mlp(
        layer_dims=net.layer_dims,
        activation=net.activation,
        weights=tuple(w.copy() for w in net.weights),
        biases=tuple(b.copy() for b in net.biases),
    )


def save_mlp(net: Mlp, path: str | Path) -> tuple[Path, Path]:
    """Write parameters as flat little-endian float64 plus a JSON sidecar."""
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    bin_path = base.with_suffix(".bin")
    meta_path = base.with_suffix(".json")
    flat = np.concatenate([p.reshape(-1) for p in net.params()]).astype("<f8")
    bin_path.write_bytes(flat.tobytes())
    meta = {
        "layer_dims": list(net.layer_dims),
        "activation": net.activation,
        "param_count": int(flat.size),
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return bin_path, meta_path


def load_mlp(path: str | Path) -> Mlp:
    base = Path(path)
    meta = json.loads(base.with_suffix(".json").read_text(encoding="utf-8"))
    dims = tuple(int(d) for d in meta["layer_dims"])
    flat = np.frombuffer(base.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    template = init_mlp(dims, meta["activation"], seed=0)
    if flat.size != template.param_count():
        raise InvalidArchitecture(f"Parameter file has {flat.size} values, architecture needs {template.param_count()}")
    offset = 0
    weights = []
    biases = []
    for w, b in zip(template.weights, template.biases):
        weights.append(flat[offset : offset + w.size].reshape(w.shape).copy())
        offset += w.size
        biases.append(flat[offset : offset + b.size].copy())
        offset += b.size
    return Mlp(layer_dims=dims, activation=meta["activation"], weights=tuple(weights), biases=tuple(biases))

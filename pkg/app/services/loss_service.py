"""
Training objectives for every method with analytic gradients.

Conventions:
- residual r = y - ŷ, batched as (B, n) or a single (n,)
- grad_mean is ∂loss/∂ŷ (so squared error gives -2r)
- values are per-sample; the trainer averages over the batch
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from app.schemas.experiment import MethodKind
from app.services.covariance_service import (
    TicParams,
    diag_variance,
    hessian_gram,
    tic_covariance,
    tic_head_decode,
)
from app.services.linalg_service import (
    EPS_MIN,
    ShapeMismatch,
    assemble_pd_backward,
    assemble_pd_batch,
    batch_cholesky,
    batch_inverse_from_factor,
    batch_log_det,
    softplus,
)
from app.services.mlp_service import DiffEval


class LossError(Exception):
    pass


class NonPositiveVariance(LossError):
    pass


@dataclass(frozen=True)
class LossEval:
    value: np.ndarray
    grad_mean: np.ndarray
    grad_cov: Optional[np.ndarray] = None
    grad_var: Optional[np.ndarray] = None


@dataclass(frozen=True)
class TicLossEval:
    loss: LossEval
    grad_k1: np.ndarray
    grad_k2: np.ndarray
    grad_k3_lower: np.ndarray
    grad_raw: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Method:
    kind: MethodKind
    beta: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be within [0, 1], got {self.beta}")


@dataclass(frozen=True)
class MethodObjective:
    value: np.ndarray  # (B,)
    grad_mean: np.ndarray  # (B, n)
    grad_head: Optional[np.ndarray]  # (B, head width) or None for MSE


def _batched(residual: np.ndarray) -> tuple[np.ndarray, bool]:
    r = np.asarray(residual, dtype=np.float64)
    single = r.ndim == 1
    return (r[None, :] if single else r), single


def _unbatch(ev: LossEval, single: bool) -> LossEval:
    if not single:
        return ev
    return LossEval(
        value=ev.value[0],
        grad_mean=ev.grad_mean[0],
        grad_cov=None if ev.grad_cov is None else ev.grad_cov[0],
        grad_var=None if ev.grad_var is None else ev.grad_var[0],
    )


def _nll_batch(r: np.ndarray, cov: np.ndarray) -> LossEval:
    if cov.shape != r.shape + (r.shape[-1],):
        raise ShapeMismatch(f"Residual {r.shape} and covariance {cov.shape} disagree")
    lower = batch_cholesky(cov)
    inv = batch_inverse_from_factor(lower)
    alpha = np.einsum("bij,bj->bi", inv, r)
    value = batch_log_det(lower) + np.einsum("bi,bi->b", r, alpha)
    grad_cov = inv - np.einsum("bi,bj->bij", alpha, alpha)
    grad_cov = 0.5 * (grad_cov + np.swapaxes(grad_cov, -1, -2))
    return LossEval(value=value, grad_mean=-2.0 * alpha, grad_cov=grad_cov)


def nll_full(residual: np.ndarray, cov: np.ndarray) -> LossEval:
    """log|Σ| + rᵀΣ⁻¹r with ∂/∂ŷ = -2Σ⁻¹r and ∂/∂Σ = Σ⁻¹ - Σ⁻¹rrᵀΣ⁻¹."""
    r, single = _batched(residual)
    c = np.asarray(cov, dtype=np.float64)
    if single:
        c = c[None, ...]
    return _unbatch(_nll_batch(r, c), single)


def beta_nll(residual: np.ndarray, var: np.ndarray, beta: float) -> LossEval:
    """
    Per-dimension NLL scaled by the stop-gradient factor var**beta.

    The factor multiplies the value but contributes no gradient; beta=1 leaves the
    squared-error gradient -2r on the mean.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be within [0, 1], got {beta}")
    r, single = _batched(residual)
    v = np.asarray(var, dtype=np.float64)
    if single:
        v = v[None, :]
    if v.shape != r.shape:
        raise ShapeMismatch(f"Residual {r.shape} and variance {v.shape} disagree")
    if np.any(~(v > 0.0)):
        raise NonPositiveVariance("All variances must be strictly positive")

    weight = v**beta
    per_dim = np.log(v) + r * r / v
    value = np.sum(weight * per_dim, axis=-1)
    grad_mean = -2.0 * r * v ** (beta - 1.0)
    grad_var = weight * (1.0 / v - r * r / (v * v))
    return _unbatch(LossEval(value=value, grad_mean=grad_mean, grad_var=grad_var), single)


def nll_diag(residual: np.ndarray, var: np.ndarray) -> LossEval:
    return beta_nll(residual, var, beta=0.0)


def faithful_loss(residual: np.ndarray, cov: np.ndarray) -> LossEval:
    """
    rᵀr + NLL(stop_grad(r), Σ): the mean only sees the squared-error gradient, the
    covariance sees the NLL gradient at the detached residual.
    """
    r, single = _batched(residual)
    c = np.asarray(cov, dtype=np.float64)
    if single:
        c = c[None, ...]
    nll = _nll_batch(r, c)
    ev = LossEval(
        value=np.sum(r * r, axis=-1) + nll.value,
        grad_mean=-2.0 * r,
        grad_cov=nll.grad_cov,
    )
    return _unbatch(ev, single)


def mse_loss(residual: np.ndarray) -> LossEval:
    r, single = _batched(residual)
    return _unbatch(LossEval(value=np.sum(r * r, axis=-1), grad_mean=-2.0 * r), single)


def tic_nll(residual: np.ndarray, d: DiffEval, p: TicParams) -> TicLossEval:
    """
    NLL under the TIC covariance. J and H are treated as constants: no gradient
    reaches the mean network through Σ.
    """
    r, single = _batched(residual)
    jac = np.asarray(d.jacobian)
    hess = np.asarray(d.hessian)
    k1 = np.asarray(p.k1, dtype=np.float64)
    k2 = np.asarray(p.k2, dtype=np.float64)
    k3_lower = np.asarray(p.k3_lower, dtype=np.float64)
    raw = None if p.raw is None else np.asarray(p.raw, dtype=np.float64)
    if single:
        jac, hess = jac[None], hess[None]
        k1, k2, k3_lower = k1.reshape(1), k2.reshape(1), k3_lower[None]
        raw = None if raw is None else raw[None]

    cov = tic_covariance(DiffEval(value=r, jacobian=jac, hessian=hess), TicParams(k1=k1, k2=k2, k3_lower=k3_lower))
    base = _nll_batch(r, cov)
    g = base.grad_cov
    jjt = jac @ np.swapaxes(jac, -1, -2)
    grad_k1 = np.einsum("bij,bij->b", g, jjt)
    grad_k2 = np.einsum("bij,bij->b", g, hessian_gram(hess))
    grad_k3_lower = np.tril(2.0 * (g @ k3_lower))

    grad_raw = None
    if raw is not None:
        grad_raw = np.concatenate(
            [
                (grad_k1 * expit(raw[:, 0]))[:, None],
                (grad_k2 * expit(raw[:, 1]))[:, None],
                assemble_pd_backward(raw[:, 2:], k3_lower, g),
            ],
            axis=-1,
        )

    if single:
        return TicLossEval(
            loss=_unbatch(base, True),
            grad_k1=grad_k1[0],
            grad_k2=grad_k2[0],
            grad_k3_lower=grad_k3_lower[0],
            grad_raw=None if grad_raw is None else grad_raw[0],
        )
    return TicLossEval(loss=base, grad_k1=grad_k1, grad_k2=grad_k2, grad_k3_lower=grad_k3_lower, grad_raw=grad_raw)


def _diag_raw_grad(raw: np.ndarray, grad_var: np.ndarray) -> np.ndarray:
    # var = (softplus(raw) + EPS_MIN)²
    return grad_var * 2.0 * (softplus(raw) + EPS_MIN) * expit(raw)


def method_objective(
    method: Method,
    residual: np.ndarray,
    head_raw: Optional[np.ndarray] = None,
    diff: Optional[DiffEval] = None,
) -> MethodObjective:
    """Per-sample loss values and gradients w.r.t. ŷ and the raw covariance-head outputs."""
    r = np.atleast_2d(np.asarray(residual, dtype=np.float64))
    kind = method.kind

    if kind == MethodKind.MSE:
        ev = mse_loss(r)
        return MethodObjective(value=ev.value, grad_mean=ev.grad_mean, grad_head=None)

    if head_raw is None:
        raise LossError(f"Method {kind.value} needs covariance-head outputs")
    raw = np.atleast_2d(np.asarray(head_raw, dtype=np.float64))

    if kind == MethodKind.TIC:
        if diff is None:
            raise LossError("TIC needs the mean network's input derivatives")
        tev = tic_nll(r, diff, tic_head_decode(raw))
        return MethodObjective(value=tev.loss.value, grad_mean=tev.loss.grad_mean, grad_head=tev.grad_raw)

    if kind in (MethodKind.NLL_DIAG, MethodKind.BETA_NLL):
        beta = 0.0 if kind == MethodKind.NLL_DIAG else method.beta
        ev = beta_nll(r, diag_variance(raw), beta)
        return MethodObjective(value=ev.value, grad_mean=ev.grad_mean, grad_head=_diag_raw_grad(raw, ev.grad_var))

    lower, cov = assemble_pd_batch(raw)
    ev = nll_full(r, cov) if kind == MethodKind.NLL_FULL else faithful_loss(r, cov)
    return MethodObjective(
        value=ev.value,
        grad_mean=ev.grad_mean,
        grad_head=assemble_pd_backward(raw, lower, ev.grad_cov),
    )

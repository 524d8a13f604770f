"""
Predictive covariance heads for every method, including the Taylor Induced
Covariance k1·J·Jᵀ + k2·Gram(H) + k3.

Covariances here are float64 arrays (..., n, n), symmetric by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.schemas.experiment import MethodKind
from app.services.linalg_service import (
    EPS_MIN,
    ShapeMismatch,
    assemble_pd_batch,
    dim_from_tril_size,
    lower_from_raw,
    softplus,
    tril_size,
)
from app.services.mlp_service import DiffEval, Mlp, forward, forward_with_input_derivatives


@dataclass(frozen=True)
class TicParams:
    k1: np.ndarray
    k2: np.ndarray
    k3_lower: np.ndarray
    raw: Optional[np.ndarray] = None

    @property
    def k3(self) -> np.ndarray:
        return self.k3_lower @ np.swapaxes(self.k3_lower, -1, -2)


@dataclass(frozen=True)
class GaussianPrediction:
    mean: np.ndarray
    cov: np.ndarray


def head_width(method: MethodKind, n: int) -> int:
    if method == MethodKind.TIC:
        return 2 + tril_size(n)
    if method in (MethodKind.NLL_FULL, MethodKind.FAITHFUL):
        return tril_size(n)
    if method in (MethodKind.NLL_DIAG, MethodKind.BETA_NLL):
        return n
    return 0


def hessian_gram(hessian: np.ndarray) -> np.ndarray:
    """Entry (i, j) = Trace(H[i] · H[j]) over the trailing two axes."""
    h = np.asarray(hessian, dtype=np.float64)
    if h.ndim < 3 or h.shape[-1] != h.shape[-2]:
        raise ShapeMismatch(f"Hessian tensor must be (..., n, m, m), got {h.shape}")
    gram = np.einsum("...ipq,...jqp->...ij", h, h, optimize=True)
    return 0.5 * (gram + np.swapaxes(gram, -1, -2))


def tic_covariance(d: DiffEval, p: TicParams) -> np.ndarray:
    jac = np.asarray(d.jacobian)
    n = jac.shape[-2]
    if d.hessian.shape[-3] != n or p.k3_lower.shape[-1] != n:
        raise ShapeMismatch(
            f"Jacobian {jac.shape}, Hessian {d.hessian.shape} and k3 {p.k3_lower.shape} disagree on n"
        )
    jjt = jac @ np.swapaxes(jac, -1, -2)
    k1 = np.asarray(p.k1)[..., None, None]
    k2 = np.asarray(p.k2)[..., None, None]
    return k1 * jjt + k2 * hessian_gram(d.hessian) + p.k3


def tic_head_decode(raw: np.ndarray) -> TicParams:
    r = np.asarray(raw, dtype=np.float64)
    if r.shape[-1] < 3:
        raise ShapeMismatch(f"TIC head needs 2 + n(n+1)/2 outputs, got {r.shape[-1]}")
    dim_from_tril_size(r.shape[-1] - 2)
    return TicParams(
        k1=softplus(r[..., 0]),
        k2=softplus(r[..., 1]),
        k3_lower=lower_from_raw(r[..., 2:]),
        raw=r,
    )


def diag_variance(raw: np.ndarray) -> np.ndarray:
    return (softplus(raw) + EPS_MIN) ** 2


def diag_covariance(raw: np.ndarray) -> np.ndarray:
    var = diag_variance(raw)
    n = var.shape[-1]
    out = np.zeros(var.shape + (n,))
    idx = np.arange(n)
    out[..., idx, idx] = var
    return out


def full_cholesky_covariance(raw: np.ndarray) -> np.ndarray:
    _, cov = assemble_pd_batch(raw)
    return cov


def taylor_moment_covariance(d: DiffEval, sigma: float) -> np.ndarray:
    """Closed-form covariance of J·ε + ½εᵀHε for ε ~ N(0, σ²I)."""
    jac = np.asarray(d.jacobian)
    return sigma**2 * (jac @ np.swapaxes(jac, -1, -2)) + 0.5 * sigma**4 * hessian_gram(d.hessian)


def taylor_perturbations(
    d: DiffEval, sigma: float, n_draws: int, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Draws of the linear (J·ε) and quadratic (½εᵀHε) Taylor terms for one sample."""
    jac = np.asarray(d.jacobian)
    hess = np.asarray(d.hessian)
    if jac.ndim != 2 or hess.ndim != 3:
        raise ShapeMismatch("taylor_perturbations expects a single-sample DiffEval")
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, sigma, size=(n_draws, jac.shape[1]))
    linear = eps @ jac.T
    quadratic = 0.5 * np.einsum("dp,ipq,dq->di", eps, hess, eps, optimize=True)
    return linear, quadratic


def monte_carlo_taylor_cov(d: DiffEval, sigma: float, n_draws: int, seed: int = 0) -> np.ndarray:
    if n_draws < 10_000:
        raise ValueError(f"n_draws must be >= 10000 for a meaningful estimate, got {n_draws}")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    linear, quadratic = taylor_perturbations(d, sigma, n_draws, seed)
    return np.atleast_2d(np.cov(linear + quadratic, rowvar=False))


def predict_gaussian(
    mean_net: Mlp,
    cov_net: Optional[Mlp],
    method: MethodKind,
    inputs: np.ndarray,
) -> GaussianPrediction:
    """Mean and covariance for a batch of inputs; MSE predicts identity covariance."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if method == MethodKind.TIC:
        diff = forward_with_input_derivatives(mean_net, x)
        mean = diff.value
        cov = tic_covariance(diff, tic_head_decode(forward(cov_net, x)))
    else:
        mean = forward(mean_net, x)
        n = mean.shape[1]
        if method == MethodKind.MSE or cov_net is None:
            cov = np.broadcast_to(np.eye(n), (x.shape[0], n, n)).copy()
        elif method in (MethodKind.NLL_DIAG, MethodKind.BETA_NLL):
            cov = diag_covariance(forward(cov_net, x))
        else:
            cov = full_cholesky_covariance(forward(cov_net, x))
    return GaussianPrediction(mean=mean, cov=cov)

"""
Fast in-process battery of oracle and invariant checks, run by `selftest`.

Sizes are reduced relative to the full test suite so the whole battery finishes
in seconds; every check uses a fixed seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from app.services.covariance_service import (
    monte_carlo_taylor_cov,
    taylor_moment_covariance,
    tic_covariance,
    tic_head_decode,
)
from app.services.linalg_service import assemble_pd, cholesky, min_eigenvalue, tril_size
from app.services.loss_service import beta_nll, faithful_loss, nll_full
from app.services.metrics_service import tac
from app.services.mlp_service import DiffEval, forward, forward_with_input_derivatives, init_mlp

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.linalg.norm(b)), float(np.linalg.norm(a)), 1e-12)
    return float(np.linalg.norm(a - b)) / scale


def fd_input_derivatives(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-4) -> tuple[np.ndarray, np.ndarray]:
    """Central differences: J from f, H from central differences of J."""
    m = x.shape[0]

    def jac(at: np.ndarray) -> np.ndarray:
        cols = []
        for k in range(m):
            e = np.zeros(m)
            e[k] = h
            cols.append((f(at + e) - f(at - e)) / (2 * h))
        return np.stack(cols, axis=-1)

    j0 = jac(x)
    slices = []
    for k in range(m):
        e = np.zeros(m)
        e[k] = h
        slices.append((jac(x + e) - jac(x - e)) / (2 * h))
    hess = np.stack(slices, axis=-1)
    return j0, 0.5 * (hess + np.swapaxes(hess, -1, -2))


def dense_tac(y: np.ndarray, y_hat: np.ndarray, cov: np.ndarray) -> float:
    """TAC from an explicit inverse of each observed block."""
    n = y.shape[0]
    errs = []
    for i in range(n):
        obs = [j for j in range(n) if j != i]
        s12 = cov[i, obs]
        s22_inv = np.linalg.inv(cov[np.ix_(obs, obs)])
        cond = y_hat[i] + s12 @ s22_inv @ (y[obs] - y_hat[obs])
        errs.append(abs(cond - y[i]))
    return float(np.mean(errs))


def _check_mlp_derivatives() -> str:
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(5):
        net = init_mlp([3, 8, 2], "tanh", seed=trial)
        x = rng.normal(size=3)
        d = forward_with_input_derivatives(net, x)
        j_fd, h_fd = fd_input_derivatives(lambda v: forward(net, v), x)
        worst = max(worst, rel_err(d.jacobian, j_fd), rel_err(d.hessian, h_fd))
    if worst > 1e-5:
        raise AssertionError(f"max relative error {worst:.3e}")
    return f"max_rel_err={worst:.3e}"


def _check_taylor_moments() -> str:
    rng = np.random.default_rng(12)
    jac = rng.normal(size=(2, 3))
    h = rng.normal(size=(2, 3, 3))
    d = DiffEval(value=np.zeros(2), jacobian=jac, hessian=0.5 * (h + np.swapaxes(h, -1, -2)))
    sigma = 0.5
    empirical = monte_carlo_taylor_cov(d, sigma, n_draws=50_000, seed=3)
    closed = taylor_moment_covariance(d, sigma)
    err = rel_err(empirical, closed)
    if err > 0.05:
        raise AssertionError(f"Monte-Carlo covariance off by {err:.3f}")
    return f"rel_err={err:.3e}"


def _check_tic_pd() -> str:
    rng = np.random.default_rng(13)
    worst = np.inf
    for _ in range(200):
        n = int(rng.integers(1, 13))
        m = int(rng.integers(1, 9))
        h = rng.normal(size=(n, m, m))
        d = DiffEval(value=np.zeros(n), jacobian=rng.normal(size=(n, m)), hessian=h + np.swapaxes(h, -1, -2))
        p = tic_head_decode(rng.normal(size=2 + tril_size(n)))
        worst = min(worst, min_eigenvalue(tic_covariance(d, p)))
    if worst < -1e-10:
        raise AssertionError(f"min eigenvalue {worst:.3e}")
    return f"min_eig={worst:.3e}"


def _check_assemble_pd() -> str:
    rng = np.random.default_rng(14)
    for _ in range(200):
        n = int(rng.integers(1, 13))
        cholesky(assemble_pd(rng.normal(size=tril_size(n))))
    return "draws=200"


def _check_tac_oracle() -> str:
    rng = np.random.default_rng(15)
    worst = 0.0
    for _ in range(50):
        a = rng.normal(size=(5, 5))
        cov = a @ a.T + 0.1 * np.eye(5)
        y, y_hat = rng.normal(size=5), rng.normal(size=5)
        worst = max(worst, abs(tac(y, y_hat, cov) - dense_tac(y, y_hat, cov)))
    if worst > 1e-10:
        raise AssertionError(f"max deviation {worst:.3e}")
    return f"max_abs_dev={worst:.3e}"


def _check_loss_gradients() -> str:
    rng = np.random.default_rng(16)
    h = 1e-5
    worst = 0.0
    for _ in range(10):
        n = 3
        r = rng.normal(size=n)
        a = rng.normal(size=(n, n))
        cov = a @ a.T + np.eye(n)
        ev = nll_full(r, cov)
        fd = np.array([(nll_full(r - h * e, cov).value - nll_full(r + h * e, cov).value) / (2 * h) for e in np.eye(n)])
        # ∂/∂ŷ = -∂/∂r
        worst = max(worst, rel_err(ev.grad_mean, fd))

        var = rng.uniform(0.5, 2.0, size=n)
        bev = beta_nll(r, var, 0.0)
        fd_var = np.array([(beta_nll(r, var + h * e, 0.0).value - beta_nll(r, var - h * e, 0.0).value) / (2 * h) for e in np.eye(n)])
        worst = max(worst, rel_err(bev.grad_var, fd_var))

        if not np.array_equal(faithful_loss(r, cov).grad_mean, faithful_loss(r, 2.0 * cov).grad_mean):
            raise AssertionError("Faithful mean gradient depends on the covariance")
    if worst > 1e-5:
        raise AssertionError(f"max relative error {worst:.3e}")
    return f"max_rel_err={worst:.3e}"


CHECKS: dict[str, Callable[[], str]] = {
    "mlp_derivatives": _check_mlp_derivatives,
    "taylor_moments": _check_taylor_moments,
    "tic_positive_definite": _check_tic_pd,
    "assemble_pd": _check_assemble_pd,
    "tac_oracle": _check_tac_oracle,
    "loss_gradients": _check_loss_gradients,
}


def run_selftest() -> list[CheckResult]:
    results = []
    for name, check in CHECKS.items():
        try:
            detail = check()
            results.append(CheckResult(name=name, passed=True, detail=detail))
        except Exception as e:  # noqa: BLE001
            logger.warning("Self-test check failed. check=%s error=%s", name, e)
            results.append(CheckResult(name=name, passed=False, detail=str(e)))
    return results

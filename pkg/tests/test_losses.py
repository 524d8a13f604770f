from __future__ import annotations

import math

import numpy as np
import pytest

from app.schemas.experiment import MethodKind
from app.services.covariance_service import TicParams, head_width, tic_head_decode
from app.services.loss_service import (
    LossError,
    Method,
    NonPositiveVariance,
    beta_nll,
    faithful_loss,
    method_objective,
    mse_loss,
    nll_diag,
    nll_full,
    tic_nll,
)
from app.services.metrics_service import tac
from app.services.mlp_service import DiffEval

H = 1e-5


def _random_pd(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.normal(size=(n, n))
    return a @ a.T + np.eye(n)


def _random_diff(rng: np.random.Generator, n: int, m: int) -> DiffEval:
    h = rng.normal(size=(n, m, m))
    return DiffEval(value=np.zeros(n), jacobian=rng.normal(size=(n, m)), hessian=0.5 * (h + np.swapaxes(h, -1, -2)))


def _fd_mean(fn, r: np.ndarray) -> np.ndarray:
    # ∂/∂ŷ with r = y - ŷ
    return np.array([(fn(r - H * e) - fn(r + H * e)) / (2 * H) for e in np.eye(r.size)])


def _fd_cov(fn, cov: np.ndarray) -> np.ndarray:
    """Unconstrained gradient from symmetric perturbations of Σ."""
    n = cov.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            e = np.zeros((n, n))
            e[i, j] = e[j, i] = H
            d = (fn(cov + e) - fn(cov - e)) / (2 * H)
            out[i, j] = out[j, i] = d if i == j else d / 2
    return out


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def test_nll_full_examples():
    ev = nll_full(np.ones(2), np.eye(2))
    assert float(ev.value) == pytest.approx(2.0, abs=1e-12)
    assert np.allclose(ev.grad_mean, [-2.0, -2.0])

    ev = nll_full(np.zeros(2), np.diag([math.e, math.e]))
    assert float(ev.value) == pytest.approx(2.0, abs=1e-12)
    assert np.allclose(ev.grad_cov, np.diag([1 / math.e, 1 / math.e]), atol=1e-15)


def test_nll_full_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        r = rng.normal(size=n)
        cov = _random_pd(rng, n)
        ev = nll_full(r, cov)
        assert _rel(ev.grad_mean, _fd_mean(lambda v: float(nll_full(v, cov).value), r)) <= 1e-5
        assert _rel(ev.grad_cov, _fd_cov(lambda c: float(nll_full(r, c).value), cov)) <= 1e-5


def _permuted_values(loss: str, rng: np.random.Generator, p: np.ndarray) -> tuple[float, float]:
    n = p.shape[0]
    r = rng.normal(size=n)
    if loss == "nll_full":
        cov = _random_pd(rng, n)
        return float(nll_full(r, cov).value), float(nll_full(p @ r, p @ cov @ p.T).value)
    if loss == "faithful":
        cov = _random_pd(rng, n)
        return float(faithful_loss(r, cov).value), float(faithful_loss(p @ r, p @ cov @ p.T).value)
    if loss == "beta_nll":
        var = rng.uniform(0.5, 2.0, size=n)
        return float(beta_nll(r, var, 0.5).value), float(beta_nll(p @ r, p @ var, 0.5).value)
    if loss == "mse":
        return float(mse_loss(r).value), float(mse_loss(p @ r).value)
    # Permuting outputs permutes J rows and H slices; a diagonal k3 factor stays lower triangular.
    d = _random_diff(rng, n, 3)
    params = TicParams(k1=np.array(0.7), k2=np.array(0.2), k3_lower=np.diag(rng.uniform(0.5, 1.5, size=n)))
    d_perm = DiffEval(value=p @ d.value, jacobian=p @ d.jacobian, hessian=np.einsum("ij,jkl->ikl", p, d.hessian))
    params_perm = TicParams(k1=params.k1, k2=params.k2, k3_lower=p @ params.k3_lower @ p.T)
    return float(tic_nll(r, d, params).loss.value), float(tic_nll(p @ r, d_perm, params_perm).loss.value)


@pytest.mark.parametrize("loss", ["nll_full", "faithful", "beta_nll", "mse", "tic"])
def test_losses_are_permutation_equivariant(loss):
    rng = np.random.default_rng(1)
    p = np.eye(4)[rng.permutation(4)]
    base, permuted = _permuted_values(loss, rng, p)
    assert permuted == pytest.approx(base, abs=1e-10)


def test_nll_full_batched_matches_single():
    rng = np.random.default_rng(2)
    r = rng.normal(size=(3, 2))
    covs = np.stack([_random_pd(rng, 2) for _ in range(3)])
    batched = nll_full(r, covs)
    for i in range(3):
        assert float(batched.value[i]) == pytest.approx(float(nll_full(r[i], covs[i]).value), abs=1e-12)


def test_beta_nll_examples():
    r = np.array([0.3, -1.2])
    var = np.array([0.5, 2.0])
    assert np.allclose(beta_nll(r, var, 0.0).value, nll_diag(r, var).value)
    assert np.array_equal(beta_nll(r, var, 1.0).grad_mean, -2.0 * r)
    assert float(beta_nll(np.ones(1), np.ones(1), 0.5).value) == pytest.approx(1.0, abs=1e-15)


def test_beta_nll_variance_gradient_treats_weight_as_constant():
    rng = np.random.default_rng(3)
    for beta in (0.0, 0.5, 1.0):
        r = rng.normal(size=3)
        var = rng.uniform(0.5, 2.0, size=3)
        weight = var**beta
        ev = beta_nll(r, var, beta)

        def frozen(v: np.ndarray) -> float:
            return float(np.sum(weight * (np.log(v) + r * r / v)))

        fd = np.array([(frozen(var + H * e) - frozen(var - H * e)) / (2 * H) for e in np.eye(3)])
        assert _rel(ev.grad_var, fd) <= 1e-5


def test_nll_diag_mean_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    for _ in range(100):
        r = rng.normal(size=3)
        var = rng.uniform(0.2, 3.0, size=3)
        ev = nll_diag(r, var)
        assert _rel(ev.grad_mean, _fd_mean(lambda v: float(nll_diag(v, var).value), r)) <= 1e-5


def test_beta_nll_rejects_bad_inputs():
    with pytest.raises(NonPositiveVariance):
        beta_nll(np.ones(2), np.array([1.0, 0.0]), 0.5)
    with pytest.raises(ValueError):
        beta_nll(np.ones(2), np.ones(2), 1.5)
    with pytest.raises(ValueError):
        Method(MethodKind.BETA_NLL, beta=-0.1)


def test_faithful_examples():
    r = np.array([1.0, -2.0])
    ev = faithful_loss(r, np.eye(2))
    assert np.array_equal(ev.grad_mean, -2.0 * r)
    assert np.allclose(ev.grad_cov, np.eye(2) - np.outer(r, r), atol=1e-14)

    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    ev = faithful_loss(np.zeros(2), cov)
    assert np.allclose(ev.grad_cov, np.linalg.inv(cov), atol=1e-14)


def test_faithful_mean_gradient_ignores_covariance():
    rng = np.random.default_rng(5)
    r = rng.normal(size=3)
    a = faithful_loss(r, _random_pd(rng, 3))
    b = faithful_loss(r, _random_pd(rng, 3))
    assert np.array_equal(a.grad_mean, b.grad_mean)


def test_faithful_covariance_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    for _ in range(50):
        r = rng.normal(size=3)
        cov = _random_pd(rng, 3)
        ev = faithful_loss(r, cov)
        assert _rel(ev.grad_cov, _fd_cov(lambda c: float(faithful_loss(r, c).value), cov)) <= 1e-5


def test_mse_examples():
    assert float(mse_loss(np.zeros(3)).value) == 0.0
    assert float(mse_loss(np.array([3.0, 4.0])).value) == 25.0
    y = np.array([1.0, 2.0, 3.0])
    y_hat = np.array([0.5, 2.5, 2.0])
    assert tac(y, y_hat, np.eye(3)) == pytest.approx(float(np.mean(np.abs(y - y_hat))), abs=1e-15)


def test_beta_one_mean_gradient_equals_mse():
    r = np.array([0.4, -0.9])
    assert np.array_equal(beta_nll(r, np.array([0.3, 4.0]), 1.0).grad_mean, mse_loss(r).grad_mean)


def test_tic_nll_reduces_to_full_nll_when_k1_k2_vanish():
    rng = np.random.default_rng(7)
    k3_lower = np.tril(rng.normal(size=(3, 3))) + 2 * np.eye(3)
    p = TicParams(k1=np.array(0.0), k2=np.array(0.0), k3_lower=k3_lower)
    r = rng.normal(size=3)
    got = tic_nll(r, _random_diff(rng, 3, 2), p).loss.value
    assert float(got) == pytest.approx(float(nll_full(r, k3_lower @ k3_lower.T).value), abs=1e-12)


def test_tic_nll_scalar_case():
    d = DiffEval(value=np.zeros(1), jacobian=np.array([[2.0]]), hessian=np.array([[[3.0]]]))
    p = TicParams(k1=np.array(1.0), k2=np.array(1.0), k3_lower=np.array([[0.5]]))
    value = float(tic_nll(np.ones(1), d, p).loss.value)
    assert value == pytest.approx(math.log(13.25) + 1 / 13.25, abs=1e-12)
    assert value == pytest.approx(2.6594, abs=1e-3)


def test_tic_nll_scale_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n, m = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        d = _random_diff(rng, n, m)
        r = rng.normal(size=n)
        p = tic_head_decode(rng.normal(size=2 + n * (n + 1) // 2))
        ev = tic_nll(r, d, p)

        def at(k1: float, k2: float) -> float:
            return float(tic_nll(r, d, TicParams(k1=np.array(k1), k2=np.array(k2), k3_lower=p.k3_lower)).loss.value)

        k1, k2 = float(p.k1), float(p.k2)
        fd_k1 = (at(k1 + H, k2) - at(k1 - H, k2)) / (2 * H)
        fd_k2 = (at(k1, k2 + H) - at(k1, k2 - H)) / (2 * H)
        assert float(ev.grad_k1) == pytest.approx(fd_k1, rel=1e-5, abs=1e-8)
        assert float(ev.grad_k2) == pytest.approx(fd_k2, rel=1e-5, abs=1e-8)
        assert _rel(ev.loss.grad_mean, _fd_mean(lambda v: float(tic_nll(v, d, p).loss.value), r)) <= 1e-5


@pytest.mark.parametrize(
    "kind",
    [MethodKind.TIC, MethodKind.NLL_FULL, MethodKind.NLL_DIAG, MethodKind.FAITHFUL],
)
def test_method_objective_head_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(9)
    n, m = 3, 2
    method = Method(kind)
    for _ in range(20):
        r = rng.normal(size=(1, n))
        raw = rng.normal(scale=0.5, size=(1, head_width(kind, n)))
        d = _random_diff(rng, n, m)
        diff = DiffEval(value=d.value[None], jacobian=d.jacobian[None], hessian=d.hessian[None])

        obj = method_objective(method, r, raw, diff)
        fd = np.zeros(raw.shape[1])
        for k in range(raw.shape[1]):
            e = np.zeros_like(raw)
            e[0, k] = H
            plus = float(method_objective(method, r, raw + e, diff).value[0])
            minus = float(method_objective(method, r, raw - e, diff).value[0])
            fd[k] = (plus - minus) / (2 * H)
        assert _rel(obj.grad_head[0], fd) <= 1e-5


def test_method_objective_dispatch_errors():
    r = np.zeros((2, 3))
    assert method_objective(Method(MethodKind.MSE), r).grad_head is None
    with pytest.raises(LossError):
        method_objective(Method(MethodKind.NLL_FULL), r)
    with pytest.raises(LossError):
        method_objective(Method(MethodKind.TIC), r, np.zeros((2, head_width(MethodKind.TIC, 3))))

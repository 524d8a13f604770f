from __future__ import annotations

import numpy as np
import pytest

from app.schemas.experiment import MethodKind
from app.services.covariance_service import predict_gaussian
from app.services.data_service import Dataset
from app.services.loss_service import nll_full
from app.services.metrics_service import (
    UCI_REFERENCE_TAC,
    DimensionTooSmall,
    evaluate,
    mean_fit_rmse,
    tac,
    tac_per_sample,
    variance_calibration,
)
from app.services.mlp_service import forward, init_mlp
from app.services.selftest_service import dense_tac


def _random_pd(rng: np.random.Generator, n: int) -> np.ndarray:
    a = rng.normal(size=(n, n))
    return a @ a.T + 0.1 * np.eye(n)


def test_identity_covariance_gives_mean_absolute_error():
    rng = np.random.default_rng(0)
    y, y_hat = rng.normal(size=4), rng.normal(size=4)
    assert tac(y, y_hat, np.eye(4)) == float(np.mean(np.abs(y_hat - y)))


def test_two_dimensional_correlation_case():
    rho = 0.3
    got = tac(np.ones(2), np.zeros(2), np.array([[1.0, rho], [rho, 1.0]]))
    assert got == pytest.approx(abs(1 - rho), abs=1e-14)


def test_matches_dense_inverse_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        cov = _random_pd(rng, 5)
        y, y_hat = rng.normal(size=5), rng.normal(size=5)
        assert abs(tac(y, y_hat, cov) - dense_tac(y, y_hat, cov)) <= 1e-10


def test_invariant_to_covariance_scale():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(4, 4))
    cov = a @ a.T + np.eye(4)
    y, y_hat = rng.normal(size=4), rng.normal(size=4)
    assert tac(y, y_hat, 3.7 * cov) == pytest.approx(tac(y, y_hat, cov), abs=1e-12)


def test_invariant_to_dimension_permutation():
    rng = np.random.default_rng(3)
    cov = _random_pd(rng, 5)
    y, y_hat = rng.normal(size=5), rng.normal(size=5)
    perm = rng.permutation(5)
    got = tac(y[perm], y_hat[perm], cov[np.ix_(perm, perm)])
    assert got == pytest.approx(tac(y, y_hat, cov), abs=1e-12)


def test_uncorrelated_dimension_contributes_its_own_error():
    rho = 0.5
    cov = np.array([[2.0, 0.0, 0.0], [0.0, 1.0, rho], [0.0, rho, 1.0]])
    y = np.array([1.0, 0.4, -0.2])
    y_hat = np.array([0.25, 0.0, 0.0])
    expected = (0.75 + abs(rho * y[2] - y[1]) + abs(rho * y[1] - y[2])) / 3
    assert tac(y, y_hat, cov) == pytest.approx(expected, abs=1e-14)


def test_needs_two_dimensions():
    with pytest.raises(DimensionTooSmall):
        tac(np.ones(1), np.zeros(1), np.eye(1))
    with pytest.raises(DimensionTooSmall):
        tac_per_sample(np.ones((3, 1)), np.zeros((3, 1)), np.ones((3, 1, 1)))


def test_batched_agrees_with_single_sample():
    rng = np.random.default_rng(4)
    y, y_hat = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    covs = np.stack([_random_pd(rng, 4) for _ in range(6)])
    batched = tac_per_sample(y, y_hat, covs)
    for b in range(6):
        assert batched[b] == pytest.approx(tac(y[b], y_hat[b], covs[b]), abs=1e-10)


def test_batched_falls_back_to_jitter_for_singular_observed_block():
    covs = np.stack([np.eye(3), np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]])])
    y = np.array([[1.0, 2.0, 3.0], [0.5, -0.5, 1.0]])
    y_hat = np.zeros((2, 3))
    batched = tac_per_sample(y, y_hat, covs)
    assert batched[0] == pytest.approx(2.0, abs=1e-12)
    assert batched[1] == pytest.approx(tac(y[1], y_hat[1], covs[1]), abs=1e-8)


def test_mean_fit_rmse_and_calibration():
    assert mean_fit_rmse([1.0, 2.0], [1.0, 4.0]) == pytest.approx(np.sqrt(2.0))

    true_std = np.abs(np.linspace(-5, 5, 101))
    report = variance_calibration(2.0 * true_std, true_std)
    assert report.std_pearson == pytest.approx(1.0, abs=1e-12)
    assert report.std_ratio_mean == pytest.approx(2.0, abs=1e-12)

    flat = variance_calibration(np.ones(5), np.arange(5.0))
    assert flat.std_pearson == 0.0


def _perfect_dataset(net, n_samples: int, seed: int) -> Dataset:
    x = np.random.default_rng(seed).normal(size=(n_samples, net.input_dim))
    return Dataset(inputs=x, targets=forward(net, x), name="perfect", seed=seed)


def test_evaluate_perfect_mean_under_identity(settings):
    net = init_mlp([3, 8, 4], "tanh", seed=0)
    report = evaluate(_perfect_dataset(net, 10, 0), net, MethodKind.MSE, None)
    assert report.tac == 0.0
    assert report.mse == 0.0
    assert report.mean_nll == 0.0
    assert report.n_samples == 10


def test_evaluate_single_sample_matches_direct_metrics(settings):
    mean_net = init_mlp([2, 6, 3], "tanh", seed=1)
    cov_net = init_mlp([2, 6, 6], "tanh", seed=2)
    x = np.array([[0.3, -0.7]])
    y = np.array([[0.1, 0.2, -0.4]])
    report = evaluate(Dataset(inputs=x, targets=y, name="one", seed=0), mean_net, MethodKind.NLL_FULL, cov_net)

    pred = predict_gaussian(mean_net, cov_net, MethodKind.NLL_FULL, x)
    r = y[0] - pred.mean[0]
    assert report.tac == pytest.approx(tac(y[0], pred.mean[0], pred.cov[0]), abs=1e-10)
    assert report.mse == pytest.approx(float(np.mean(r * r)), abs=1e-15)
    assert report.mean_nll == pytest.approx(float(nll_full(r, pred.cov[0]).value), abs=1e-12)


def test_evaluate_is_independent_of_chunk_size(settings):
    mean_net = init_mlp([2, 6, 3], "tanh", seed=3)
    cov_net = init_mlp([2, 6, 8], "tanh", seed=4)
    rng = np.random.default_rng(5)
    data = Dataset(inputs=rng.normal(size=(23, 2)), targets=rng.normal(size=(23, 3)), name="chunks", seed=5)

    whole = evaluate(data, mean_net, MethodKind.TIC, cov_net)
    settings.EVAL_CHUNK_SIZE = 4
    chunked = evaluate(data, mean_net, MethodKind.TIC, cov_net)
    assert chunked.tac == pytest.approx(whole.tac, rel=1e-12)
    assert chunked.mse == pytest.approx(whole.mse, rel=1e-12)
    assert chunked.mean_nll == pytest.approx(whole.mean_nll, rel=1e-12)


def test_evaluate_univariate_has_no_tac(settings):
    net = init_mlp([1, 4, 1], "tanh", seed=0)
    report = evaluate(_perfect_dataset(net, 5, 1), net, MethodKind.MSE, None)
    assert report.tac is None


def test_reference_table_orders_tic_ahead_on_abalone():
    ref = UCI_REFERENCE_TAC["abalone"]
    assert ref["tic"] < ref["nll"] < ref["diagonal"]

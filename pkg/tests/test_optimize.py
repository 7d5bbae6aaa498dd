import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from qkica.errors import InvalidConfigError, NumericalError
from qkica.optimize import (
    OptimizeOptions,
    amari_error,
    correlation_matrix,
    kica_objective,
    kurtosis_objective,
    minimize_stiefel,
    noisy_objective,
    parse_grid,
    scan_landscape,
)
from qkica.preprocess import whiten
from qkica.qemu import NoiseSpec
from qkica.sources import SampleMatrix, SourceSpec, landscape_generators, mix, random_rotation, sample_sources, stream


def test_amari_error_of_scaled_permutation():
    A = random_rotation(3, 4)
    P = np.array([[0.0, 2.0, 0.0], [0.0, 0.0, -1.0], [0.5, 0.0, 0.0]])
    assert amari_error(A, P @ np.linalg.inv(A)) == pytest.approx(0.0, abs=1e-10)


def test_amari_error_of_full_mixing():
    assert amari_error(np.ones((2, 2)), np.eye(2)) == pytest.approx(1.0)


def test_amari_error_ignores_output_order():
    rng = stream(2, 0)
    A, W = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    assert amari_error(A, W[[2, 0, 1]]) == pytest.approx(amari_error(A, W))


def test_amari_error_rejects_zero_rows():
    with pytest.raises(InvalidConfigError):
        amari_error(np.eye(2), np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_correlation_matrix(sources):
    C = correlation_matrix(sources, sources)
    assert_allclose(np.diag(C), 1.0)
    negated = SampleMatrix(-sources.data)
    assert_allclose(np.diag(correlation_matrix(negated, sources)), -1.0)
    with pytest.raises(InvalidConfigError, match="Sample counts"):
        correlation_matrix(sources, sources.data[:, :10])
    with pytest.raises(InvalidConfigError, match="zero-variance"):
        correlation_matrix(np.ones((1, 5)), np.arange(5.0))


def test_parse_grid():
    assert parse_grid("-1:1:5") == (-1.0, 1.0, 5)
    assert parse_grid([0, 2, 3]) == (0.0, 2.0, 3)
    for bad in ("1:2", "a:b:c", "1:0:4", "0:1:0"):
        with pytest.raises(InvalidConfigError):
            parse_grid(bad)


def test_single_step_grid_evaluates_once(sources):
    calls = []

    def objective(Y, W):
        calls.append(W)
        return 1.0

    landscape = scan_landscape(sources, landscape_generators(2), "0:0:1", objective)
    assert len(calls) == 1
    assert landscape.values.shape == (1, 1)
    assert_allclose(calls[0], np.eye(2))


def test_landscape_rejects_three_generators(sources):
    with pytest.raises(InvalidConfigError, match="1 or 2 generators"):
        scan_landscape(sources, landscape_generators(3) * 2, "0:1:3", lambda Y, W: 0.0)


@pytest.mark.parametrize("signed", [True, False])
def test_landscape_minimum_at_independence(signed):
    S = sample_sources(SourceSpec(("uniform", "laplace"), 300, 5))
    objective = kica_objective(eps_trunc=0.05, signed=signed)
    landscape = scan_landscape(S, landscape_generators(2), (-math.pi / 4, math.pi / 4, 5), objective)
    assert landscape.values.shape == (5, 5)
    assert landscape.cell_contains((0.0, 0.0))
    assert len(landscape.rows()) == 25


def test_landscape_with_workers_matches_serial(sources):
    objective = kica_objective(eps_trunc=0.1)
    serial = scan_landscape(sources, landscape_generators(2), "-0.5:0.5:3", objective)
    threaded = scan_landscape(sources, landscape_generators(2), "-0.5:0.5:3", objective, workers=3)
    assert_allclose(serial.values, threaded.values)


def _rotation_target(target):
    def objective(Y, W):
        return -float(np.trace(W @ target.T))

    return objective


def test_descent_reaches_target_rotation(sources):
    target = random_rotation(3, 8)
    Y = SampleMatrix(np.vstack([sources.data, sources.data[:1] ** 2]))
    options = OptimizeOptions(restarts=1, max_iters=200, tol=1e-10)
    report = minimize_stiefel(Y, _rotation_target(target), options)
    assert_allclose(report.W_opt, target, atol=1e-3)
    assert_allclose(report.W_opt.T @ report.W_opt, np.eye(3), atol=1e-10)
    values = [J for _, J in report.J_trace]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_descent_stops_at_stationary_start(sources):
    target = random_rotation(2, 1)
    report = minimize_stiefel(sources, _rotation_target(target), OptimizeOptions(restarts=1), W0=target)
    assert len(report.J_trace) <= 3
    assert report.converged


def test_restarts_are_reproducible(sources):
    target = random_rotation(2, 6)
    options = OptimizeOptions(restarts=3, max_iters=5, seed=2)
    a = minimize_stiefel(sources, _rotation_target(target), options)
    b = minimize_stiefel(sources, _rotation_target(target), options)
    assert a.restart_values == b.restart_values
    assert a.restarts_used == 3


def test_all_restarts_non_finite(sources):
    with pytest.raises(NumericalError, match="every restart"):
        minimize_stiefel(sources, lambda Y, W: math.inf, OptimizeOptions(restarts=2))


def test_non_finite_start_is_replaced(sources):
    target = random_rotation(2, 6)
    near_target = _rotation_target(target)

    def objective(Y, W):
        if np.max(np.abs(W - np.eye(2))) < 0.01:
            return math.inf
        return near_target(Y, W)

    report = minimize_stiefel(sources, objective, OptimizeOptions(restarts=1, seed=3))
    assert report.failed_restarts >= 1
    assert report.restarts_used == 1
    assert math.isfinite(report.J_opt)


def test_initial_w_shape(sources):
    with pytest.raises(InvalidConfigError):
        minimize_stiefel(sources, lambda Y, W: 0.0, W0=np.eye(3))


def test_options_validation():
    with pytest.raises(InvalidConfigError):
        OptimizeOptions(restarts=0)
    with pytest.raises(InvalidConfigError):
        OptimizeOptions(fd_step=0.0)


def test_kurtosis_objective_prefers_sources():
    S = sample_sources(SourceSpec(("uniform", "uniform"), 5000, 1))
    objective = kurtosis_objective()
    c = s = math.sqrt(0.5)
    assert objective(S, np.eye(2)) < objective(S, np.array([[c, -s], [s, c]]))


def test_noiseless_noisy_objective_matches_adapted(sources):
    W = random_rotation(2, 9)
    exact = kica_objective(eps_trunc=0.05, signed=False)(sources, W)
    emulated = noisy_objective(NoiseSpec(seed=1), eps_trunc=0.05)(sources, W)
    assert emulated == pytest.approx(exact, rel=1e-9)


def test_noisy_objective_is_infinite_outside_budget(sources):
    objective = noisy_objective(NoiseSpec(eps1=0.5, seed=1), eps_trunc=0.05)
    assert objective(sources, np.eye(2)) == math.inf


def test_kica_recovers_rotated_sources():
    S = sample_sources(SourceSpec(("uniform", "uniform"), 1000, 3))
    A = random_rotation(2, 12)
    Y, model = whiten(mix(S, A))
    options = OptimizeOptions(restarts=2, max_iters=40, seed=3)
    report = minimize_stiefel(Y, kica_objective(eps_trunc=0.05), options, mixing=model.inv_sqrt @ A)
    assert report.amari <= 0.15

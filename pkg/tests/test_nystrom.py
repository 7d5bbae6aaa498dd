import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from qkica.errors import InvalidConfigError, UnstableExtensionError
from qkica.gram import KernelSpec, gram_pair
from qkica.nystrom import (
    c_d_table,
    centered_kernel_eval,
    coverage_trial,
    estimate_C_D,
    extend_derivative,
    extend_eigenfunction,
    near_independent_mix,
    overlap_linearity,
    overlap_via_M,
    top_eigenfunctions,
)
from qkica.sources import Distribution, SourceSpec, sample_sources, stream
from qkica.spectral import decompose, overlaps


@pytest.fixture
def eigenfunctions(sources):
    return top_eigenfunctions(sources.row(0), 0, 3)


def test_eigenfunctions_solve_the_eigen_equation(eigenfunctions):
    for ef in eigenfunctions:
        assert ef.residual() <= 1e-8
        assert np.mean(ef.values**2) == pytest.approx(1.0)
    mus = [ef.mu for ef in eigenfunctions]
    assert mus == sorted(mus, reverse=True)


def test_extension_interpolates_the_samples(eigenfunctions):
    for ef in eigenfunctions:
        assert_allclose(ef(ef.base), ef.values, rtol=1e-8, atol=1e-8)


def test_extension_of_a_scalar(eigenfunctions):
    ef = eigenfunctions[0]
    assert isinstance(ef(0.25), float)
    assert ef(0.25) == pytest.approx(extend_eigenfunction(ef, np.array([0.25]))[0])


def test_derivative_matches_finite_differences(eigenfunctions):
    x = np.linspace(-2.0, 2.0, 11)
    h = 1e-5
    for ef in eigenfunctions:
        numeric = (ef(x + h) - ef(x - h)) / (2 * h)
        assert_allclose(extend_derivative(ef, x), numeric, atol=1e-5)


def test_centered_kernel_eval_matches_gram(sources):
    z = sources.row(1)[:50]
    centered = gram_pair(z, KernelSpec()).centered
    values = centered_kernel_eval(z, KernelSpec(), z[:, None], z[None, :])
    assert_allclose(values, centered, atol=1e-12)


def test_unstable_extension(eigenfunctions):
    ef = eigenfunctions[0]
    tiny = type(ef)(ef.index, ef.values, 0.0, ef.base, ef.kernel, ef.row_means, ef.grand_mean)
    with pytest.raises(UnstableExtensionError):
        tiny(0.0)


def test_overlap_via_M_on_the_base_samples(sources):
    efs_i = top_eigenfunctions(sources.row(0), 0, 2)
    efs_j = top_eigenfunctions(sources.row(1), 1, 2)
    N = sources.n_samples
    si = decompose(gram_pair(sources.row(0), KernelSpec()).centered, N, 0.0)
    sj = decompose(gram_pair(sources.row(1), KernelSpec()).centered, N, 0.0)
    expected = overlaps(si, sj)
    for k in range(2):
        for l in range(2):
            value = overlap_via_M(efs_i[k], efs_j[l], sources.row(0), sources.row(1))
            assert value == pytest.approx(expected[k, l], abs=1e-8)
    assert overlap_via_M(efs_i[0], efs_i[0], sources.row(0), sources.row(0)) == pytest.approx(1.0)


def test_monte_carlo_needs_enough_draws(eigenfunctions):
    with pytest.raises(InvalidConfigError, match="n_mc"):
        estimate_C_D(eigenfunctions[0], eigenfunctions[0], "uniform", "uniform", 50, 0)


def test_gaussian_sources_give_vanishing_C():
    S = sample_sources(SourceSpec(("gaussian", "gaussian"), 300, 4))
    efs_i = top_eigenfunctions(S.row(0), 0, 3)
    efs_j = top_eigenfunctions(S.row(1), 1, 3)
    table = c_d_table(efs_i, efs_j, "gaussian", "gaussian", 10_000, 4)
    assert len(table) == 9
    for e in table:
        assert e.D >= 0
        assert abs(e.C) <= 4.0 * e.stderr


def test_uniform_sources_give_nonzero_C():
    S = sample_sources(SourceSpec(("uniform", "uniform"), 300, 4))
    efs_i = top_eigenfunctions(S.row(0), 0, 3)
    efs_j = top_eigenfunctions(S.row(1), 1, 3)
    table = c_d_table(efs_i, efs_j, Distribution("uniform"), Distribution("uniform"), 10_000, 4)
    assert max(abs(e.C) / e.stderr for e in table) > 5.0


def test_near_independent_mix_is_antisymmetric():
    s_i, s_j = np.array([1.0, 2.0]), np.array([3.0, -1.0])
    z_i, z_j = near_independent_mix(s_i, s_j, 2.0, 0.1)
    assert_allclose(z_i, s_i + 0.2 * s_j)
    assert_allclose(z_j, s_j - 0.2 * s_i)


def test_coverage_trial_validation():
    with pytest.raises(InvalidConfigError, match="N >= 100"):
        coverage_trial(1.0, 0.05, "uniform", "uniform", 50, 5, 3.0, 0)
    with pytest.raises(InvalidConfigError, match="eps2"):
        coverage_trial(1.0, 0.2, "uniform", "uniform", 200, 5, 3.0, 0)
    skipped = coverage_trial(1.0, 0.0, "uniform", "uniform", 200, 5, 3.0, 0)
    assert skipped.skipped
    assert math.isnan(skipped.coverage)


def test_coverage_trial_runs():
    result = coverage_trial(1.0, 0.05, "uniform", "uniform", 150, 4, 3.0, 1, n_mc=2000, top=2)
    assert 0.0 <= result.coverage <= 1.0
    assert len(result.deviations) == 4
    assert result.target == pytest.approx(1 - 1 / 9)
    assert result.pair[0] in (0, 1) and result.pair[1] in (0, 1)


def test_overlap_is_linear_in_eps2():
    N, seed = 400, 8
    reference = top_eigenfunctions(Distribution("uniform").sample(N, stream(seed, 3)), 0, 2)
    other = top_eigenfunctions(Distribution("laplace").sample(N, stream(seed, 4)), 1, 2)
    best = max(c_d_table(reference, other, "uniform", "laplace", 5000, seed), key=lambda e: abs(e.C))
    fit = overlap_linearity((0.0, 0.01, 0.02, 0.03, 0.04, 0.05), "uniform", "laplace", N, seed, k=best.index[1], l=best.index[3])
    assert fit.r_squared >= 0.8
    assert len(fit.overlaps) == 6
    with pytest.raises(InvalidConfigError):
        overlap_linearity((0.01,), "uniform", "laplace", N, seed)


def test_coverage_deviation_is_first_order_in_eps2():
    result = coverage_trial(1.0, 0.001, "uniform", "uniform", 200, 4, 3.0, 2, n_mc=2000, top=2)
    assert max(abs(d) for d in result.deviations) < 0.01


@pytest.mark.slow
def test_coverage_at_acceptance_parameters():
    result = coverage_trial(1.0, 0.05, "uniform", "uniform", 1000, 20, 3.0, 1)
    assert result.coverage >= 0.82

import numpy as np
import pytest
from numpy.testing import assert_allclose

from qkica.errors import InvalidConfigError
from qkica.gram import DEFAULT_SIGMA, KernelSpec, gram_center, gram_pair, gram_raw, kernel_eval


def test_default_bandwidth():
    spec = KernelSpec()
    assert spec.sigma == pytest.approx(1 / np.sqrt(2))
    assert kernel_eval(spec, 0.3, 1.3) == pytest.approx(np.exp(-1.0))


def test_kernel_eval_on_vectors():
    spec = KernelSpec(sigma=2.0)
    assert kernel_eval(spec, [0.0, 0.0], [3.0, 4.0]) == pytest.approx(np.exp(-25 / 8))


def test_invalid_kernel():
    with pytest.raises(InvalidConfigError, match="sigma"):
        KernelSpec(sigma=0.0)
    with pytest.raises(InvalidConfigError, match="Unsupported"):
        KernelSpec(kind="polynomial")


def test_gram_raw(rng):
    z = rng.uniform(-1, 1, 40)
    K = gram_raw(z, KernelSpec())
    assert_allclose(np.diag(K), 1.0)
    assert_allclose(K, K.T)
    assert K[3, 7] == pytest.approx(np.exp(-((z[3] - z[7]) ** 2) / (2 * DEFAULT_SIGMA**2)))


def test_gram_center_matches_projector(rng):
    z = rng.standard_normal(30)
    raw = gram_raw(z, KernelSpec())
    H = np.eye(30) - np.full((30, 30), 1 / 30)
    centered = gram_center(raw)
    assert_allclose(centered, H @ raw @ H, atol=1e-12)
    assert np.max(np.abs(centered.sum(axis=1))) <= 1e-10


def test_gram_needs_two_samples():
    with pytest.raises(InvalidConfigError):
        gram_raw([0.5], KernelSpec())
    with pytest.raises(InvalidConfigError, match="square"):
        gram_center(np.ones((2, 3)))


def test_derivative_factor():
    spec = KernelSpec()
    x, y, h = 0.4, -0.3, 1e-6
    numeric = (kernel_eval(spec, x + h, y) - kernel_eval(spec, x - h, y)) / (2 * h)
    assert spec.derivative_factor(x, y) == pytest.approx(numeric, rel=1e-6)


def test_gram_pair(rng):
    pair = gram_pair(rng.uniform(size=10), KernelSpec())
    assert_allclose(pair.centered, gram_center(pair.raw))

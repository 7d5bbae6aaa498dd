import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from qkica.errors import InvalidConfigError
from qkica.sources import (
    Distribution,
    GeneratorSet,
    SampleMatrix,
    SourceSpec,
    elementary_generators,
    landscape_generators,
    load_csv,
    mix,
    mixing_from_generators,
    random_rotation,
    rotation_from_generators,
    sample_sources,
    stream,
)
from qkica.utils import write_matrix_csv


def test_stream_is_keyed():
    a = stream(5, 1, 2).standard_normal(4)
    b = stream(5, 1, 2).standard_normal(4)
    assert_array_equal(a, b)
    assert not np.array_equal(stream(5, 0).standard_normal(4), stream(5, 0, 0).standard_normal(4))
    assert not np.array_equal(stream(5, 1, 2).standard_normal(4), stream(5, 2, 1).standard_normal(4))


@pytest.mark.parametrize("name", ["uniform", "laplace", "exponential", "gaussian"])
def test_distributions_are_standardized(name):
    x = Distribution(name).sample(200_000, stream(0, 99))
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.03


def test_mixture_is_standardized():
    dist = Distribution("gaussian-mixture", means=(-1.0, 2.0), weights=(2.0, 1.0), stds=(0.5, 1.0))
    x = dist.sample(200_000, stream(0, 3))
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.03


def test_excess_kurtosis_of_uniform():
    x = Distribution("uniform").sample(200_000, stream(1, 1))
    sample = np.mean(x**4) / np.mean(x**2) ** 2 - 3.0
    assert abs(sample - Distribution("uniform").excess_kurtosis) < 0.02


def test_mixture_kurtosis_of_single_component_is_zero():
    dist = Distribution("gaussian-mixture", means=(3.0,), weights=(1.0,), stds=(2.0,))
    assert dist.excess_kurtosis == pytest.approx(0.0, abs=1e-12)


def test_unknown_distribution():
    with pytest.raises(InvalidConfigError, match="Unknown distribution"):
        Distribution("cauchy")
    with pytest.raises(ValueError):
        SourceSpec(("uniform", "student"), 10, 0)


def test_sample_sources_shape_and_rows_are_independent_of_other_rows():
    two = sample_sources(SourceSpec(("uniform", "laplace"), 50, 3))
    three = sample_sources(SourceSpec(("uniform", "laplace", "gaussian"), 50, 3))
    assert two.data.shape == (2, 50)
    assert two.row_labels == ("s1_uniform", "s2_laplace")
    assert_array_equal(two.data, three.data[:2])
    assert_array_equal(two.data, sample_sources(SourceSpec(("uniform", "laplace"), 50, 3)).data)


def test_sample_matrix_rejects_non_finite():
    with pytest.raises(InvalidConfigError, match="non-finite"):
        SampleMatrix(np.array([[1.0, np.nan, 2.0]]))


def test_sample_matrix_is_read_only(sources):
    with pytest.raises(ValueError):
        sources.data[0, 0] = 1.0


def test_mix_checks_shape(sources):
    with pytest.raises(InvalidConfigError, match="3 sources|2 sources"):
        mix(sources, np.eye(3))
    assert_allclose(mix(sources, 2.0 * np.eye(2)).data, 2.0 * sources.data)


def test_elementary_generators():
    gens = elementary_generators(3)
    assert len(gens) == 3
    for P in gens:
        assert_array_equal(P, -P.T)
    assert gens[0][0, 1] == 1.0 and gens[2][1, 2] == 1.0


def test_landscape_generators():
    two = landscape_generators(2)
    assert_array_equal(two[1], two[1].T)
    three = landscape_generators(3)
    assert all(np.array_equal(P, -P.T) for P in three)
    with pytest.raises(InvalidConfigError):
        landscape_generators(1)


def test_rotation_from_generators_is_special_orthogonal():
    g = GeneratorSet(tuple(elementary_generators(3)), (0.3, -1.1, 0.7))
    R = rotation_from_generators(g)
    assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_rotation_rejects_symmetric_generators():
    g = GeneratorSet(tuple(landscape_generators(2)), (0.1, 0.2))
    with pytest.raises(InvalidConfigError, match="skew"):
        rotation_from_generators(g)
    A = mixing_from_generators(g)
    assert A.shape == (2, 2)
    assert not np.allclose(A.T @ A, np.eye(2))


def test_generator_set_checks_angles():
    with pytest.raises(InvalidConfigError, match="angles"):
        GeneratorSet(tuple(elementary_generators(3)), (0.1,))


@pytest.mark.parametrize("m", [2, 3, 5])
def test_random_rotation(m):
    Q = random_rotation(m, 11)
    assert_allclose(Q.T @ Q, np.eye(m), atol=1e-12)
    assert np.linalg.det(Q) == pytest.approx(1.0)
    assert_array_equal(Q, random_rotation(m, 11))


def test_load_csv_orientations(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("1,2,3\n4,5,6\n")
    assert load_csv(path).data.shape == (2, 3)
    assert_array_equal(load_csv(path, "cols").data, [[1, 4], [2, 5], [3, 6]])


def test_load_csv_header(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("a,b\n1,2\n3,4\n5,6\n")
    X = load_csv(path, "cols")
    assert X.row_labels == ("a", "b")
    assert_array_equal(X.row(1), [2, 4, 6])


def test_load_csv_reads_written_matrix(tmp_path, sources):
    path = write_matrix_csv(tmp_path / "s.csv", sources)
    X = load_csv(path)
    assert X.row_labels == sources.row_labels
    assert_array_equal(X.data, sources.data)


def test_load_csv_errors(tmp_path):
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("1,2,3\n4,5\n")
    with pytest.raises(InvalidConfigError, match="Ragged"):
        load_csv(ragged)
    text = tmp_path / "text.csv"
    text.write_text("1,2,3\n4,x,6\n")
    with pytest.raises(InvalidConfigError, match="Non-numeric"):
        load_csv(text)
    with pytest.raises(InvalidConfigError, match="Orientation"):
        load_csv(text, "diagonal")

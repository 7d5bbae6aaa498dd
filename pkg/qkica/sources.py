"""
Synthetic independent components, linear mixing, generator-parametrized
rotations and CSV ingestion.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import expm

from qkica.errors import InvalidConfigError

logger = logging.getLogger(__name__)

# Samples per counter-based stream; a row longer than this draws from
# several independent (seed, row, chunk) streams.
CHUNK = 1 << 16

DISTRIBUTIONS = ("uniform", "laplace", "exponential", "gaussian", "gaussian-mixture")


def stream(seed, *keys):
    """
    Counter-based generator keyed by the seed and any integer keys, so a draw
    does not depend on which thread or in which order it was requested.
    The key count is part of the entropy, since SeedSequence pads short
    entropy with zeros.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, len(keys), *keys])))


@dataclass(frozen=True)
class Distribution:
    """
    A named 1-D distribution, standardized to zero mean and unit variance.
    Mixture parameters are only used by 'gaussian-mixture'.
    """

    name: str
    means: Tuple[float, ...] = ()
    weights: Tuple[float, ...] = ()
    stds: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.name not in DISTRIBUTIONS:
            raise InvalidConfigError(
                f" Unknown distribution '{self.name}'. Choose one of: {', '.join(DISTRIBUTIONS)}"
            )
        if self.name == "gaussian-mixture":
            if not (len(self.means) == len(self.weights) == len(self.stds) >= 1):
                raise InvalidConfigError(
                    " A gaussian-mixture needs equally long 'means', 'weights' and 'stds'."
                )
            if any(w <= 0 for w in self.weights):
                raise InvalidConfigError(" Mixture weights must all be positive.")
            if any(s <= 0 for s in self.stds):
                raise InvalidConfigError(" Mixture component stds must all be positive.")
            if self._raw_variance() <= 0:
                raise InvalidConfigError(" Degenerate mixture with zero variance.")

    def _normalized_weights(self):
        w = np.asarray(self.weights, dtype=float)
        return w / w.sum()

    def _raw_mean(self):
        return float(np.dot(self._normalized_weights(), self.means))

    def _raw_variance(self):
        w = np.asarray(self.weights, dtype=float)
        w = w / w.sum()
        mu = np.asarray(self.means, dtype=float)
        sd = np.asarray(self.stds, dtype=float)
        mean = float(np.dot(w, mu))
        return float(np.dot(w, sd**2 + mu**2) - mean**2)

    @property
    def excess_kurtosis(self):
        """Analytic excess kurtosis of the standardized distribution."""
        if self.name == "uniform":
            return -1.2
        if self.name == "laplace":
            return 3.0
        if self.name == "exponential":
            return 6.0
        if self.name == "gaussian":
            return 0.0
        w = self._normalized_weights()
        mu = np.asarray(self.means, dtype=float) - self._raw_mean()
        sd = np.asarray(self.stds, dtype=float)
        fourth = np.dot(w, mu**4 + 6 * mu**2 * sd**2 + 3 * sd**4)
        return float(fourth / self._raw_variance() ** 2 - 3.0)

    def sample(self, n, rng):
        if self.name == "uniform":
            return rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), size=n)
        if self.name == "laplace":
            return rng.laplace(0.0, 1.0 / math.sqrt(2.0), size=n)
        if self.name == "exponential":
            return rng.exponential(1.0, size=n) - 1.0
        if self.name == "gaussian":
            return rng.standard_normal(n)
        w = self._normalized_weights()
        component = rng.choice(len(w), size=n, p=w)
        draws = rng.standard_normal(n) * np.asarray(self.stds)[component]
        draws += np.asarray(self.means)[component]
        return (draws - self._raw_mean()) / math.sqrt(self._raw_variance())

    def to_dict(self):
        out = {"name": self.name}
        if self.name == "gaussian-mixture":
            out.update(means=list(self.means), weights=list(self.weights), stds=list(self.stds))
        return out

    @classmethod
    def from_value(cls, value):
        if isinstance(value, Distribution):
            return value
        if isinstance(value, str):
            return cls(value)
        try:
            return cls(
                value["name"],
                tuple(value.get("means", ())),
                tuple(value.get("weights", ())),
                tuple(value.get("stds", ())),
            )
        except (KeyError, TypeError, AttributeError) as e:
            raise InvalidConfigError(f" Cannot read distribution from '{value}': {e}")


@dataclass(frozen=True)
class SourceSpec:
    distributions: Tuple[Distribution, ...]
    n_samples: int
    seed: int

    def __post_init__(self):
        object.__setattr__(
            self, "distributions", tuple(Distribution.from_value(d) for d in self.distributions)
        )
        if not self.distributions:
            raise InvalidConfigError(" At least one source distribution is required.")
        if int(self.n_samples) < 2:
            raise InvalidConfigError(f" n_samples must be at least 2, got {self.n_samples}.")


@dataclass(frozen=True)
class SampleMatrix:
    """
    m x N samples, one row per variable.
    """

    data: np.ndarray
    row_labels: Optional[Tuple[str, ...]] = None
    sample_labels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=float, ndmin=2)
        if data.ndim != 2:
            raise InvalidConfigError(f" Samples must be a 2-D matrix, got shape {data.shape}.")
        if data.shape[0] < 1 or data.shape[1] < 2:
            raise InvalidConfigError(
                f" Need at least 1 variable and 2 samples, got shape {data.shape}."
            )
        if not np.all(np.isfinite(data)):
            raise InvalidConfigError(" Samples contain non-finite entries.")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.row_labels is not None:
            labels = tuple(str(label) for label in self.row_labels)
            if len(labels) != data.shape[0]:
                raise InvalidConfigError(
                    f" Got {len(labels)} labels for {data.shape[0]} variables."
                )
            object.__setattr__(self, "row_labels", labels)
        if self.sample_labels is not None:
            labels = tuple(str(label) for label in self.sample_labels)
            if len(labels) != data.shape[1]:
                raise InvalidConfigError(
                    f" Got {len(labels)} sample labels for {data.shape[1]} samples."
                )
            object.__setattr__(self, "sample_labels", labels)

    @property
    def m(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]

    def row(self, i):
        return self.data[i]


@dataclass(frozen=True)
class GeneratorSet:
    """
    Generators P_a with angles delta_a. Rotations need skew-symmetric
    generators; landscapes over non-orthogonal mixings may also use
    symmetric ones.
    """

    generators: Tuple[np.ndarray, ...]
    deltas: Tuple[float, ...] = field(default=())

    def __post_init__(self):
        gens = tuple(np.asarray(p, dtype=float) for p in self.generators)
        if not gens:
            raise InvalidConfigError(" At least one generator is required.")
        m = gens[0].shape[0]
        for p in gens:
            if p.shape != (m, m):
                raise InvalidConfigError(f" Generators must all be {m}x{m}, got {p.shape}.")
        deltas = tuple(float(d) for d in self.deltas) if self.deltas else (0.0,) * len(gens)
        if len(deltas) != len(gens):
            raise InvalidConfigError(
                f" Got {len(deltas)} angles for {len(gens)} generators."
            )
        object.__setattr__(self, "generators", gens)
        object.__setattr__(self, "deltas", deltas)

    @property
    def m(self):
        return self.generators[0].shape[0]

    def is_skew(self, tol=1e-12):
        return all(np.max(np.abs(p + p.T), initial=0.0) <= tol for p in self.generators)

    def with_deltas(self, deltas):
        return GeneratorSet(self.generators, tuple(deltas))

    def combination(self):
        return sum(d * p for d, p in zip(self.deltas, self.generators))


def elementary_generators(m):
    """E_ab - E_ba for a < b, in lexicographic order."""
    gens = []
    for a in range(m):
        for b in range(a + 1, m):
            p = np.zeros((m, m))
            p[a, b], p[b, a] = 1.0, -1.0
            gens.append(p)
    return gens


def landscape_generators(m):
    """
    Two generators for a 2-parameter landscape. For m = 2 the second one is
    the symmetric shear E_12 + E_21, since SO(2) is one-dimensional.
    """
    if m < 2:
        raise InvalidConfigError(" A landscape needs at least 2 variables.")
    gens = elementary_generators(m)
    if len(gens) >= 2:
        return gens[:2]
    shear = np.array([[0.0, 1.0], [1.0, 0.0]])
    return [gens[0], shear]


def sample_sources(spec: SourceSpec) -> SampleMatrix:
    n = int(spec.n_samples)
    rows = []
    for i, dist in enumerate(spec.distributions):
        chunks = []
        for c, start in enumerate(range(0, n, CHUNK)):
            size = min(CHUNK, n - start)
            chunks.append(dist.sample(size, stream(spec.seed, i, c)))
        rows.append(np.concatenate(chunks))
    labels = tuple(f"s{i + 1}_{d.name}" for i, d in enumerate(spec.distributions))
    logger.debug(f" Sampled {len(rows)} sources with {n} samples each (seed {spec.seed})")
    return SampleMatrix(np.vstack(rows), labels)


def mix(S: SampleMatrix, A) -> SampleMatrix:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidConfigError(f" Mixing matrix must be square, got shape {A.shape}.")
    if A.shape[1] != S.m:
        raise InvalidConfigError(
            f" Mixing matrix is {A.shape[0]}x{A.shape[1]} but there are {S.m} sources."
        )
    if np.linalg.cond(A) > 1e12:
        logger.warning(" Mixing matrix is singular or nearly so; sources are not recoverable.")
    return SampleMatrix(A @ S.data)


def rotation_from_generators(g: GeneratorSet) -> np.ndarray:
    if not g.is_skew():
        raise InvalidConfigError(" Rotation generators must be skew-symmetric (P + P^T = 0).")
    return expm(g.combination())


def mixing_from_generators(g: GeneratorSet) -> np.ndarray:
    """exp(sum delta_a P_a) for any generators; orthogonal only when all are skew."""
    return expm(g.combination())


def random_rotation(m, seed):
    """Haar-distributed rotation (determinant +1)."""
    rng = stream(seed, m)
    q, r = np.linalg.qr(rng.standard_normal((m, m)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _is_number(cell):
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, orientation="rows") -> SampleMatrix:
    """
    Read a numeric CSV. With orientation 'rows' every row is a variable,
    with 'cols' every column is. A first row with non-numeric cells is
    taken as a header. With 'rows', a leading column of non-numeric cells
    becomes the variable labels, which is the layout write_matrix_csv uses.
    """
    if orientation not in ("rows", "cols"):
        raise InvalidConfigError(f" Orientation must be 'rows' or 'cols', got '{orientation}'.")
    try:
        with open(Path(path), "r", newline="") as f:
            rows = [r for r in csv.reader(f) if r]
    except OSError as e:
        raise InvalidConfigError(f" Cannot read CSV file '{path}': {e.strerror}.")
    if not rows:
        raise InvalidConfigError(f" CSV file '{path}' is empty.")

    labelled = orientation == "rows" and not _is_number(rows[-1][0])
    first = rows[0][1:] if labelled else rows[0]
    header = None
    if not all(_is_number(cell) for cell in first):
        header, rows = [cell.strip() for cell in first], rows[1:]
    labels = None
    if labelled:
        labels, rows = [r[0].strip() for r in rows], [r[1:] for r in rows]

    width = len(rows[0]) if rows else 0
    values = []
    for line_no, r in enumerate(rows, start=2 if header else 1):
        if len(r) != width:
            raise InvalidConfigError(
                f" Ragged CSV '{path}': line {line_no} has {len(r)} cells, expected {width}."
            )
        try:
            values.append([float(cell) for cell in r])
        except ValueError:
            raise InvalidConfigError(f" Non-numeric cell in CSV '{path}' at line {line_no}.")
    if header is not None and len(header) != width:
        raise InvalidConfigError(f" CSV '{path}' header has {len(header)} cells, expected {width}.")

    data = np.asarray(values, dtype=float)
    if orientation == "cols":
        return SampleMatrix(data.T, row_labels=header)
    return SampleMatrix(data, row_labels=labels, sample_labels=header)

"""
Integral-operator view of the centered Gram matrices: Nystrom eigenfunction
extension, the overlap functional over joint samples, and Monte Carlo
estimates of the first-order overlap coefficients C and their spread D
for near-independent mixtures z = (I + eps2 F) s.

All integrals against the law of z_i use the empirical measure of the
base samples.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from qkica.errors import InvalidConfigError, UnstableExtensionError
from qkica.gram import KernelSpec, gram_pair
from qkica.sources import Distribution, stream
from qkica.spectral import decompose

logger = logging.getLogger(__name__)

MU_MIN = 1e-10
MIN_MC = 100
EPS2_MAX = 0.1
# Extensions are evaluated in blocks of this many points.
BLOCK = 2048

# Stream tags, kept clear of the (source, chunk) keys of sample_sources.
_MC_STREAM = 101
_REFERENCE_STREAM = 102
_TRIAL_STREAM = 103
_LINEARITY_STREAM = 104


@dataclass(frozen=True)
class Eigenfunction:
    """
    Eigenfunction k of the centered kernel operator of variable i, known on
    the base samples as values = sqrt(N) u_ik, so that the mean of
    values**2 over the samples is 1.
    """

    index: Tuple[int, int]
    values: np.ndarray
    mu: float
    base: np.ndarray
    kernel: KernelSpec
    row_means: np.ndarray
    grand_mean: float

    @property
    def n_samples(self):
        return self.base.size

    def residual(self):
        """max_m |(K'/N values)_m - mu values_m| relative to max |values|."""
        pair = gram_pair(self.base, self.kernel)
        lhs = pair.centered @ self.values / self.n_samples
        return float(np.max(np.abs(lhs - self.mu * self.values)) / np.max(np.abs(self.values)))

    def __call__(self, x):
        return extend_eigenfunction(self, x)


def top_eigenfunctions(z, i=0, count=3, kernel: Optional[KernelSpec] = None) -> List[Eigenfunction]:
    kernel = kernel or KernelSpec()
    z = np.asarray(z, dtype=float).reshape(-1)
    pair = gram_pair(z, kernel)
    spectrum = decompose(pair.centered, z.size, 0.0)
    row_means = pair.raw.mean(axis=0)
    grand = float(pair.raw.mean())
    scale = math.sqrt(z.size)
    return [
        Eigenfunction((i, k), spectrum.vectors[:, k] * scale, float(spectrum.mu[k]), z, kernel, row_means, grand)
        for k in range(min(count, z.size))
    ]


def centered_kernel_eval(samples, kernel: KernelSpec, x, y):
    """
    K'(x, y) = K(x, y) - mean_n K(z_n, y) - mean_n K(x, z_n) + mean_nn' K(z_n, z_n').
    x and y broadcast against each other.
    """
    z = np.asarray(samples, dtype=float).reshape(-1)
    if z.size == 0:
        raise InvalidConfigError(" Centered kernel needs at least one base sample.")
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    grand = float(kernel.from_sq_dist((z[:, None] - z[None, :]) ** 2).mean())
    mean_y = kernel.from_sq_dist((y[..., None] - z) ** 2).mean(axis=-1)
    mean_x = kernel.from_sq_dist((x[..., None] - z) ** 2).mean(axis=-1)
    return kernel.from_sq_dist((x - y) ** 2) - mean_y - mean_x + grand


def _check_mu(ef: Eigenfunction):
    if not ef.mu > MU_MIN:
        raise UnstableExtensionError(
            f" Eigenvalue mu_{ef.index} = {ef.mu:.3e} is too small for a stable Nystrom extension."
        )


def _blocks(x):
    for start in range(0, x.size, BLOCK):
        yield x[start:start + BLOCK]


def extend_eigenfunction(ef: Eigenfunction, x):
    """phi(x) = (1 / (N mu)) sum_n K'(z_n, x) Phi_n."""
    _check_mu(ef)
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1)
    total = float(np.sum(ef.values))
    offset = ef.grand_mean * total - float(ef.row_means @ ef.values)
    out = []
    for part in _blocks(flat):
        Kx = ef.kernel.from_sq_dist((part[:, None] - ef.base[None, :]) ** 2)
        out.append(Kx @ ef.values - Kx.mean(axis=1) * total + offset)
    values = np.concatenate(out) / (ef.n_samples * ef.mu) if out else np.empty(0)
    return values.reshape(x.shape) if x.ndim else float(values[0])


def extend_derivative(ef: Eigenfunction, x):
    """Analytic d phi / dx of the Nystrom extension."""
    _check_mu(ef)
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1)
    total = float(np.sum(ef.values))
    out = []
    for part in _blocks(flat):
        dK = ef.kernel.derivative_factor(part[:, None], ef.base[None, :])
        out.append(dK @ ef.values - dK.mean(axis=1) * total)
    values = np.concatenate(out) / (ef.n_samples * ef.mu) if out else np.empty(0)
    return values.reshape(x.shape) if x.ndim else float(values[0])


def overlap_via_M(ef_i: Eigenfunction, ef_j: Eigenfunction, z_i, z_j) -> float:
    """Sample mean of phi_ik(z_im) phi_jl(z_jm) over paired samples."""
    z_i = np.asarray(z_i, dtype=float).reshape(-1)
    z_j = np.asarray(z_j, dtype=float).reshape(-1)
    if z_i.size != z_j.size:
        raise InvalidConfigError(f" Paired samples have different lengths: {z_i.size} and {z_j.size}.")
    return float(np.mean(extend_eigenfunction(ef_i, z_i) * extend_eigenfunction(ef_j, z_j)))


@dataclass(frozen=True)
class OverlapEstimate:
    C: float
    D: float
    n_mc: int
    index: Tuple[int, int, int, int]
    F_ij: Optional[float] = None

    @property
    def stderr(self):
        return self.D / math.sqrt(self.n_mc)


def _sampler(source):
    if isinstance(source, Distribution):
        return source.sample
    if isinstance(source, str):
        return Distribution(source).sample
    if callable(source):
        return source
    raise InvalidConfigError(f" Cannot sample from {source!r}.")


def estimate_C_D(ef_i: Eigenfunction, ef_j: Eigenfunction, source_i, source_j, n_mc, seed, F_ij=None) -> OverlapEstimate:
    """
    C = -E[x phi_ik(x) phi_jl'(y) - y phi_ik'(x) phi_jl(y)] over independent
    x ~ s_i, y ~ s_j, and D^2 = E[(.)^2] - C^2.
    """
    if n_mc < MIN_MC:
        raise InvalidConfigError(f" Monte Carlo estimates need n_mc >= {MIN_MC}, got {n_mc}.")
    x = _sampler(source_i)(n_mc, stream(seed, _MC_STREAM, 0))
    y = _sampler(source_j)(n_mc, stream(seed, _MC_STREAM, 1))
    g = x * extend_eigenfunction(ef_i, x) * extend_derivative(ef_j, y) - y * extend_derivative(ef_i, x) * extend_eigenfunction(ef_j, y)
    C = -float(np.mean(g))
    D = math.sqrt(max(float(np.mean(g**2)) - C**2, 0.0))
    index = (ef_i.index[0], ef_i.index[1], ef_j.index[0], ef_j.index[1])
    return OverlapEstimate(C, D, int(n_mc), index, F_ij)


def c_d_table(
    efs_i: Sequence[Eigenfunction],
    efs_j: Sequence[Eigenfunction],
    source_i,
    source_j,
    n_mc,
    seed,
) -> List[OverlapEstimate]:
    """C and D for every (k, l), all pairs sharing the same Monte Carlo draws."""
    return [estimate_C_D(a, b, source_i, source_j, n_mc, seed) for a in efs_i for b in efs_j]


def near_independent_mix(s_i, s_j, F_ij, eps2):
    """z = (I + eps2 F) s for antisymmetric F on the pair (i, j)."""
    return s_i + eps2 * F_ij * s_j, s_j - eps2 * F_ij * s_i


@dataclass(frozen=True)
class CoverageResult:
    coverage: float
    n_trials: int
    delta: float
    eps2: float
    F_ij: float
    N: int
    pair: Tuple[int, int]
    C: float
    D: float
    spread: float
    skipped: bool = False
    deviations: Tuple[float, ...] = ()

    @property
    def target(self):
        return 1.0 - 1.0 / self.delta**2


def _oriented_overlap(a, b, ref_a, ref_b, kernel, N):
    u = decompose(gram_pair(a, kernel).centered, N, 0.0).vectors[:, ref_a.index[1]]
    v = decompose(gram_pair(b, kernel).centered, N, 0.0).vectors[:, ref_b.index[1]]
    # Orient each eigenvector like the reference eigenfunction on the same points.
    if float(u @ extend_eigenfunction(ref_a, a)) < 0:
        u = -u
    if float(v @ extend_eigenfunction(ref_b, b)) < 0:
        v = -v
    return float(u @ v)


def _trial_overlap(t, ref_i, ref_j, source_i, source_j, F_ij, eps2, N, seed, kernel):
    """
    Overlap of the mixed pair minus the overlap of the unmixed sources drawn
    for the same trial. The difference keeps the eps2 term and cancels the
    O(1/sqrt(N)) overlap that independent finite samples already have.
    """
    s_i = _sampler(source_i)(N, stream(seed, _TRIAL_STREAM, t, 0))
    s_j = _sampler(source_j)(N, stream(seed, _TRIAL_STREAM, t, 1))
    z_i, z_j = near_independent_mix(s_i, s_j, F_ij, eps2)
    mixed = _oriented_overlap(z_i, z_j, ref_i, ref_j, kernel, N)
    return mixed - _oriented_overlap(s_i, s_j, ref_i, ref_j, kernel, N)


def coverage_trial(
    F_ij,
    eps2,
    source_i,
    source_j,
    N,
    n_trials,
    delta,
    seed,
    kernel: Optional[KernelSpec] = None,
    n_mc=10_000,
    top=3,
    workers=1,
) -> CoverageResult:
    """
    Fraction of datasets z = (I + eps2 F) s where |d - eps2 F_ij C| <
    delta eps2 |F_ij| D / sqrt(N), d = <u_ik, u_jl>(z) - <u_ik, u_jl>(s) on the
    trial's own draws, for the top-eigenfunction pair with the largest |C|.
    """
    kernel = kernel or KernelSpec()
    if N < 100:
        raise InvalidConfigError(f" Coverage trials need N >= 100, got {N}.")
    if not 0 <= eps2 <= EPS2_MAX:
        raise InvalidConfigError(f" eps2 must lie in [0, {EPS2_MAX}], got {eps2}.")
    if n_trials < 1 or not delta > 0:
        raise InvalidConfigError(" n_trials must be positive and delta must be positive.")
    if eps2 == 0 or F_ij == 0:
        logger.warning(" eps2 * F_ij = 0: the coverage bound degenerates; trial skipped.")
        return CoverageResult(float("nan"), 0, delta, eps2, F_ij, N, (0, 0), 0.0, 0.0, float("nan"), skipped=True)

    ref_i = _sampler(source_i)(N, stream(seed, _REFERENCE_STREAM, 0))
    ref_j = _sampler(source_j)(N, stream(seed, _REFERENCE_STREAM, 1))
    refs_i = top_eigenfunctions(ref_i, 0, top, kernel)
    refs_j = top_eigenfunctions(ref_j, 1, top, kernel)
    table = c_d_table(refs_i, refs_j, source_i, source_j, n_mc, seed)
    best = max(table, key=lambda e: abs(e.C))
    k, l = best.index[1], best.index[3]
    logger.info(f" Coverage pair (k={k}, l={l}): C={best.C:.4g}, D={best.D:.4g}")

    def run(t):
        return _trial_overlap(t, refs_i[k], refs_j[l], source_i, source_j, F_ij, eps2, N, seed, kernel)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            overlaps = list(pool.map(run, range(n_trials)))
    else:
        overlaps = [run(t) for t in range(n_trials)]

    deviations = np.asarray(overlaps) - eps2 * F_ij * best.C
    radius = delta * eps2 * abs(F_ij) * best.D / math.sqrt(N)
    coverage = float(np.mean(np.abs(deviations) < radius))
    return CoverageResult(
        coverage=coverage,
        n_trials=n_trials,
        delta=delta,
        eps2=eps2,
        F_ij=F_ij,
        N=N,
        pair=(k, l),
        C=best.C,
        D=best.D,
        spread=float(np.std(deviations)),
        deviations=tuple(float(d) for d in deviations),
    )


@dataclass(frozen=True)
class LinearityFit:
    slope: float
    intercept: float
    r_squared: float
    eps2: Tuple[float, ...]
    overlaps: Tuple[float, ...]


def overlap_linearity(
    eps2_values: Sequence[float],
    source_i,
    source_j,
    N,
    seed,
    k=0,
    l=0,
    F_ij=1.0,
    kernel: Optional[KernelSpec] = None,
) -> LinearityFit:
    """
    Regresses <u_ik, u_jl> on eps2 with the sources held fixed. Eigenvector
    signs follow the eps2 = 0 decomposition of each variable.
    """
    kernel = kernel or KernelSpec()
    if len(eps2_values) < 2:
        raise InvalidConfigError(" A linear fit needs at least two eps2 values.")
    s_i = _sampler(source_i)(N, stream(seed, _LINEARITY_STREAM, 0))
    s_j = _sampler(source_j)(N, stream(seed, _LINEARITY_STREAM, 1))
    ref_u = decompose(gram_pair(s_i, kernel).centered, N, 0.0).vectors[:, k]
    ref_v = decompose(gram_pair(s_j, kernel).centered, N, 0.0).vectors[:, l]
    values = []
    for eps2 in eps2_values:
        z_i, z_j = near_independent_mix(s_i, s_j, F_ij, eps2)
        u = decompose(gram_pair(z_i, kernel).centered, N, 0.0).vectors[:, k]
        v = decompose(gram_pair(z_j, kernel).centered, N, 0.0).vectors[:, l]
        u = u if u @ ref_u >= 0 else -u
        v = v if v @ ref_v >= 0 else -v
        values.append(float(u @ v))
    fit = stats.linregress(np.asarray(eps2_values, dtype=float), np.asarray(values))
    logger.info(f" Overlap slope in eps2: {fit.slope:.4g} (R^2 = {fit.rvalue**2:.3f})")
    return LinearityFit(float(fit.slope), float(fit.intercept), float(fit.rvalue**2), tuple(eps2_values), tuple(values))

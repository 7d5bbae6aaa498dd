"""
Eigendecomposition of centered Gram matrices, low-rank truncation,
eigenvector overlaps and the norms of the states the quantum routine
prepares.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.sparse.linalg import eigsh

from qkica.errors import InvalidConfigError
from qkica.gram import KernelSpec, gram_pair
from qkica.sources import SampleMatrix

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
# Truncated decompositions of at least this size use Lanczos iterations,
# starting from LANCZOS_K pairs.
LANCZOS_MIN = 512
LANCZOS_K = 16


@dataclass(frozen=True)
class GramSpectrum:
    """
    Normalized eigenvalues mu = lambda / N in descending order and the
    matching unit eigenvectors as columns. The first `kept` pairs survive
    truncation at eps_trunc. When `complete` is False only the kept pairs
    were computed.
    """

    mu: np.ndarray
    vectors: np.ndarray
    kept: int
    eps_trunc: float
    complete: bool = True

    @property
    def n_samples(self):
        return self.vectors.shape[0]

    @property
    def kept_mu(self):
        return self.mu[: self.kept]

    @property
    def kept_vectors(self):
        return self.vectors[:, : self.kept]

    @property
    def discarded_max(self):
        rest = self.mu[self.kept:]
        return float(rest.max()) if rest.size else 0.0


def _fix_signs(vectors):
    # Largest-magnitude component positive; argmax returns the lowest index on ties.
    if vectors.size == 0:
        return vectors
    rows = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[rows, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _top_pairs_lanczos(A, threshold):
    """Eigenpairs of A with value >= threshold, by ARPACK with a growing k."""
    N = A.shape[0]
    v0 = np.random.default_rng(N).standard_normal(N)
    k = min(LANCZOS_K, N - 2)
    while True:
        values, vectors = eigsh(A, k=k, which="LA", v0=v0, tol=0.0)
        order = np.argsort(values)[::-1]
        values, vectors = values[order], vectors[:, order]
        if values[-1] < threshold or k == N - 2:
            break
        k = min(2 * k, N - 2)
    keep = values >= threshold
    return values[keep], vectors[:, keep]


def decompose(K, N, eps_trunc, full=True) -> GramSpectrum:
    """
    Eigendecomposition of K / N keeping every pair with mu >= eps_trunc / 2.
    eps_trunc = 0 keeps the whole spectrum. With full=False only the kept
    pairs are computed: dense MRRR restricted to a value interval, or Lanczos
    iterations from LANCZOS_MIN samples on.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise InvalidConfigError(f" Gram matrix must be square, got shape {K.shape}.")
    scale = max(1.0, float(np.max(np.abs(K), initial=0.0)))
    if np.max(np.abs(K - K.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise InvalidConfigError(" Gram matrix is not symmetric.")
    if eps_trunc < 0:
        raise InvalidConfigError(f" eps_trunc must be non-negative, got {eps_trunc}.")

    A = K / N
    threshold = eps_trunc / 2.0
    if full or eps_trunc == 0:
        values, vectors = eigh(A)
        values, vectors = values[::-1], vectors[:, ::-1]
        kept = len(values) if eps_trunc == 0 else int(np.count_nonzero(values >= threshold))
    elif A.shape[0] >= LANCZOS_MIN:
        values, vectors = _top_pairs_lanczos(A, threshold)
        kept = len(values)
    else:
        lower = np.nextafter(threshold, -np.inf)
        values, vectors = eigh(A, subset_by_value=(lower, np.inf), driver="evr")
        values, vectors = values[::-1], vectors[:, ::-1]
        kept = len(values)
    complete = full or eps_trunc == 0
    vectors = _fix_signs(np.ascontiguousarray(vectors))
    return GramSpectrum(values, vectors, kept, float(eps_trunc), complete)


def decompose_all(Z: SampleMatrix, kernel: KernelSpec, eps_trunc, full=True, workers=1):
    """
    One spectrum per variable of Z. Variables are independent, so they are
    decomposed in parallel when workers > 1.
    """

    def one(i):
        pair = gram_pair(Z.row(i), kernel)
        return decompose(pair.centered, Z.n_samples, eps_trunc, full=full)

    if workers > 1 and Z.m > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            spectra = list(pool.map(one, range(Z.m)))
    else:
        spectra = [one(i) for i in range(Z.m)]
    logger.debug(f" Kept eigenpairs per variable: {[s.kept for s in spectra]}")
    return spectra


def overlaps(si: GramSpectrum, sj: GramSpectrum) -> np.ndarray:
    """<u_ik, u_jl> for the kept pairs of both spectra."""
    if si.n_samples != sj.n_samples:
        raise InvalidConfigError(
            f" Eigenvectors have different lengths: {si.n_samples} and {sj.n_samples}."
        )
    return si.kept_vectors.T @ sj.kept_vectors


def state_norm_K(K, N) -> float:
    """Norm of the unnormalized state (1/N) sum_jk K_jk |j>|k>."""
    return float(np.linalg.norm(np.asarray(K, dtype=float), "fro") / N)


def state_norm_psi(si: GramSpectrum, sj: GramSpectrum) -> float:
    """
    Norm of the state with amplitudes mu_ik <u_jl, u_ik> over kept pairs.
    """
    if si.eps_trunc != sj.eps_trunc:
        raise InvalidConfigError(
            f" Spectra truncated at different thresholds: {si.eps_trunc} and {sj.eps_trunc}."
        )
    O = overlaps(si, sj)
    weighted = si.kept_mu[:, None] * O
    return float(np.sqrt(np.sum(weighted**2)))

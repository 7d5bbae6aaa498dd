"""
R_kappa construction, determinant contrasts, the kurtosis baseline and the
determinant perturbation bound.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, eigh

from qkica.errors import InvalidConfigError, NonPositivePivotError, NumericalError
from qkica.gram import KernelSpec
from qkica.sources import SampleMatrix
from qkica.spectral import GramSpectrum, decompose_all, overlaps

logger = logging.getLogger(__name__)

DEFAULT_KAPPA = 0.1


@dataclass(frozen=True)
class RkappaMatrix:
    """
    d x d matrix with unit diagonal. index[r] = (variable i, eigenpair k) of
    row r. signed=False holds the element-wise absolute values.
    """

    data: np.ndarray
    index: Tuple[Tuple[int, int], ...]
    kappa: float
    signed: bool

    @property
    def d(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class PerturbationCheck:
    lhs: float
    rhs: float
    premise_ok: bool

    @property
    def holds(self):
        return (not self.premise_ok) or self.lhs <= self.rhs


def shrink(mu, kappa, kappa_raw=False, n_samples=None):
    """
    mu / (mu + kappa/2) on normalized eigenvalues, or lambda / (lambda + kappa)
    on raw eigenvalues lambda = N mu when kappa_raw is set.
    """
    mu = np.asarray(mu, dtype=float)
    if kappa_raw:
        lam = mu * n_samples
        return lam / (lam + kappa)
    return mu / (mu + kappa / 2.0)


def block_index(spectra: Sequence[GramSpectrum]):
    index = []
    for i, s in enumerate(spectra):
        index.extend((i, k) for k in range(s.kept))
    return tuple(index)


def build_rkappa(
    spectra: Sequence[GramSpectrum],
    pair_overlaps: Optional[Dict[Tuple[int, int], np.ndarray]] = None,
    kappa=DEFAULT_KAPPA,
    signed=True,
    kappa_raw=False,
) -> RkappaMatrix:
    """
    Identity diagonal blocks; block (i, j), i != j, holds
    r_ik r_jl <u_ik, u_jl> with r the shrunk eigenvalues, taken in absolute
    value unless signed.
    """
    if not kappa > 0:
        raise InvalidConfigError(f" kappa must be positive, got {kappa}.")
    sizes = [s.kept for s in spectra]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    d = int(offsets[-1])
    R = np.eye(d)
    factors = [shrink(s.kept_mu, kappa, kappa_raw, s.n_samples) for s in spectra]
    for i in range(len(spectra)):
        for j in range(i + 1, len(spectra)):
            if sizes[i] == 0 or sizes[j] == 0:
                continue
            if pair_overlaps is not None and (i, j) in pair_overlaps:
                O = pair_overlaps[(i, j)]
            else:
                O = overlaps(spectra[i], spectra[j])
            block = factors[i][:, None] * O * factors[j][None, :]
            if not signed:
                block = np.abs(block)
            R[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]] = block
            R[offsets[j]:offsets[j + 1], offsets[i]:offsets[i + 1]] = block.T
    return RkappaMatrix(R, block_index(spectra), float(kappa), bool(signed))


def log_det(R: RkappaMatrix):
    """
    (sign, ln|det|). Signed matrices are factored by Cholesky, where a
    non-positive pivot means R lost positive definiteness numerically.
    """
    if R.d == 0:
        return 1.0, 0.0
    if R.signed:
        try:
            c, _ = cho_factor(R.data, lower=True, check_finite=True)
        except LinAlgError as e:
            raise NonPositivePivotError(f" Signed R_kappa is not positive definite: {e}")
        return 1.0, float(2.0 * np.sum(np.log(np.diag(c))))
    sign, logabs = np.linalg.slogdet(R.data)
    return float(sign), float(logabs)


def det_contrast(R: RkappaMatrix) -> float:
    sign, logabs = log_det(R)
    return sign * float(np.exp(logabs))


def neg_log_det(R: RkappaMatrix) -> float:
    """Classical KICA contrast -ln det R; +inf when det R <= 0."""
    sign, logabs = log_det(R)
    if sign <= 0:
        return float("inf")
    return -logabs


def min_eig(R) -> float:
    data = R.data if isinstance(R, RkappaMatrix) else np.asarray(R, dtype=float)
    if data.shape[0] == 0:
        return 1.0
    return float(eigh(data, eigvals_only=True, subset_by_index=[0, 0])[0])


def rkappa_from_samples(
    Z: SampleMatrix,
    kappa=DEFAULT_KAPPA,
    kernel: Optional[KernelSpec] = None,
    eps_trunc=0.0,
    signed=True,
    kappa_raw=False,
    workers=1,
) -> RkappaMatrix:
    kernel = kernel or KernelSpec()
    spectra = decompose_all(Z, kernel, eps_trunc, full=False, workers=workers)
    return build_rkappa(spectra, kappa=kappa, signed=signed, kappa_raw=kappa_raw)


def contrast_pipeline(
    Z: SampleMatrix,
    kappa=DEFAULT_KAPPA,
    kernel: Optional[KernelSpec] = None,
    eps_trunc=0.0,
    signed=True,
    kappa_raw=False,
    workers=1,
) -> float:
    """gram -> decompose -> overlaps -> R_kappa -> det."""
    R = rkappa_from_samples(Z, kappa, kernel, eps_trunc, signed, kappa_raw, workers)
    value = det_contrast(R)
    logger.debug(f" det R_kappa = {value:.6g} (d={R.d}, signed={signed})")
    return value


def kurtosis_contrast(y) -> float:
    """E{y^4} - 3 (E{y^2})^2 from sample moments."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size < 4:
        raise InvalidConfigError(f" Kurtosis needs at least 4 samples, got {y.size}.")
    second = np.mean(y**2)
    return float(np.mean(y**4) - 3.0 * second**2)


def det_perturbation_check(A, B) -> PerturbationCheck:
    """
    |det(A+B) - det A| / |det A| against t / (1 - t), t = d mu_A ||B|| / ||A||
    in the spectral norm.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape or A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidConfigError(f" A and B must be square of equal shape, got {A.shape} and {B.shape}.")
    d = A.shape[0]
    sign_a, log_a = np.linalg.slogdet(A)
    if sign_a == 0 or not np.isfinite(log_a):
        raise NumericalError(" A is singular; the relative determinant change is undefined.")
    sign_ab, log_ab = np.linalg.slogdet(A + B)
    ratio = sign_ab * sign_a * np.exp(log_ab - log_a) if sign_ab != 0 else 0.0
    lhs = float(abs(ratio - 1.0))

    norm_a = np.linalg.norm(A, 2)
    t = d * np.linalg.cond(A, 2) * np.linalg.norm(B, 2) / norm_a
    premise_ok = bool(t < 1.0)
    rhs = float(t / (1.0 - t)) if premise_ok else float("inf")
    return PerturbationCheck(lhs, rhs, premise_ok)


def composite_det_bound(d, eps, xi) -> float:
    """
    Relative determinant error allowed when every entry of a d x d matrix
    with minimal eigenvalue xi moves by at most eps; inf outside
    eps < xi / (2 d^2).
    """
    if xi <= 0 or eps >= xi / (2.0 * d * d):
        return float("inf")
    t = d * d * eps / xi
    return t / (1.0 - t)

"""
Centering, covariance, whitening and the whitening-error model used by the
emulated preprocessing subprogram.
"""
import json
import logging
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
from scipy.linalg import eigh, svd

from qkica.errors import InvalidConfigError, NotOrthogonalError, SingularCovarianceError
from qkica.sources import SampleMatrix, stream

logger = logging.getLogger(__name__)

# Eigenvalues of the covariance below this fraction of the largest are
# treated as zero.
EIG_FLOOR = 1e-12
# Whitening-error magnitudes must stay below this value.
EPS2_MAX = 0.2
ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class WhiteningModel:
    mean: np.ndarray
    M: np.ndarray
    inv_sqrt: np.ndarray
    mu_M: float
    eps2: float = 0.0
    eps2_applied: float = 0.0
    E: Optional[np.ndarray] = None
    perturbed_inv_sqrt: Optional[np.ndarray] = None
    seed: Optional[int] = None

    @property
    def m(self):
        return self.M.shape[0]

    @property
    def is_perturbed(self):
        return self.perturbed_inv_sqrt is not None

    @classmethod
    def identity(cls, Y: SampleMatrix):
        """Model of data that is already white: M = I, mean = sample mean."""
        m = Y.m
        return cls(Y.data.mean(axis=1), np.eye(m), np.eye(m), 1.0)

    def to_dict(self):
        out = {}
        for key, value in asdict(self).items():
            out[key] = value.tolist() if isinstance(value, np.ndarray) else value
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        arrays = ("mean", "M", "inv_sqrt", "E", "perturbed_inv_sqrt")
        values = {
            key: (np.asarray(value, dtype=float) if key in arrays and value is not None else value)
            for key, value in data.items()
        }
        return cls(**values)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def center(X: SampleMatrix) -> SampleMatrix:
    data = X.data - X.data.mean(axis=1, keepdims=True)
    return SampleMatrix(data, X.row_labels, X.sample_labels)


def covariance(Xc: SampleMatrix) -> np.ndarray:
    M = Xc.data @ Xc.data.T / Xc.n_samples
    return (M + M.T) / 2


def condition_number(M) -> float:
    M = np.asarray(M, dtype=float)
    values = eigh(M, eigvals_only=True)
    if values[0] <= 0:
        raise SingularCovarianceError(
            f" Matrix is not positive definite: smallest eigenvalue {values[0]:.3e}."
        )
    return float(values[-1] / values[0])


def _svd_whitening(Xc: SampleMatrix):
    """
    Whitening from the thin SVD Xc = U S V^T: the inverse square root is
    sqrt(N) U S^{-1} U^T and the whitened samples are sqrt(N) U V^T, whose
    covariance is the identity to rounding independently of cond(M).
    """
    m, N = Xc.data.shape
    U, s, Vt = svd(Xc.data, full_matrices=False)
    values = s**2 / N
    if s.size < m or values[0] <= 0 or values[-1] <= EIG_FLOOR * values[0]:
        smallest = values[-1] if s.size == m else 0.0
        largest = values[0] if s.size else 0.0
        raise SingularCovarianceError(
            f" Covariance is singular: eigenvalue {smallest:.3e} is below "
            f"{EIG_FLOOR:g} x largest eigenvalue {largest:.3e}."
        )
    inv_sqrt = (U * (np.sqrt(N) / s)) @ U.T
    return np.sqrt(N) * (U @ Vt), (inv_sqrt + inv_sqrt.T) / 2, float(values[0] / values[-1])


def whiten(X: SampleMatrix, quiet=False):
    """
    Returns (Y, model) with Y = E D^{-1/2} E^T (X - mean). `quiet` logs the
    input-range notice at debug level, for callers that whiten in a loop.
    """
    mean = X.data.mean(axis=1)
    Xc = center(X)
    M = covariance(Xc)
    data, inv_sqrt, mu_M = _svd_whitening(Xc)
    if np.max(np.abs(Xc.data)) > 1.0:
        logger.log(
            logging.DEBUG if quiet else logging.WARNING,
            " Centered samples exceed 1 in magnitude; the input range assumed by the"
            " quantum preprocessing error analysis does not hold (no rescaling applied).",
        )
    Y = SampleMatrix(data, X.row_labels, X.sample_labels)
    return Y, WhiteningModel(mean, M, inv_sqrt, mu_M)


def perturb_whitening(model: WhiteningModel, eps2, seed) -> WhiteningModel:
    """
    Adds eps2' * E to the inverse square root, E random symmetric with unit
    spectral norm and eps2' uniform in [0.9 eps2, eps2).
    """
    eps2 = float(eps2)
    if not 0.0 <= eps2 < EPS2_MAX:
        raise InvalidConfigError(f" eps2 must lie in [0, {EPS2_MAX}), got {eps2}.")
    m = model.m
    if eps2 == 0.0:
        return replace(
            model,
            eps2=0.0,
            eps2_applied=0.0,
            E=np.zeros((m, m)),
            perturbed_inv_sqrt=model.inv_sqrt.copy(),
            seed=seed,
        )
    rng = stream(seed, 2, m)
    G = rng.standard_normal((m, m))
    E = (G + G.T) / 2
    E /= np.linalg.norm(E, 2)
    applied = float(rng.uniform(0.9 * eps2, eps2))
    logger.debug(f" Whitening perturbed with eps2'={applied:.4g} (bound {eps2:g})")
    return replace(
        model,
        eps2=eps2,
        eps2_applied=applied,
        E=E,
        perturbed_inv_sqrt=model.inv_sqrt + applied * E,
        seed=seed,
    )


def apply_unmixing(X: SampleMatrix, model: WhiteningModel, W, use_perturbed=False) -> SampleMatrix:
    """
    y'_ij = sum_k (W B)_ik (x_kj - mean_k), B the exact or perturbed inverse
    square root.
    """
    W = np.asarray(W, dtype=float)
    if W.shape != (model.m, model.m):
        raise InvalidConfigError(f" W must be {model.m}x{model.m}, got {W.shape}.")
    drift = np.max(np.abs(W.T @ W - np.eye(model.m)))
    if drift > ORTHO_TOL:
        raise NotOrthogonalError(f" W is not orthogonal: max |W^T W - I| = {drift:.3e}.")
    if use_perturbed and not model.is_perturbed:
        raise InvalidConfigError(" Model has no perturbed inverse square root; call perturb_whitening first.")
    B = model.perturbed_inv_sqrt if use_perturbed else model.inv_sqrt
    data = (W @ B) @ (X.data - model.mean[:, None])
    return SampleMatrix(data)


def whitening_defect(model: WhiteningModel) -> float:
    """
    Spectral norm of U^T U - I for U = perturbed_inv_sqrt M^{1/2}; zero when
    the perturbed whitening differs from the exact one by a rotation.
    """
    if not model.is_perturbed:
        return 0.0
    values, vectors = eigh(model.M)
    sqrt_M = (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T
    U = model.perturbed_inv_sqrt @ sqrt_M
    return float(np.linalg.norm(U.T @ U - np.eye(model.m), 2))

"""
Kernel evaluation and raw / centered Gram matrices.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform

from qkica.errors import InvalidConfigError

logger = logging.getLogger(__name__)

DEFAULT_SIGMA = 1.0 / math.sqrt(2.0)
KERNELS = ("gaussian",)


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "gaussian"
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise InvalidConfigError(f" Unsupported kernel '{self.kind}'; available: {', '.join(KERNELS)}.")
        if not self.sigma > 0:
            raise InvalidConfigError(f" Kernel bandwidth sigma must be positive, got {self.sigma}.")

    def from_sq_dist(self, sq):
        return np.exp(-np.asarray(sq) / (2.0 * self.sigma**2))

    def derivative_factor(self, x, y):
        """d/dx K(x, y) = -(x - y) / sigma^2 * K(x, y), 1-D only."""
        diff = np.subtract(x, y)
        return -diff / self.sigma**2 * self.from_sq_dist(diff**2)


@dataclass(frozen=True)
class GramPair:
    raw: np.ndarray
    centered: np.ndarray


def kernel_eval(spec: KernelSpec, x, y):
    """exp(-|x - y|^2 / (2 sigma^2)); vectors are compared along the last axis."""
    diff = np.subtract(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    sq = np.sum(diff**2, axis=-1) if diff.ndim > 0 else diff**2
    return spec.from_sq_dist(sq)


def gram_raw(z, spec: KernelSpec) -> np.ndarray:
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.size < 2:
        raise InvalidConfigError(f" A Gram matrix needs at least 2 samples, got {z.size}.")
    return spec.from_sq_dist(squareform(pdist(z[:, None], "sqeuclidean")))


def gram_center(raw) -> np.ndarray:
    """
    Double centering, (I - 1/N) K (I - 1/N) computed from row and column
    means in O(N^2).
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
        raise InvalidConfigError(f" Gram matrix must be square, got shape {raw.shape}.")
    row_mean = raw.mean(axis=1, keepdims=True)
    col_mean = raw.mean(axis=0, keepdims=True)
    centered = raw - row_mean - col_mean + raw.mean()
    return (centered + centered.T) / 2


def gram_pair(z, spec: KernelSpec) -> GramPair:
    raw = gram_raw(z, spec)
    return GramPair(raw, gram_center(raw))

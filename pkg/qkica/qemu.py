"""
Emulation of the quantum contrast estimator at the level of its measured
quantities, plus explicit assembly of the Gram block-encoding circuit.

Phase and amplitude estimation are replaced by their output guarantees:
bounded additive error on eigenvalues and on the magnitude of
mu_ik <u_ik, u_jl>, with the sign lost.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh, hadamard

from qkica.contrast import DEFAULT_KAPPA, build_rkappa, composite_det_bound, det_contrast, min_eig, shrink
from qkica.errors import BudgetError, InvalidConfigError, LayoutTooLargeError
from qkica.gram import KernelSpec, gram_center, gram_raw
from qkica.preprocess import WhiteningModel, apply_unmixing, perturb_whitening
from qkica.sources import SampleMatrix, stream
from qkica.spectral import GramSpectrum, decompose_all, overlaps

logger = logging.getLogger(__name__)

MODES = ("general", "near_independent")
# Dense unitaries are only materialized up to this many qubits.
DENSE_QUBITS = 14
MAX_QUBITS = 16

# Stream tags keep the different noise sources statistically independent.
_EIG_STREAM = 7
_OVERLAP_STREAM = 11
_WHITEN_STREAM = 13


@dataclass(frozen=True)
class NoiseSpec:
    """
    Measurement-error model. General mode uses eps_mu = eps_I = xi kappa eps1 / 4;
    near-independent mode uses eps_mu = kappa eps1 / (4 G) and
    eps_I = eps1 eps2 kappa / 4.
    """

    eps1: float = 0.0
    eps2: float = 0.0
    kappa: float = DEFAULT_KAPPA
    mode: str = "general"
    xi_est: Optional[float] = None
    G: float = 1.0
    seed: int = 0
    r_bits: Optional[int] = None
    strict: bool = True

    def __post_init__(self):
        if self.mode == "near":
            object.__setattr__(self, "mode", "near_independent")
        if self.mode not in MODES:
            raise InvalidConfigError(f" Noise mode must be one of {MODES}, got '{self.mode}'.")
        if self.eps1 < 0 or self.eps2 < 0:
            raise InvalidConfigError(" eps1 and eps2 must be non-negative.")
        if not self.eps2 < 0.2:
            raise InvalidConfigError(f" eps2 must be below 0.2, got {self.eps2}.")
        if not self.kappa > 0:
            raise InvalidConfigError(f" kappa must be positive, got {self.kappa}.")
        if not self.G > 0:
            raise InvalidConfigError(f" G must be positive, got {self.G}.")
        if self.r_bits is not None and self.r_bits < 1:
            raise InvalidConfigError(f" r_bits must be at least 1, got {self.r_bits}.")

    def check(self, d):
        """Budget hypotheses for an R_kappa of dimension d."""
        if self.mode == "general":
            if d > 0 and not self.eps1 < 1.0 / d**2:
                message = f" General mode requires eps1 < 1/d^2 = {1.0 / d**2:.3g} (d={d}), got {self.eps1}."
                if self.strict:
                    raise BudgetError(message)
                logger.warning(message)
        else:
            if not self.eps1 < 1.0:
                raise BudgetError(f" Near-independent mode requires eps1 < 1, got {self.eps1}.")
            if d > 0 and self.eps2 * d**2 >= 1.0:
                logger.warning(
                    f" eps2={self.eps2} is not small against 1/d^2={1.0 / d**2:.3g};"
                    " the near-independent budget may not hold."
                )

    def budgets(self, xi=None):
        """(eps_mu, eps_I)."""
        if self.eps1 == 0:
            return 0.0, 0.0
        if self.mode == "general":
            xi = self.xi_est if xi is None else xi
            if xi is None or not xi > 0:
                raise BudgetError(f" General-mode budget needs a positive xi estimate, got {xi}.")
            eps = xi * self.kappa * self.eps1 / 4.0
            return eps, eps
        return self.kappa * self.eps1 / (4.0 * self.G), self.eps1 * self.eps2 * self.kappa / 4.0

    def entry_cap(self, xi):
        """Bound on the additive error of every R_kappa entry."""
        if self.mode == "general":
            return xi * self.eps1
        return self.eps1 * self.eps2


@dataclass(frozen=True)
class NoisyEvaluation:
    det_noisy: float
    det_exact: float
    relative_error: float
    bound: float
    xi: float
    d: int
    eps_mu: float
    eps_I: float
    discarded: int


def eigenphase_readout(K, N, r_bits) -> List[float]:
    """
    Eigenvalues of K / N rounded to r_bits binary digits, standing in for
    phase estimation of exp(i K t / N).
    """
    if r_bits < 1:
        raise InvalidConfigError(f" r_bits must be at least 1, got {r_bits}.")
    mu = eigh(np.asarray(K, dtype=float) / N, eigvals_only=True)[::-1]
    return list(_round_bits(mu, r_bits))


def _round_bits(mu, r_bits):
    scale = float(2**r_bits)
    return np.round(np.asarray(mu) * scale) / scale


def _noisy_mu(mu, eps_mu, rng):
    mu = np.asarray(mu, dtype=float)
    if eps_mu < 0:
        raise InvalidConfigError(f" eps_mu must be non-negative, got {eps_mu}.")
    if eps_mu == 0:
        return mu.copy(), np.ones(mu.shape, dtype=bool)
    noisy = mu + rng.uniform(-eps_mu, eps_mu, size=mu.shape)
    return noisy, noisy >= eps_mu


def emulate_eig_readout(spectrum: GramSpectrum, eps_mu, rng) -> GramSpectrum:
    """
    Kept eigenvalues plus uniform noise on [-eps_mu, eps_mu]; pairs whose
    noisy value falls below eps_mu are discarded. The result is re-sorted by
    the noisy values.
    """
    noisy, keep = _noisy_mu(spectrum.kept_mu, eps_mu, rng)
    order = np.argsort(-noisy[keep], kind="stable")
    mu = noisy[keep][order]
    vectors = spectrum.kept_vectors[:, keep][:, order]
    return GramSpectrum(mu, vectors, len(mu), spectrum.eps_trunc, complete=False)


def emulate_overlap_readout(mu_ik, overlap, eps_I, rng):
    """|mu_ik <u, u>| plus uniform noise on [-eps_I, eps_I], clamped at zero."""
    amplitude = np.abs(np.asarray(mu_ik, dtype=float) * np.asarray(overlap, dtype=float))
    if eps_I < 0:
        raise InvalidConfigError(f" eps_I must be non-negative, got {eps_I}.")
    if eps_I > 0:
        amplitude = amplitude + rng.uniform(-eps_I, eps_I, size=amplitude.shape)
    out = np.maximum(amplitude, 0.0)
    return float(out) if out.ndim == 0 else out


def evaluate_noisy(
    Z: SampleMatrix,
    noise: NoiseSpec,
    kernel: Optional[KernelSpec] = None,
    eps_trunc=0.0,
    spectra: Optional[Sequence[GramSpectrum]] = None,
    draw=0,
    workers=1,
) -> NoisyEvaluation:
    """
    Noisy reconstruction of the adapted R_kappa of Z against the noiseless
    one on the same samples. Discarded eigenpairs keep their rows with zero
    off-diagonal entries, which leaves the determinant of the reduced
    matrix unchanged.
    """
    kernel = kernel or KernelSpec()
    if spectra is None:
        spectra = decompose_all(Z, kernel, eps_trunc, full=False, workers=workers)
    exact = build_rkappa(spectra, kappa=noise.kappa, signed=False)
    det_exact = det_contrast(exact)
    d = exact.d
    xi = noise.xi_est if noise.xi_est is not None else min_eig(exact)
    noise.check(d)
    eps_mu, eps_I = noise.budgets(xi)
    logger.debug(f" Budgets: d={d} xi={xi:.4g} eps_mu={eps_mu:.3g} eps_I={eps_I:.3g}")

    half = noise.kappa / 2.0
    sizes = [s.kept for s in spectra]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    mu_read, mu_noisy, keep = [], [], []
    for i, s in enumerate(spectra):
        mu = s.kept_mu if noise.r_bits is None else _round_bits(s.kept_mu, noise.r_bits)
        noisy, mask = _noisy_mu(mu, eps_mu, stream(noise.seed, _EIG_STREAM, draw, i))
        mu_read.append(mu)
        mu_noisy.append(noisy)
        keep.append(mask)

    R = np.eye(d)
    for i in range(len(spectra)):
        for j in range(i + 1, len(spectra)):
            if sizes[i] == 0 or sizes[j] == 0:
                continue
            rng = stream(noise.seed, _OVERLAP_STREAM, draw, i, j)
            O = overlaps(spectra[i], spectra[j])
            amp = emulate_overlap_readout(mu_read[i][:, None], O, eps_I, rng)
            mi, mj = mu_noisy[i], mu_noisy[j]
            block = np.abs(shrink(mj, noise.kappa))[None, :] * amp / (mi[:, None] + half)
            block = np.where(keep[i][:, None] & keep[j][None, :], block, 0.0)
            R[offsets[i]:offsets[i + 1], offsets[j]:offsets[j + 1]] = block
            R[offsets[j]:offsets[j + 1], offsets[i]:offsets[i + 1]] = block.T

    sign, logabs = np.linalg.slogdet(R)
    det_noisy = float(sign * np.exp(logabs))
    relative = abs(det_noisy - det_exact) / abs(det_exact) if det_exact != 0 else float("inf")
    bound = composite_det_bound(d, noise.entry_cap(xi), xi) if d else 0.0
    discarded = int(sum(np.count_nonzero(~k) for k in keep))
    return NoisyEvaluation(det_noisy, det_exact, float(relative), bound, float(xi), d, eps_mu, eps_I, discarded)


def noisy_contrast(
    Y: SampleMatrix,
    noise: NoiseSpec,
    W,
    kernel: Optional[KernelSpec] = None,
    eps_trunc=0.0,
    model: Optional[WhiteningModel] = None,
    draw=0,
    workers=1,
) -> float:
    """
    det of the noisy adapted R_kappa of W Y. `model` whitens Y; without it Y
    is taken as already white. eps2 > 0 perturbs the whitening first.
    """
    return _noisy_evaluation(Y, noise, W, kernel, eps_trunc, model, draw, workers).det_noisy


def _noisy_evaluation(Y, noise, W, kernel, eps_trunc, model, draw, workers):
    model = model or WhiteningModel.identity(Y)
    if noise.eps2 > 0:
        model = perturb_whitening(model, noise.eps2, _whitening_seed(noise.seed))
        Z = apply_unmixing(Y, model, W, use_perturbed=True)
    else:
        # Landscapes evaluate non-orthogonal mixings, so W is not checked here.
        W = np.asarray(W, dtype=float)
        Z = SampleMatrix(W @ model.inv_sqrt @ (Y.data - model.mean[:, None]))
    return evaluate_noisy(Z, noise, kernel, eps_trunc, draw=draw, workers=workers)


def _whitening_seed(seed):
    return int(np.random.SeedSequence([seed, _WHITEN_STREAM]).generate_state(1)[0])


def noisy_evaluation(Y, noise, W, kernel=None, eps_trunc=0.0, model=None, draw=0, workers=1):
    """Like noisy_contrast, but returns the full NoisyEvaluation record."""
    return _noisy_evaluation(Y, noise, W, kernel, eps_trunc, model, draw, workers)


# Block-encoding circuit


@dataclass(frozen=True)
class CircuitLayout:
    """
    Registers, most significant first: j (n qubits), r (n), kernel value (s),
    rotation ancilla (1), projector flag (1).
    """

    n: int
    s: int
    max_qubits: int = MAX_QUBITS

    def __post_init__(self):
        if self.n < 1 or self.s < 1:
            raise InvalidConfigError(f" Layout needs n >= 1 and s >= 1, got n={self.n}, s={self.s}.")
        if self.total > self.max_qubits:
            raise LayoutTooLargeError(
                f" Layout uses {self.total} qubits; at most {self.max_qubits} can be assembled."
            )

    @property
    def N(self):
        return 2**self.n

    @property
    def total(self):
        return 2 * self.n + self.s + 2

    @property
    def dim(self):
        return 2**self.total

    def basis(self, j, r=0, z=0, a=0, flag=0):
        return (((j * self.N + r) * 2**self.s + z) * 2 + a) * 2 + flag


@dataclass(frozen=True)
class BlockEncoding:
    layout: CircuitLayout
    unitary: sp.csc_matrix
    factors: tuple = field(repr=False)

    def block(self):
        """N x N matrix <j,0,1| U |k,0,1>."""
        idx = [self.layout.basis(j, flag=1) for j in range(self.layout.N)]
        return self.unitary[idx, :][:, idx].toarray()

    def to_dense(self):
        if self.layout.total > DENSE_QUBITS:
            raise LayoutTooLargeError(
                f" Dense assembly is capped at {DENSE_QUBITS} qubits; layout has {self.layout.total}."
            )
        return self.unitary.toarray()

    def unitarity_residual(self, n_vectors=8, seed=0):
        """
        max |U^T U - I|. Up to the dense cap it is computed exactly; above it
        from every gate factor plus U applied to a random orthonormal test
        set.
        """
        U = self.unitary
        if self.layout.total <= DENSE_QUBITS:
            gram = (U.T @ U).tocsr()
            return float(abs(gram - sp.identity(U.shape[0], format="csr")).max())
        residual = max(_factor_residual(F) for F in self.factors)
        Q, _ = np.linalg.qr(stream(seed, U.shape[0]).standard_normal((U.shape[0], n_vectors)))
        UQ = U @ Q
        residual = max(residual, float(np.max(np.abs(UQ.T @ UQ - np.eye(n_vectors)))))
        return residual


def _eye(k):
    return sp.identity(k, format="csc")


def _factor_residual(F):
    gram = (F.T @ F).tocsr()
    return float(abs(gram - sp.identity(F.shape[0], format="csr")).max())


def quantize_kernel(values, s):
    """Nearest s-bit fixed-point fraction, clipped to the largest code 1 - 2^-s."""
    codes = np.clip(np.round(np.asarray(values) * 2**s), 0, 2**s - 1)
    return codes.astype(np.int64)


def _check_z(z, layout):
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.size != layout.N:
        raise InvalidConfigError(f" Layout with n={layout.n} needs {layout.N} samples, got {z.size}.")
    return z


def build_oracle_unitary(z, layout: CircuitLayout, kernel: Optional[KernelSpec] = None):
    """
    Permutation |j>|k>|v> -> |j>|k>|v XOR K_q(z_j, z_k)> on the 2n + s
    qubit space.
    """
    kernel = kernel or KernelSpec()
    z = _check_z(z, layout)
    codes = quantize_kernel(gram_raw(z, kernel), layout.s)
    N, Z = layout.N, 2**layout.s
    j, k, v = np.meshgrid(np.arange(N), np.arange(N), np.arange(Z), indexing="ij")
    source = ((j * N + k) * Z + v).ravel()
    target = ((j * N + k) * Z + (v ^ codes[j, k])).ravel()
    size = N * N * Z
    return sp.csc_matrix((np.ones(size), (target, source)), shape=(size, size))


def _controlled_rotation(s):
    """|a>|0> -> |a>(a|0> + sqrt(1-a^2)|1>) for every s-bit value a."""
    a = np.arange(2**s) / 2**s
    c, t = a, np.sqrt(1.0 - a**2)
    blocks = [sp.csr_matrix(np.array([[ci, -ti], [ti, ci]])) for ci, ti in zip(c, t)]
    return sp.block_diag(blocks, format="csc")


def build_block_encoding(z, layout: CircuitLayout, kernel: Optional[KernelSpec] = None) -> BlockEncoding:
    """
    U = C_Pi NOT . cU . C_Pi NOT with
    U~ = (I (x) H^n) SWAP O^dag CR O (I (x) H^n) acting on the flag-0 branch
    and X on the rotation ancilla on the flag-1 branch. Then
    <j,0,1|U|k,0,1> = (K_i)_jk / N up to kernel quantization.
    """
    kernel = kernel or KernelSpec()
    z = _check_z(z, layout)
    N, s = layout.N, layout.s
    eye = _eye
    I2 = eye(2)
    X = sp.csc_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    zero = sp.csc_matrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
    one = sp.csc_matrix(np.array([[0.0, 0.0], [0.0, 1.0]]))

    # Gates on the flag-free space j, r, value, ancilla.
    H = sp.kron(sp.kron(eye(N), sp.csc_matrix(hadamard(N) / np.sqrt(N))), eye(2**s * 2), format="csc")
    O = sp.kron(build_oracle_unitary(z, layout, kernel), I2, format="csc")
    CR = sp.kron(eye(N * N), _controlled_rotation(s), format="csc")
    j, r = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    tail = 2**s * 2
    src = ((j * N + r)[..., None] * tail + np.arange(tail)).ravel()
    dst = ((r * N + j)[..., None] * tail + np.arange(tail)).ravel()
    SWAP = sp.csc_matrix((np.ones(src.size), (dst, src)), shape=(N * N * tail,) * 2)
    X_anc = sp.kron(eye(N * N * 2**s), X, format="csc")

    U_tilde = (H @ SWAP @ O.T @ CR @ O @ H).tocsc()
    controlled = (sp.kron(U_tilde, zero) + sp.kron(X_anc, one)).tocsc()

    # C_Pi NOT = I + Pi (x) (X - I), Pi = (I - J/N) on j times |0><0| on the rest.
    P = np.eye(N) - np.full((N, N), 1.0 / N)
    rest = sp.csc_matrix(([1.0], ([0], [0])), shape=(N * 2**s * 2,) * 2)
    C = (sp.identity(layout.dim, format="csc") + sp.kron(sp.kron(sp.csc_matrix(P), rest), X - I2)).tocsc()
    C.eliminate_zeros()

    U = (C @ controlled @ C).tocsc()
    U.eliminate_zeros()
    factors = (C,) + tuple(sp.kron(F, I2, format="csc") for F in (H, SWAP, O, CR, X_anc))
    logger.debug(f" Block encoding on {layout.total} qubits, nnz={U.nnz}")
    return BlockEncoding(layout, U, factors)


@dataclass(frozen=True)
class CircuitCheck:
    max_deviation: float
    unitarity_residual: float
    tolerance: float
    unitarity_tolerance: float = 1e-10

    @property
    def passed(self):
        return self.max_deviation <= self.tolerance and self.unitarity_residual <= self.unitarity_tolerance


def verify_circuit(z, layout: CircuitLayout, kernel: Optional[KernelSpec] = None, tolerance=None) -> CircuitCheck:
    """max_jk |N <j,0,1|U|k,0,1> - (K_i)_jk| and the unitarity residual."""
    kernel = kernel or KernelSpec()
    encoding = build_block_encoding(z, layout, kernel)
    reference = gram_center(gram_raw(_check_z(z, layout), kernel))
    deviation = float(np.max(np.abs(layout.N * encoding.block() - reference)))
    tolerance = 4.0 * 2.0**-layout.s if tolerance is None else tolerance
    return CircuitCheck(deviation, encoding.unitarity_residual(), tolerance)

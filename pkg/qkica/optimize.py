"""
Contrast minimization over orthogonal unmixing matrices, 2-parameter
landscape scans, and separation scores.

Objectives are callables J(Y, W) evaluated on Z = W Y; the factories below
build them from the contrast and emulator modules.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.linalg import expm, polar

from qkica.contrast import DEFAULT_KAPPA, kurtosis_contrast, min_eig, neg_log_det, rkappa_from_samples
from qkica.errors import BudgetError, InvalidConfigError, NumericalError
from qkica.gram import KernelSpec
from qkica.qemu import NoiseSpec, noisy_evaluation
from qkica.sources import GeneratorSet, SampleMatrix, elementary_generators, mixing_from_generators, random_rotation

logger = logging.getLogger(__name__)

Objective = Callable[[SampleMatrix, np.ndarray], float]

RETRACTION_DRIFT = 1e-10
# New random starts drawn per restart after a non-finite contrast.
RESTART_RETRIES = 5
NOISY_DRAWS = 3


def _transform(Y: SampleMatrix, W) -> SampleMatrix:
    return SampleMatrix(np.asarray(W, dtype=float) @ Y.data)


def kica_objective(
    kappa=DEFAULT_KAPPA,
    kernel: Optional[KernelSpec] = None,
    eps_trunc=0.0,
    signed=True,
    kappa_raw=False,
    workers=1,
) -> Objective:
    """
    -ln det of R_kappa of W Y. signed=True is the classical contrast;
    signed=False is the adapted one built from absolute entries.
    """
    kernel = kernel or KernelSpec()

    def objective(Y, W):
        R = rkappa_from_samples(_transform(Y, W), kappa, kernel, eps_trunc, signed, kappa_raw, workers)
        return neg_log_det(R)

    return objective


def xi_objective(kappa=DEFAULT_KAPPA, kernel: Optional[KernelSpec] = None, eps_trunc=0.0, workers=1) -> Objective:
    """Minimal eigenvalue of the adapted R_kappa of W Y."""
    kernel = kernel or KernelSpec()

    def objective(Y, W):
        return min_eig(rkappa_from_samples(_transform(Y, W), kappa, kernel, eps_trunc, False, False, workers))

    return objective


def noisy_objective(
    noise: NoiseSpec,
    kernel: Optional[KernelSpec] = None,
    eps_trunc=0.0,
    draws=NOISY_DRAWS,
    model=None,
    workers=1,
) -> Objective:
    """
    -ln of the emulated det R_kappa averaged over `draws` noise draws. The
    draws are the same for every W. Budget failures evaluate to +inf.
    """
    kernel = kernel or KernelSpec()

    def objective(Y, W):
        values = []
        for draw in range(draws):
            try:
                values.append(noisy_evaluation(Y, noise, W, kernel, eps_trunc, model, draw, workers).det_noisy)
            except BudgetError as e:
                logger.debug(f" Noisy contrast undefined at this point: {e}")
                return math.inf
        det = float(np.mean(values))
        return -math.log(det) if det > 0 else math.inf

    return objective


def kurtosis_objective() -> Objective:
    """-sum_i |kurt(z_i)|; more non-Gaussian outputs give lower values."""

    def objective(Y, W):
        Z = _transform(Y, W)
        return -float(sum(abs(kurtosis_contrast(Z.row(i))) for i in range(Z.m)))

    return objective


def parse_grid(value) -> Tuple[float, float, int]:
    """'LO:HI:STEPS' or a (lo, hi, steps) sequence."""
    if isinstance(value, str):
        parts = value.split(":")
        if len(parts) != 3:
            raise InvalidConfigError(f" Grid must be LO:HI:STEPS, got '{value}'.")
        value = parts
    try:
        lo, hi, steps = float(value[0]), float(value[1]), int(value[2])
    except (TypeError, ValueError, IndexError):
        raise InvalidConfigError(f" Grid must be (lo, hi, steps), got {value!r}.")
    if steps < 1:
        raise InvalidConfigError(f" Grid needs at least one step, got {steps}.")
    if steps > 1 and not hi > lo:
        raise InvalidConfigError(f" Grid upper end {hi} must exceed lower end {lo}.")
    return lo, hi, steps


def _axis(grid):
    lo, hi, steps = parse_grid(grid)
    if steps == 1:
        return np.array([(lo + hi) / 2.0])
    return np.linspace(lo, hi, steps)


@dataclass(frozen=True)
class Landscape:
    """J over a grid of angles; `axes` holds one array per generator."""

    axes: Tuple[np.ndarray, ...]
    values: np.ndarray
    xi: Optional[np.ndarray] = None

    @property
    def argmin(self) -> Tuple[int, ...]:
        values = np.where(np.isfinite(self.values), self.values, np.inf)
        return tuple(int(i) for i in np.unravel_index(np.argmin(values), values.shape))

    @property
    def argmin_point(self) -> Tuple[float, ...]:
        return tuple(float(axis[i]) for axis, i in zip(self.axes, self.argmin))

    def cell_contains(self, point=None) -> bool:
        """Whether the argmin cell (half a step around the grid point) holds `point`."""
        point = (0.0,) * len(self.axes) if point is None else point
        for axis, i, p in zip(self.axes, self.argmin, point):
            half = (axis[1] - axis[0]) / 2.0 if axis.size > 1 else 0.0
            if abs(axis[i] - p) > half + 1e-12:
                return False
        return True

    def rows(self):
        """(delta_1, [delta_2,] J[, xi]) per grid point in row-major order."""
        out = []
        for index in np.ndindex(self.values.shape):
            row = [float(axis[i]) for axis, i in zip(self.axes, index)]
            row.append(float(self.values[index]))
            if self.xi is not None:
                row.append(float(self.xi[index]))
            out.append(row)
        return out


def scan_landscape(
    Y: SampleMatrix,
    generators,
    grid,
    contrast_fn: Objective,
    xi_fn: Optional[Objective] = None,
    workers=1,
) -> Landscape:
    """
    Evaluates contrast_fn at W = exp(sum delta_a P_a) over a grid per
    generator. `grid` is one (lo, hi, steps) spec shared by all axes or a
    list with one per generator.
    """
    gens = generators.generators if isinstance(generators, GeneratorSet) else tuple(generators)
    if not 1 <= len(gens) <= 2:
        raise InvalidConfigError(f" A landscape takes 1 or 2 generators, got {len(gens)}.")
    if isinstance(grid, str) or (len(grid) == 3 and not isinstance(grid[0], (list, tuple, str))):
        grids = [grid] * len(gens)
    else:
        grids = list(grid)
    if len(grids) != len(gens):
        raise InvalidConfigError(f" Got {len(grids)} grid specs for {len(gens)} generators.")
    axes = tuple(_axis(g) for g in grids)
    shape = tuple(a.size for a in axes)
    points = list(np.ndindex(shape))

    def evaluate(index):
        deltas = [axis[i] for axis, i in zip(axes, index)]
        W = mixing_from_generators(GeneratorSet(gens, deltas))
        J = contrast_fn(Y, W)
        xi = xi_fn(Y, W) if xi_fn is not None else None
        logger.debug(f" J({', '.join(f'{d:.4f}' for d in deltas)}) = {J:.6g}")
        return J, xi

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, points))
    else:
        results = [evaluate(p) for p in points]
    values = np.array([r[0] for r in results], dtype=float).reshape(shape)
    xi = np.array([r[1] for r in results], dtype=float).reshape(shape) if xi_fn is not None else None
    return Landscape(axes, values, xi)


@dataclass(frozen=True)
class OptimizeOptions:
    max_iters: int = 100
    tol: float = 1e-6
    restarts: int = 5
    fd_step: float = 1e-3
    seed: int = 0
    step0: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 20
    workers: int = 1

    def __post_init__(self):
        if self.max_iters < 1 or self.restarts < 1:
            raise InvalidConfigError(" max_iters and restarts must be at least 1.")
        if not self.tol > 0 or not self.fd_step > 0 or not self.step0 > 0:
            raise InvalidConfigError(" tol, fd_step and step0 must be positive.")


@dataclass
class OptimizeReport:
    W_opt: np.ndarray
    J_trace: List[Tuple[int, float]]
    restarts_used: int
    converged: bool
    amari: Optional[float] = None
    failed_restarts: int = 0
    restart_values: List[float] = field(default_factory=list)

    @property
    def J_opt(self):
        return self.J_trace[-1][1]


@dataclass
class _Descent:
    W: np.ndarray
    trace: List[Tuple[int, float]]
    converged: bool


def _restart_seed(seed, restart, attempt=0):
    keys = [seed, restart] if attempt == 0 else [seed, restart, attempt]
    return int(np.random.SeedSequence(keys).generate_state(1)[0])


def _descend(Y, contrast_fn, W, options: OptimizeOptions) -> Optional[_Descent]:
    m = W.shape[0]
    gens = elementary_generators(m)
    h = options.fd_step
    J = contrast_fn(Y, W)
    if not math.isfinite(J):
        return None
    trace = [(0, J)]
    for it in range(1, options.max_iters + 1):
        grad = np.empty(len(gens))
        for a, P in enumerate(gens):
            up = contrast_fn(Y, expm(h * P) @ W)
            down = contrast_fn(Y, expm(-h * P) @ W)
            if not (math.isfinite(up) and math.isfinite(down)):
                return None
            grad[a] = (up - down) / (2.0 * h)
        gnorm2 = float(grad @ grad)
        if math.sqrt(gnorm2) < options.tol:
            return _Descent(W, trace, True)
        G = sum(g * P for g, P in zip(grad, gens))

        t = options.step0
        accepted = False
        for _ in range(options.max_backtracks):
            W_try = expm(-t * G) @ W
            J_try = contrast_fn(Y, W_try)
            if math.isfinite(J_try) and J - J_try >= max(options.armijo * t * gnorm2, options.tol / 10.0):
                accepted = True
                break
            t /= 2.0
        if not accepted:
            return _Descent(W, trace, True)

        if np.max(np.abs(W_try.T @ W_try - np.eye(m))) > RETRACTION_DRIFT:
            W_try, _ = polar(W_try)
        decrease = J - J_try
        W, J = W_try, J_try
        trace.append((it, J))
        logger.debug(f" iter {it}: J = {J:.8g}, |grad| = {math.sqrt(gnorm2):.3g}, step = {t:.3g}")
        if decrease < options.tol:
            return _Descent(W, trace, True)
    return _Descent(W, trace, False)


def minimize_stiefel(
    Y: SampleMatrix,
    contrast_fn: Objective,
    options: Optional[OptimizeOptions] = None,
    W0=None,
    mixing=None,
) -> OptimizeReport:
    """
    Multistart descent over SO(m). Restart 0 starts from W0 (identity by
    default), later ones from random rotations; the lowest final contrast
    wins. `mixing` is the mixing of the sources as seen in Y and enables
    the Amari score.
    """
    options = options or OptimizeOptions()
    m = Y.m
    if W0 is None:
        W0 = np.eye(m)
    W0 = np.asarray(W0, dtype=float)
    if W0.shape != (m, m):
        raise InvalidConfigError(f" Initial W must be {m}x{m}, got {W0.shape}.")

    def run(restart):
        failures = 0
        for attempt in range(RESTART_RETRIES + 1):
            if restart == 0 and attempt == 0:
                start = W0
            else:
                start = random_rotation(m, _restart_seed(options.seed, restart, attempt))
            result = _descend(Y, contrast_fn, start, options)
            if result is not None:
                return result, failures
            failures += 1
            logger.debug(f" Restart {restart}: non-finite contrast on attempt {attempt}, drawing a new start")
        return None, failures

    restarts = range(options.restarts)
    if options.workers > 1 and options.restarts > 1:
        with ThreadPoolExecutor(max_workers=options.workers) as pool:
            results = list(pool.map(run, restarts))
    else:
        results = [run(r) for r in restarts]

    finished = [d for d, _ in results if d is not None]
    failed = sum(f for _, f in results)
    if failed:
        logger.warning(f" {failed} starts hit a non-finite contrast and were replaced by new random starts.")
    if not finished:
        raise NumericalError(f" Contrast was non-finite in every restart, after {RESTART_RETRIES} new starts each.")
    best = min(finished, key=lambda d: d.trace[-1][1])
    report = OptimizeReport(
        W_opt=best.W,
        J_trace=best.trace,
        restarts_used=len(results),
        converged=best.converged,
        failed_restarts=failed,
        restart_values=[d.trace[-1][1] for d in finished],
    )
    if mixing is not None:
        report.amari = amari_error(mixing, best.W)
    logger.info(f" Best contrast {report.J_opt:.6g} after {len(best.trace) - 1} accepted steps")
    return report


def amari_error(A, W_inv) -> float:
    """
    Amari error of P = W_inv A, the estimated unmixing applied to the true
    mixing; zero exactly when P is a scaled permutation.
    """
    A = np.asarray(A, dtype=float)
    W_inv = np.asarray(W_inv, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or W_inv.shape != A.shape:
        raise InvalidConfigError(f" Amari error needs two square matrices of equal shape, got {A.shape} and {W_inv.shape}.")
    P = np.abs(W_inv @ A)
    row_max, col_max = P.max(axis=1), P.max(axis=0)
    if np.any(row_max == 0) or np.any(col_max == 0):
        raise InvalidConfigError(" Product of mixing and unmixing has a zero row or column.")
    m = P.shape[0]
    rows = np.sum(P.sum(axis=1) / row_max - 1.0)
    cols = np.sum(P.sum(axis=0) / col_max - 1.0)
    return float((rows + cols) / (2.0 * m))


def correlation_matrix(S1, S2) -> np.ndarray:
    """Pearson correlation of row i of S1 with row j of S2."""
    a = S1.data if isinstance(S1, SampleMatrix) else np.atleast_2d(np.asarray(S1, dtype=float))
    b = S2.data if isinstance(S2, SampleMatrix) else np.atleast_2d(np.asarray(S2, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise InvalidConfigError(f" Sample counts differ: {a.shape[1]} and {b.shape[1]}.")
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    sa, sb = np.sqrt(np.sum(a**2, axis=1)), np.sqrt(np.sum(b**2, axis=1))
    if np.any(sa == 0) or np.any(sb == 0):
        raise InvalidConfigError(" Correlation is undefined for a zero-variance row.")
    return (a / sa[:, None]) @ (b / sb[:, None]).T

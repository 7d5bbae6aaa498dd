"""
This file contains helper functions for the CLI.
Including parsing methods for each block of the config file, and handling
methods for each command.
"""
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from qkica import bench, utils
from qkica.contrast import DEFAULT_KAPPA, build_rkappa, det_contrast, log_det, min_eig, neg_log_det
from qkica.errors import AcceptanceError, InvalidConfigError
from qkica.gram import KernelSpec, gram_pair
from qkica.nystrom import c_d_table, coverage_trial, overlap_linearity, top_eigenfunctions
from qkica.optimize import (
    OptimizeOptions,
    correlation_matrix,
    kica_objective,
    kurtosis_objective,
    minimize_stiefel,
    noisy_objective,
    parse_grid,
    scan_landscape,
    xi_objective,
)
from qkica.preprocess import perturb_whitening, whiten, whitening_defect
from qkica.qemu import CircuitLayout, NoiseSpec, noisy_evaluation, verify_circuit
from qkica.sources import (
    GeneratorSet,
    SampleMatrix,
    SourceSpec,
    elementary_generators,
    landscape_generators,
    load_csv,
    mix,
    mixing_from_generators,
    random_rotation,
    sample_sources,
)
from qkica.spectral import decompose_all

logger = logging.getLogger(__name__)

BLOCKS = (
    "seed",
    "workers",
    "sources",
    "mixing",
    "kernel",
    "contrast",
    "noise",
    "optimize",
    "scan",
    "nystrom",
    "circuit",
    "bench",
    "output",
)
CONTRAST_KINDS = ("adapted", "classical", "kurtosis")
PHASES = ("coarse", "refine")


@dataclass(frozen=True)
class ContrastSettings:
    kind: str = "adapted"
    kappa: float = DEFAULT_KAPPA
    eps_trunc: float = 0.0
    kappa_raw: bool = False


@dataclass(frozen=True)
class ScanSettings:
    grid: Tuple = (-np.pi / 4, np.pi / 4, 21)
    generators: str = "landscape"


@dataclass(frozen=True)
class NystromSettings:
    n_mc: int = 10_000
    top: int = 3
    n_trials: int = 0
    delta: float = 3.0
    eps2: float = 0.05
    F_ij: float = 1.0
    eps2_values: Tuple[float, ...] = ()


@dataclass(frozen=True)
class OutputSettings:
    dir: Path = Path("results")
    overwrite: bool = False
    svg: bool = True
    dump_gram: bool = False


@dataclass
class ExperimentConfig:
    seed: int
    workers: int
    sources: Optional[SourceSpec]
    csv_input: Optional[Tuple[Path, str]]
    reference: Optional[Tuple[Path, str]]
    mixing: Optional[np.ndarray]
    kernel: KernelSpec
    contrast: ContrastSettings
    noise: Optional[NoiseSpec]
    optimize: OptimizeOptions
    phase: Optional[str]
    scan: ScanSettings
    nystrom: NystromSettings
    circuit: CircuitLayout
    bench: bench.BenchSettings
    output: OutputSettings
    raw: dict = field(default_factory=dict)


def _block(data, name):
    block = data.get(name) or {}
    if not isinstance(block, dict):
        raise InvalidConfigError(f" Block '{name}' must be a mapping, got {type(block).__name__}.")
    return block


def _unknown_keys(name, block, allowed):
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise InvalidConfigError(
            f" Unknown keys in block '{name}': {', '.join(unknown)}. Accepted: {', '.join(allowed)}."
        )


def resolve_workers(value=None):
    """Configured worker count, else KICA_THREADS, else 1."""
    if value is None:
        value = os.environ.get("KICA_THREADS", 1)
    try:
        workers = int(value)
    except (TypeError, ValueError):
        raise InvalidConfigError(f" Worker count must be an integer, got '{value}'.")
    if workers < 1:
        raise InvalidConfigError(f" Worker count must be at least 1, got {workers}.")
    return workers


def parse_sources_block(block, seed):
    _unknown_keys("sources", block, ("distributions", "n_samples", "csv", "orientation", "reference"))
    if "csv" in block:
        return None, (Path(block["csv"]), block.get("orientation", "rows"))
    distributions = block.get("distributions", ["uniform", "laplace"])
    return SourceSpec(tuple(distributions), int(block.get("n_samples", 1000)), seed), None


def parse_reference(block):
    """CSV of a reference decomposition the recovered components are correlated with."""
    if block.get("reference") is None:
        return None
    return Path(block["reference"]), block.get("orientation", "rows")


def parse_mixing_block(block, m, seed):
    """Explicit matrix, generator angles or a random rotation; identity otherwise."""
    _unknown_keys("mixing", block, ("matrix", "generators", "deltas", "random_rotation"))
    if "matrix" in block:
        A = np.asarray(block["matrix"], dtype=float)
        if A.shape != (m, m):
            raise InvalidConfigError(f" Mixing matrix must be {m}x{m}, got {A.shape}.")
        return A
    if block.get("random_rotation"):
        return random_rotation(m, seed)
    if "generators" in block:
        return mixing_from_generators(parse_generators(block["generators"], m, block.get("deltas")))
    return None


def parse_generators(value, m, deltas=None) -> GeneratorSet:
    if value == "elementary":
        gens = elementary_generators(m)
    elif value == "landscape":
        gens = landscape_generators(m)
    elif isinstance(value, list):
        gens = [np.asarray(g, dtype=float) for g in value]
    else:
        raise InvalidConfigError(f" Generators must be 'elementary', 'landscape' or a list of matrices, got {value!r}.")
    return GeneratorSet(tuple(gens), tuple(deltas or ()))


def parse_kernel_block(block):
    _unknown_keys("kernel", block, ("kind", "sigma"))
    return KernelSpec(**block)


def parse_contrast_block(block):
    _unknown_keys("contrast", block, ("kind", "kappa", "eps_trunc", "kappa_raw"))
    settings = ContrastSettings(
        kind=block.get("kind", "adapted"),
        kappa=float(block.get("kappa", DEFAULT_KAPPA)),
        eps_trunc=float(block.get("eps_trunc", 0.0)),
        kappa_raw=bool(block.get("kappa_raw", False)),
    )
    if settings.kind not in CONTRAST_KINDS:
        raise InvalidConfigError(f" Contrast kind must be one of {CONTRAST_KINDS}, got '{settings.kind}'.")
    return settings


def parse_noise_block(block, seed, kappa):
    if not block:
        return None
    _unknown_keys("noise", block, ("eps1", "eps2", "mode", "xi_est", "G", "r_bits", "strict"))
    return NoiseSpec(kappa=kappa, seed=seed, **block)


def parse_optimize_block(block, seed, workers):
    keys = ("max_iters", "tol", "restarts", "fd_step", "step0", "armijo", "max_backtracks", "phase")
    _unknown_keys("optimize", block, keys)
    phase = block.get("phase")
    if phase is not None and phase not in PHASES:
        raise InvalidConfigError(f" Phase must be one of {PHASES}, got '{phase}'.")
    options = {k: v for k, v in block.items() if k != "phase"}
    return OptimizeOptions(seed=seed, workers=workers, **options), phase


def parse_scan_block(block):
    _unknown_keys("scan", block, ("grid", "generators"))
    grid = block.get("grid", ScanSettings.grid)
    if isinstance(grid, list) and grid and isinstance(grid[0], (list, str)):
        grid = tuple(parse_grid(g) for g in grid)
    else:
        grid = parse_grid(grid)
    return ScanSettings(grid, block.get("generators", "landscape"))


def parse_nystrom_block(block):
    _unknown_keys("nystrom", block, ("n_mc", "top", "n_trials", "delta", "eps2", "F_ij", "eps2_values"))
    values = dict(block)
    values["eps2_values"] = tuple(float(v) for v in values.get("eps2_values", ()))
    return NystromSettings(**values)


def parse_circuit_block(block):
    _unknown_keys("circuit", block, ("n", "s"))
    return CircuitLayout(int(block.get("n", 2)), int(block.get("s", 8)))


def parse_output_block(block):
    _unknown_keys("output", block, ("dir", "overwrite", "svg", "dump_gram"))
    return OutputSettings(
        dir=Path(block.get("dir", "results")),
        overwrite=bool(block.get("overwrite", False)),
        svg=bool(block.get("svg", True)),
        dump_gram=bool(block.get("dump_gram", False)),
    )


def parse_config(data) -> ExperimentConfig:
    """
    Validates a merged config mapping (file plus flags) and returns the
    typed configuration.
    """
    unknown = sorted(set(data) - set(BLOCKS))
    if unknown:
        raise InvalidConfigError(
            f" Unrecognized block(s) in config: {', '.join(unknown)}. Accepted blocks: {', '.join(BLOCKS)}."
        )
    if data.get("seed") is None:
        raise InvalidConfigError(" A seed is required: set 'seed' in the config or pass --seed.")
    try:
        seed = int(data["seed"])
    except (TypeError, ValueError):
        raise InvalidConfigError(f" Seed must be an integer, got '{data['seed']}'.")
    if not 0 <= seed < 2**64:
        raise InvalidConfigError(f" Seed must be an unsigned 64-bit integer, got {seed}.")
    workers = resolve_workers(data.get("workers"))

    sources, csv_input = parse_sources_block(_block(data, "sources"), seed)
    m = len(sources.distributions) if sources is not None else None
    mixing_block = _block(data, "mixing")
    if mixing_block and m is None:
        raise InvalidConfigError(" A mixing block needs generated sources, not CSV input.")
    mixing = parse_mixing_block(mixing_block, m, seed) if m is not None else None
    contrast = parse_contrast_block(_block(data, "contrast"))
    optimize, phase = parse_optimize_block(_block(data, "optimize"), seed, workers)
    try:
        return ExperimentConfig(
            seed=seed,
            workers=workers,
            sources=sources,
            csv_input=csv_input,
            reference=parse_reference(_block(data, "sources")),
            mixing=mixing,
            kernel=parse_kernel_block(_block(data, "kernel")),
            contrast=contrast,
            noise=parse_noise_block(_block(data, "noise"), seed, contrast.kappa),
            optimize=optimize,
            phase=phase,
            scan=parse_scan_block(_block(data, "scan")),
            nystrom=parse_nystrom_block(_block(data, "nystrom")),
            circuit=parse_circuit_block(_block(data, "circuit")),
            bench=bench.parse_bench_block(_block(data, "bench")),
            output=parse_output_block(_block(data, "output")),
            raw=data,
        )
    except TypeError as e:
        raise InvalidConfigError(f" Invalid config value: {e}")


# Data acquisition shared by the handlers


def load_observations(config: ExperimentConfig):
    """(X, S, A): observed data plus the sources and mixing when generated."""
    if config.csv_input is not None:
        path, orientation = config.csv_input
        return load_csv(path, orientation), None, None
    if config.sources is None:
        raise InvalidConfigError(" No data: configure a 'sources' block or pass --input.")
    S = sample_sources(config.sources)
    A = config.mixing if config.mixing is not None else np.eye(S.m)
    return mix(S, A), S, A


def _noise_or_none(config, mode=None):
    noise = config.noise
    if noise is None or (noise.eps1 == 0 and noise.eps2 == 0):
        return None
    if mode is not None and noise.mode != mode:
        noise = replace(noise, mode=mode)
    return noise


def build_objective(config: ExperimentConfig, model=None, mode=None):
    """Objective J(Y, W) for the configured contrast and noise."""
    settings = config.contrast
    if settings.kind == "kurtosis":
        return kurtosis_objective()
    noise = _noise_or_none(config, mode)
    if noise is not None:
        if settings.kind == "classical":
            raise InvalidConfigError(" Noise emulation applies to the adapted contrast only.")
        return noisy_objective(noise, config.kernel, settings.eps_trunc, model=model, workers=config.workers)
    return kica_objective(
        settings.kappa,
        config.kernel,
        settings.eps_trunc,
        signed=settings.kind == "classical",
        kappa_raw=settings.kappa_raw,
        workers=config.workers,
    )


# Command handlers; each returns the list of files it wrote.


def handle_gen(config, outdir) -> List[Path]:
    if config.sources is None:
        raise InvalidConfigError(" 'gen' needs a 'sources' block with distributions.")
    S = sample_sources(config.sources)
    return [utils.write_matrix_csv(outdir / "sources.csv", S)]


def handle_mix(config, outdir) -> List[Path]:
    X, S, A = load_observations(config)
    written = [utils.write_matrix_csv(outdir / "mixed.csv", X)]
    if A is not None:
        written.append(utils.write_csv(outdir / "mixing.csv", None, A.tolist()))
    return written


def handle_preprocess(config, outdir) -> List[Path]:
    X, _, _ = load_observations(config)
    Y, model = whiten(X)
    noise = config.noise
    if noise is not None and noise.eps2 > 0:
        model = perturb_whitening(model, noise.eps2, config.seed)
        logger.info(f" Whitening defect ||U^T U - I|| = {whitening_defect(model):.4g}")
    print(f"condition number = {model.mu_M:.12g}")
    return [
        utils.write_matrix_csv(outdir / "whitened.csv", Y),
        utils.write_json(outdir / "whitening.json", model.to_dict()),
    ]


def handle_contrast(config, outdir) -> List[Path]:
    """Contrasts of the data as given (no whitening)."""
    Z, _, _ = load_observations(config)
    settings = config.contrast
    spectra = decompose_all(Z, config.kernel, settings.eps_trunc, full=False, workers=config.workers)
    signed = build_rkappa(spectra, kappa=settings.kappa, kappa_raw=settings.kappa_raw)
    adapted = build_rkappa(spectra, kappa=settings.kappa, signed=False, kappa_raw=settings.kappa_raw)
    det = det_contrast(adapted)
    summary = {
        "d": signed.d,
        "kept": [s.kept for s in spectra],
        "det_adapted": det,
        "det_classical": det_contrast(signed),
        "neg_log_det_classical": neg_log_det(signed),
        "neg_log_det_adapted": neg_log_det(adapted),
        "log_det_classical": log_det(signed)[1],
        "xi": min_eig(adapted),
    }
    print(f"det = {det:.12g}")
    written = [
        utils.write_json(outdir / "contrast.json", summary),
        utils.write_rkappa_csv(outdir / "rkappa.csv", signed),
    ]
    if config.output.dump_gram:
        written += utils.dump_gram(outdir, [gram_pair(Z.row(i), config.kernel) for i in range(Z.m)])
    return written


def handle_scan(config, outdir) -> List[Path]:
    X, _, _ = load_observations(config)
    Y, model = whiten(X)
    gens = parse_generators(config.scan.generators, Y.m)
    objective = build_objective(config, model=None)
    xi_fn = None
    if config.contrast.kind == "adapted":
        xi_fn = xi_objective(config.contrast.kappa, config.kernel, config.contrast.eps_trunc)
    landscape = scan_landscape(Y, gens, config.scan.grid, objective, xi_fn, workers=config.workers)
    header = [f"delta_{a + 1}" for a in range(len(landscape.axes))] + ["J"] + (["xi"] if xi_fn else [])
    written = [utils.write_csv(outdir / "landscape.csv", header, landscape.rows())]
    if config.output.svg:
        written.append(utils.heatmap_svg(outdir / "landscape.svg", landscape, "contrast landscape", "J"))
    print(f"argmin = {', '.join(f'{d:.6g}' for d in landscape.argmin_point)}")
    return written


def handle_optimize(config, outdir) -> List[Path]:
    X, S, A = load_observations(config)
    reference = load_csv(*config.reference) if config.reference is not None else S
    if reference is not None and reference.n_samples != X.n_samples:
        raise InvalidConfigError(
            f" Reference has {reference.n_samples} samples, the observations have {X.n_samples}."
        )
    Y, model = whiten(X)
    mixing = model.inv_sqrt @ A if A is not None else None
    if config.phase == "refine":
        coarse = minimize_stiefel(Y, build_objective(config, mode="general"), config.optimize)
        report = minimize_stiefel(
            Y, build_objective(config, mode="near_independent"), config.optimize, W0=coarse.W_opt, mixing=mixing
        )
    else:
        mode = "general" if config.phase == "coarse" else None
        report = minimize_stiefel(Y, build_objective(config, mode=mode), config.optimize, mixing=mixing)

    recovered = SampleMatrix(report.W_opt @ Y.data)
    summary = {
        "J_opt": report.J_opt,
        "converged": report.converged,
        "restarts_used": report.restarts_used,
        "failed_restarts": report.failed_restarts,
        "amari": report.amari,
        "W_opt": report.W_opt,
    }
    written = [
        utils.write_json(outdir / "optimize.json", summary),
        utils.write_csv(outdir / "W_opt.csv", None, report.W_opt.tolist()),
        utils.write_csv(outdir / "trace.csv", ["iteration", "J"], report.J_trace),
        utils.write_matrix_csv(outdir / "recovered.csv", recovered),
    ]
    if reference is not None:
        C = correlation_matrix(recovered, reference)
        written.append(utils.write_csv(outdir / "correlation.csv", None, C.tolist()))
    if config.output.svg:
        it, J = zip(*report.J_trace)
        written.append(utils.line_svg(outdir / "trace.svg", {"J": (it, J)}, "iteration", "J", "descent trace"))
    if report.amari is not None:
        print(f"amari = {report.amari:.6g}")
    print(f"J = {report.J_opt:.12g}")
    return written


def handle_emulate(config, outdir, draws=5) -> List[Path]:
    """Noisy against noiseless adapted determinant on the whitened data."""
    if config.noise is None:
        raise InvalidConfigError(" 'emulate' needs a 'noise' block or --eps1/--eps2.")
    X, _, _ = load_observations(config)
    _, model = whiten(X)
    rows = []
    for draw in range(draws):
        ev = noisy_evaluation(
            X, config.noise, np.eye(X.m), config.kernel, config.contrast.eps_trunc, model, draw, config.workers
        )
        rows.append([draw, ev.det_noisy, ev.det_exact, ev.relative_error, ev.bound, ev.xi, ev.d, ev.discarded])
    header = ["draw", "det_noisy", "det_exact", "relative_error", "bound", "xi", "d", "discarded"]
    median = float(np.median([r[3] for r in rows]))
    print(f"median relative error = {median:.6g}")
    return [utils.write_csv(outdir / "emulate.csv", header, rows)]


def handle_verify_circuit(config, outdir) -> List[Path]:
    """Block encoding of the Gram matrix of the first 2^n samples of variable 0."""
    layout = config.circuit
    X, _, _ = load_observations(config)
    if X.n_samples < layout.N:
        raise InvalidConfigError(f" Circuit with n={layout.n} needs {layout.N} samples, got {X.n_samples}.")
    z = X.row(0)[: layout.N]
    check = verify_circuit(z, layout, config.kernel)
    summary = {
        "n": layout.n,
        "s": layout.s,
        "qubits": layout.total,
        "max_deviation": check.max_deviation,
        "tolerance": check.tolerance,
        "unitarity_residual": check.unitarity_residual,
        "passed": check.passed,
    }
    written = [utils.write_json(outdir / "circuit.json", summary)]
    print(f"max deviation = {check.max_deviation:.6g}, unitarity residual = {check.unitarity_residual:.3g}")
    if not check.passed:
        raise AcceptanceError(
            f" Block encoding deviates by {check.max_deviation:.3g} (tolerance {check.tolerance:.3g}),"
            f" unitarity residual {check.unitarity_residual:.3g}.",
            written,
        )
    return written


def handle_nystrom(config, outdir) -> List[Path]:
    if config.sources is None or len(config.sources.distributions) < 2:
        raise InvalidConfigError(" 'nystrom' needs a 'sources' block with at least two distributions.")
    settings = config.nystrom
    S = sample_sources(config.sources)
    dist_i, dist_j = config.sources.distributions[:2]
    efs_i = top_eigenfunctions(S.row(0), 0, settings.top, config.kernel)
    efs_j = top_eigenfunctions(S.row(1), 1, settings.top, config.kernel)
    for ef in efs_i + efs_j:
        logger.debug(f" Eigenfunction {ef.index}: mu={ef.mu:.4g} residual={ef.residual():.2e}")
    table = c_d_table(efs_i, efs_j, dist_i, dist_j, settings.n_mc, config.seed)
    rows = [[*e.index, e.C, e.D, e.stderr] for e in table]
    written = [utils.write_csv(outdir / "cd_table.csv", ["i", "k", "j", "l", "C", "D", "stderr"], rows)]
    if settings.n_trials > 0:
        result = coverage_trial(
            settings.F_ij,
            settings.eps2,
            dist_i,
            dist_j,
            config.sources.n_samples,
            settings.n_trials,
            settings.delta,
            config.seed,
            config.kernel,
            settings.n_mc,
            settings.top,
            config.workers,
        )
        fields = ("coverage", "target", "n_trials", "delta", "eps2", "F_ij", "N", "pair", "C", "D", "spread", "skipped")
        written.append(utils.write_json(outdir / "coverage.json", {f: getattr(result, f) for f in fields}))
        print(f"coverage = {result.coverage:.4g}")
    if settings.eps2_values:
        fit = overlap_linearity(settings.eps2_values, dist_i, dist_j, config.sources.n_samples, config.seed, kernel=config.kernel)
        written.append(utils.write_json(outdir / "linearity.json", fit.__dict__))
    return written


def handle_bench(config, outdir) -> List[Path]:
    written, failures = bench.run_suites(config.bench, outdir, config.seed, config.workers, config.output.svg)
    if failures:
        raise AcceptanceError(f" Bench suite(s) failed: {'; '.join(failures)}", written)
    return written


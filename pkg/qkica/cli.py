"""
Command-line entry point. Every command reads an optional YAML/JSON config,
applies flag overrides, writes its results into the output directory and
leaves a manifest there that relaunches the run.
"""
import argparse
import copy
import logging
import sys

from qkica import helper, overwrite, utils
from qkica.errors import AcceptanceError, QkicaError

logger = logging.getLogger(__name__)

COMMANDS = {
    "gen": (helper.handle_gen, "Sample independent sources."),
    "mix": (helper.handle_mix, "Mix sources with the configured mixing matrix."),
    "preprocess": (helper.handle_preprocess, "Center and whiten observations."),
    "contrast": (helper.handle_contrast, "Evaluate det R_kappa and -ln det R_kappa."),
    "scan": (helper.handle_scan, "Evaluate the contrast over a 2-parameter grid."),
    "optimize": (helper.handle_optimize, "Minimize the contrast over rotations."),
    "emulate": (helper.handle_emulate, "Compare noisy and exact determinants."),
    "verify-circuit": (helper.handle_verify_circuit, "Check the Gram block-encoding circuit."),
    "nystrom": (helper.handle_nystrom, "Estimate overlap coefficients C and D."),
    "bench": (helper.handle_bench, "Run acceptance suites."),
}

# flag destination -> (block, key); None block means a top-level key.
OVERRIDES = {
    "seed": (None, "seed"),
    "out": ("output", "dir"),
    "overwrite": ("output", "overwrite"),
    "dump_gram": ("output", "dump_gram"),
    "kappa": ("contrast", "kappa"),
    "eps_trunc": ("contrast", "eps_trunc"),
    "kappa_raw": ("contrast", "kappa_raw"),
    "sigma": ("kernel", "sigma"),
    "eps1": ("noise", "eps1"),
    "eps2": ("noise", "eps2"),
    "mode": ("noise", "mode"),
    "grid": ("scan", "grid"),
    "phase": ("optimize", "phase"),
    "input": ("sources", "csv"),
    "orientation": ("sources", "orientation"),
    "reference": ("sources", "reference"),
    "suite": ("bench", "suite"),
    "quick": ("bench", "quick"),
    "circuit_n": ("circuit", "n"),
    "circuit_s": ("circuit", "s"),
}


def _common_parser():
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument(
        "-l",
        "--log_level",
        default="INFO",
        choices=("CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG"),
        help="The desired log level (default: INFO).",
        type=str.upper,
    )
    parser.add_argument("--config", help="YAML or JSON config file, or a manifest.json to relaunch")
    parser.add_argument("--seed", type=int, help="Seed of every random stream")
    parser.add_argument("--out", help="Output directory (default: results)")
    parser.add_argument("--overwrite", action="store_true", default=None, help="Replace results of a previous run")
    parser.add_argument("--input", help="CSV file with observations instead of generated sources")
    parser.add_argument("--orientation", choices=("rows", "cols"), help="Variables as CSV rows or columns")
    parser.add_argument("--reference", help="CSV of a reference decomposition to correlate recovered components with")
    parser.add_argument("--kappa", type=float, help="Regularization kappa")
    parser.add_argument("--sigma", type=float, help="Gaussian kernel bandwidth")
    parser.add_argument("--eps1", type=float, help="Measurement error budget")
    parser.add_argument("--eps2", type=float, help="Whitening error magnitude")
    parser.add_argument("--eps-trunc", dest="eps_trunc", type=float, help="Spectral truncation threshold")
    parser.add_argument("--grid", help="Landscape grid LO:HI:STEPS")
    parser.add_argument("--mode", choices=("general", "near"), help="Noise budget mode")
    parser.add_argument("--phase", choices=("coarse", "refine"), help="Two-phase noisy optimization")
    parser.add_argument("--kappa-raw", dest="kappa_raw", action="store_true", default=None, help="Use lambda/(lambda+kappa)")
    parser.add_argument("--dump-gram", dest="dump_gram", action="store_true", default=None, help="Write Gram matrices")
    parser.add_argument("--suite", help="Bench suite name or 'all'")
    parser.add_argument("--quick", action="store_true", default=None, help="Reduced bench sizes")
    parser.add_argument("--circuit-n", dest="circuit_n", type=int, help="Index qubits of the circuit")
    parser.add_argument("--circuit-s", dest="circuit_s", type=int, help="Kernel-value qubits of the circuit")
    return parser


def parse_args(argv=None):
    parser = argparse.ArgumentParser(prog="qkica", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", required=True)
    common = _common_parser()
    for name, (_, text) in COMMANDS.items():
        subparsers.add_parser(name, parents=[common], help=text, description=text)
    return parser.parse_args(argv)


def apply_overrides(data, options):
    """Flags override the config file; the merged mapping is what the manifest records."""
    merged = copy.deepcopy(data)
    for dest, (block, key) in OVERRIDES.items():
        value = getattr(options, dest, None)
        if value is None:
            continue
        if block is None:
            merged[key] = value
        else:
            section = merged.get(block) or {}
            if not isinstance(section, dict):
                section = {}
            section[key] = value
            merged[block] = section
    return merged


def run_command(options, argv):
    data = utils.load_config(options.config) if options.config else {}
    config = helper.parse_config(apply_overrides(data, options))
    outdir = config.output.dir
    overwrite.Overwrite(outdir, config.output.overwrite).handle_overwrite()
    handler = COMMANDS[options.command][0]
    logger.info(f" Running '{options.command}' with seed {config.seed}, writing to {outdir}")
    try:
        written = handler(config, outdir)
    except AcceptanceError as e:
        utils.write_manifest(outdir, config.raw, config.seed, argv, e.files)
        raise
    utils.write_manifest(outdir, config.raw, config.seed, argv, written)
    return written


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    options = parse_args(argv)
    logging.basicConfig(level=options.log_level)
    try:
        run_command(options, argv)
    except QkicaError as e:
        logging.error(e)
        sys.exit(e.exit_code)
    return 0


if __name__ == "__main__":
    main()

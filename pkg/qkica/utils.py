"""
Small I/O helpers: config loading, CSV and JSON writers, run manifests and
SVG figures.
"""
import csv
import hashlib
import json
import logging
import platform
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import scipy  # noqa: E402
import yaml  # noqa: E402

from qkica.errors import InvalidConfigError  # noqa: E402

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"

# Fixed salt and no timestamp, so the same figure renders to the same bytes.
plt.rcParams["svg.hashsalt"] = "qkica"
SVG_METADATA = {"Date": None}


def load_config(file_path):
    """
    Read a YAML or JSON config. A run manifest is accepted too; its
    'config' block is returned.
    """
    path = Path(file_path)
    if not path.is_file():
        raise InvalidConfigError(f" Config file '{path}' does not exist.")
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise InvalidConfigError(f" Config file '{path}' is not valid YAML/JSON: {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise InvalidConfigError(f" Config file '{path}' must hold a mapping of blocks.")
    if "config" in data and "config_sha256" in data:
        logger.debug(f" Relaunching from manifest {path}")
        return dict(data["config"])
    return data


def config_hash(config):
    """sha256 of the canonical JSON form of a config."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def versions():
    from qkica import __version__

    return {
        "qkica": __version__,
        "python": platform.python_version(),
        "platform": platform.platform(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
        "pyyaml": yaml.__version__,
    }


def write_manifest(outdir, config, seed, argv, outputs):
    """
    Writes manifest.json; it is itself a config file that relaunches the
    run.
    """
    manifest = {
        "config": config,
        "config_sha256": config_hash(config),
        "seed": seed,
        "argv": list(argv),
        "versions": versions(),
        "outputs": sorted(str(Path(p).name) for p in outputs),
    }
    path = Path(outdir) / MANIFEST
    write_json(path, manifest)
    return path


def read_manifest(outdir):
    path = Path(outdir) / MANIFEST
    if not path.is_file():
        return None
    with open(path, "r") as f:
        return json.load(f)


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows):
    """RFC-4180 CSV with CRLF line ends and round-trip float formatting."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        if header:
            writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    logger.info(f" Wrote {path}")
    return path


def write_json(path, data):
    path = Path(path)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    logger.info(f" Wrote {path}")
    return path


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_matrix_csv(path, S, labels=None):
    """One row per variable, with a leading label column when labels exist."""
    data = np.asarray(getattr(S, "data", S), dtype=float)
    labels = labels if labels is not None else getattr(S, "row_labels", None)
    if labels is None:
        return write_csv(path, None, data.tolist())
    header = ["variable"] + (list(S.sample_labels) if getattr(S, "sample_labels", None) else [])
    rows = [[label] + row for label, row in zip(labels, data.tolist())]
    return write_csv(path, header if len(header) > 1 else None, rows)


def write_rkappa_csv(path, R):
    """Square R_kappa matrix with 'i:k' row and column labels."""
    labels = [f"{i}:{k}" for i, k in R.index]
    rows = [[label] + list(row) for label, row in zip(labels, R.data.tolist())]
    return write_csv(path, [""] + labels, rows)


def dump_gram(outdir, pairs):
    """raw and centered Gram matrix of every variable as CSV."""
    written = []
    for i, pair in enumerate(pairs):
        written.append(write_csv(Path(outdir) / f"gram_raw_{i}.csv", None, pair.raw.tolist()))
        written.append(write_csv(Path(outdir) / f"gram_centered_{i}.csv", None, pair.centered.tolist()))
    return written


def heatmap_svg(path, landscape, title="", label="J"):
    """Heatmap of a 2-D landscape with the argmin marked."""
    if landscape.values.ndim != 2:
        return line_svg(path, {label: (landscape.axes[0], landscape.values)}, "delta_1", label, title)
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    d1, d2 = landscape.axes
    values = np.where(np.isfinite(landscape.values), landscape.values, np.nan)
    mesh = ax.pcolormesh(d2, d1, values, shading="nearest", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label=label)
    a1, a2 = landscape.argmin_point
    ax.plot([a2], [a1], marker="x", color="red")
    ax.set_xlabel("delta_2")
    ax.set_ylabel("delta_1")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    logger.info(f" Wrote {path}")
    return Path(path)


def line_svg(path, series, xlabel, ylabel, title="", logx=False, logy=False):
    """One polyline per entry of series: label -> (x, y)."""
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    for label, (x, y) in series.items():
        ax.plot(x, y, marker="o", label=label)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    logger.info(f" Wrote {path}")
    return Path(path)

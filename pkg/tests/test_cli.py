import json

import pytest

from qkica import cli, utils
from qkica.errors import AcceptanceError, InvalidConfigError
from qkica.helper import parse_config, resolve_workers


def write_config(tmp_path, text, name="config.yml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def exit_code(argv):
    with pytest.raises(SystemExit) as e:
        cli.main(argv)
    return e.value.code


def test_gen_is_reproducible_and_relaunchable(tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    cli.main(["gen", "--seed", "3", "--out", str(first)])
    manifest = utils.read_manifest(first)
    assert manifest["outputs"] == ["sources.csv"]
    assert manifest["seed"] == 3
    assert manifest["config_sha256"] == utils.config_hash(manifest["config"])

    cli.main(["gen", "--config", str(first / "manifest.json"), "--out", str(second)])
    assert (first / "sources.csv").read_bytes() == (second / "sources.csv").read_bytes()


def test_seed_is_required(tmp_path):
    assert exit_code(["gen", "--out", str(tmp_path / "out")]) == 1


def test_unknown_block(tmp_path):
    config = write_config(tmp_path, "seed: 1\nplotting: {}\n")
    assert exit_code(["gen", "--config", str(config), "--out", str(tmp_path / "out")]) == 1


def test_unknown_key(tmp_path):
    config = write_config(tmp_path, "seed: 1\ncontrast:\n  kapa: 0.2\n")
    assert exit_code(["contrast", "--config", str(config), "--out", str(tmp_path / "out")]) == 1


def test_existing_results_need_overwrite(tmp_path):
    out = tmp_path / "out"
    cli.main(["gen", "--seed", "1", "--out", str(out)])
    assert exit_code(["gen", "--seed", "2", "--out", str(out)]) == 1
    cli.main(["gen", "--seed", "2", "--out", str(out), "--overwrite"])
    assert utils.read_manifest(out)["seed"] == 2


def test_contrast_of_a_single_variable(tmp_path, capsys):
    config = write_config(tmp_path, "seed: 4\nsources:\n  distributions: [uniform]\n  n_samples: 200\n")
    cli.main(["contrast", "--config", str(config), "--out", str(tmp_path / "out"), "--eps-trunc", "0.05"])
    assert "det = 1\n" in capsys.readouterr().out
    summary = json.loads((tmp_path / "out" / "contrast.json").read_text())
    assert summary["det_classical"] == pytest.approx(1.0)


def test_scan_writes_full_grid(tmp_path):
    config = write_config(
        tmp_path,
        "seed: 2\n"
        "sources:\n  distributions: [uniform, laplace]\n  n_samples: 60\n"
        "contrast:\n  eps_trunc: 0.05\n"
        "scan:\n  grid: '-0.78:0.78:21'\n",
    )
    out = tmp_path / "out"
    cli.main(["scan", "--config", str(config), "--out", str(out)])
    lines = (out / "landscape.csv").read_bytes().split(b"\r\n")
    assert lines[0] == b"delta_1,delta_2,J,xi"
    assert len([line for line in lines[1:] if line]) == 441
    assert (out / "landscape.svg").is_file()


def test_emulate_is_deterministic(tmp_path):
    config = write_config(
        tmp_path,
        "seed: 5\n"
        "sources:\n  n_samples: 200\n"
        "contrast:\n  eps_trunc: 0.05\n"
        "noise:\n  eps1: 0.002\n",
    )
    for name in ("a", "b"):
        cli.main(["emulate", "--config", str(config), "--out", str(tmp_path / name)])
    assert (tmp_path / "a" / "emulate.csv").read_bytes() == (tmp_path / "b" / "emulate.csv").read_bytes()


def test_optimize_outputs(tmp_path, capsys):
    config = write_config(
        tmp_path,
        "seed: 6\n"
        "sources:\n  n_samples: 200\n"
        "mixing:\n  random_rotation: true\n"
        "contrast:\n  eps_trunc: 0.1\n"
        "optimize:\n  restarts: 1\n  max_iters: 10\n",
    )
    out = tmp_path / "out"
    cli.main(["optimize", "--config", str(config), "--out", str(out)])
    for name in ("optimize.json", "W_opt.csv", "trace.csv", "recovered.csv", "correlation.csv", "trace.svg"):
        assert (out / name).is_file()
    summary = json.loads((out / "optimize.json").read_text())
    assert summary["restarts_used"] == 1
    assert "amari = " in capsys.readouterr().out


def test_optimize_correlates_with_reference_csv(tmp_path):
    config = write_config(tmp_path, "seed: 5\nsources:\n  n_samples: 200\noptimize:\n  restarts: 1\n  max_iters: 10\n")
    cli.main(["gen", "--config", str(config), "--out", str(tmp_path / "gen")])
    sources_csv = str(tmp_path / "gen" / "sources.csv")
    out = tmp_path / "out"
    argv = ["optimize", "--config", str(config), "--input", sources_csv, "--reference", sources_csv, "--out", str(out)]
    cli.main(argv + ["--eps-trunc", "0.1"])
    rows = [[float(v) for v in line.split(",")] for line in (out / "correlation.csv").read_text().splitlines() if line]
    assert len(rows) == 2 and all(len(r) == 2 for r in rows)
    assert all(max(abs(v) for v in r) >= 0.9 for r in rows)


def test_reference_with_other_sample_count(tmp_path):
    config = write_config(tmp_path, "seed: 5\nsources:\n  n_samples: 200\n")
    short = write_config(tmp_path, "seed: 5\nsources:\n  n_samples: 150\n", name="short.yml")
    cli.main(["gen", "--config", str(config), "--out", str(tmp_path / "gen")])
    cli.main(["gen", "--config", str(short), "--out", str(tmp_path / "short")])
    argv = ["optimize", "--seed", "5", "--input", str(tmp_path / "gen" / "sources.csv"), "--out", str(tmp_path / "out")]
    assert exit_code(argv + ["--reference", str(tmp_path / "short" / "sources.csv")]) == 1
    assert exit_code(argv + ["--reference", str(tmp_path / "missing.csv")]) == 1


def test_verify_circuit(tmp_path):
    config = write_config(tmp_path, "seed: 1\nsources:\n  n_samples: 10\ncircuit:\n  n: 1\n  s: 8\n")
    cli.main(["verify-circuit", "--config", str(config), "--out", str(tmp_path / "out")])
    summary = json.loads((tmp_path / "out" / "circuit.json").read_text())
    assert summary["passed"]
    assert summary["qubits"] == 12


def test_nystrom_table(tmp_path):
    config = write_config(
        tmp_path,
        "seed: 3\nsources:\n  n_samples: 200\nnystrom:\n  n_mc: 500\n  top: 2\n",
    )
    out = tmp_path / "out"
    cli.main(["nystrom", "--config", str(config), "--out", str(out)])
    lines = [line for line in (out / "cd_table.csv").read_text().splitlines() if line]
    assert lines[0] == "i,k,j,l,C,D,stderr"
    assert len(lines) == 5


def test_singular_input_exits_with_numerical_code(tmp_path):
    data = write_config(tmp_path, "1,2,3,4\n2,4,6,8\n", name="data.csv")
    assert exit_code(["preprocess", "--seed", "1", "--input", str(data), "--out", str(tmp_path / "out")]) == 2


def test_bench_suite(tmp_path):
    out = tmp_path / "out"
    cli.main(["bench", "--seed", "1", "--suite", "detpert", "--quick", "--out", str(out)])
    assert (out / "detpert.csv").is_file()
    assert "detpert,true" in (out / "bench_summary.csv").read_text()


def test_unknown_bench_suite(tmp_path):
    assert exit_code(["bench", "--seed", "1", "--suite", "fig99", "--out", str(tmp_path / "out")]) == 1


def test_acceptance_failure_keeps_manifest(tmp_path, monkeypatch):
    out = tmp_path / "out"

    def failing(config, outdir):
        path = utils.write_csv(outdir / "partial.csv", ["x"], [[1]])
        raise AcceptanceError(" threshold missed", [path])

    monkeypatch.setitem(cli.COMMANDS, "gen", (failing, "fails"))
    assert exit_code(["gen", "--seed", "1", "--out", str(out)]) == 3
    assert utils.read_manifest(out)["outputs"] == ["partial.csv"]


def test_worker_resolution(monkeypatch):
    monkeypatch.setenv("KICA_THREADS", "3")
    assert resolve_workers() == 3
    assert resolve_workers(2) == 2
    monkeypatch.setenv("KICA_THREADS", "many")
    with pytest.raises(InvalidConfigError):
        resolve_workers()
    with pytest.raises(InvalidConfigError):
        resolve_workers(0)


def test_parse_config_defaults():
    config = parse_config({"seed": 9})
    assert config.sources.n_samples == 1000
    assert [d.name for d in config.sources.distributions] == ["uniform", "laplace"]
    assert config.noise is None
    assert config.circuit.n == 2
    with pytest.raises(InvalidConfigError, match="64-bit"):
        parse_config({"seed": -1})

import csv

import pytest

from qkica.bench import (
    SUITES,
    BenchContext,
    BenchSettings,
    parse_bench_block,
    run_suites,
    suite_circuit,
    suite_invariants,
    suite_norms,
    suite_psi,
    suite_xi,
)
from qkica.errors import InvalidConfigError


def test_parse_bench_block():
    assert parse_bench_block({}) == BenchSettings("all", False)
    assert parse_bench_block({"suite": "psi", "quick": True}).quick
    with pytest.raises(InvalidConfigError, match="suite"):
        parse_bench_block({"suite": "nope"})
    with pytest.raises(InvalidConfigError, match="Unknown keys"):
        parse_bench_block({"size": 3})


def test_every_acceptance_suite_is_registered():
    expected = {"fig4", "fig6b", "psi", "norms", "xi", "thm1", "circuit", "detpert", "gauss", "cor6", "amari", "invariants"}
    assert set(SUITES) == expected


def test_circuit_suite(tmp_path):
    result = suite_circuit(BenchContext(tmp_path, seed=3, quick=True))
    assert result.passed, result.message
    assert (tmp_path / "circuit.csv").is_file()


def test_run_suites_reports_summary(tmp_path):
    files, failures = run_suites(BenchSettings("detpert", True), tmp_path, seed=2, svg=False)
    assert failures == []
    assert [f.name for f in files] == ["detpert.csv", "bench_summary.csv"]


def _read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_norms_suite_grid(tmp_path):
    suite_norms(BenchContext(tmp_path, seed=4, quick=True, svg=False))
    rows = _read_rows(tmp_path / "norms.csv")
    assert len(rows) == 2 * 4
    assert all(float(r["K_norm_0"]) > 0 and float(r["psi_norm"]) >= 0 for r in rows)


def test_xi_suite_lowest_values(tmp_path):
    suite_xi(BenchContext(tmp_path, seed=4, quick=True, svg=False))
    rows = _read_rows(tmp_path / "xi.csv")
    assert [int(r["N"]) for r in rows] == [200, 400]
    assert all(0.0 < float(r["xi_lowest"]) <= float(r["xi_median"]) <= 1.0 for r in rows)


@pytest.mark.slow
def test_invariants_suite_at_full_size(tmp_path):
    result = suite_invariants(BenchContext(tmp_path, seed=1, svg=False))
    assert result.passed, result.message


@pytest.mark.slow
def test_psi_suite_shares_draws_across_delta(tmp_path):
    result = suite_psi(BenchContext(tmp_path, seed=4, quick=True, svg=False))
    rows = _read_rows(tmp_path / "psi.csv")
    assert len(rows) == 3 * 4
    seeds = {int(r["N"]): int(r["seeds"]) for r in rows}
    assert seeds == {256: 48, 512: 24, 1024: 12}
    assert result.message.startswith("intercepts [")

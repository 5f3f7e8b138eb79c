from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from kserver.cli import EXIT_CERT, EXIT_OK, EXIT_STAGE, main
from kserver.hst import load_tree, save_tree, balanced_hst

FIXTURES = Path(__file__).parent / "fixtures"


def _json(capsys):
    return json.loads(capsys.readouterr().out)


def test_embed_reduce_serve_certify_round(tmp_path, capsys):
    tree = tmp_path / "t.json"
    red = tmp_path / "r.json"
    trace = tmp_path / "s.json"
    assert main(["embed", "--metric", str(FIXTURES / "line4.json"), "--seed", "7", "--out", str(tree)]) == EXIT_OK
    assert _json(capsys)["n"] == 4
    assert main(["reduce", "--tree", str(tree), "--out", str(red)]) == EXIT_OK
    assert _json(capsys)["report"]["depth"] <= 3
    assert load_tree(str(red)).n == 4
    args = ["serve", "--tree", str(tree), "--k", "3", "--mode", "exact", "--init", "0,1,2", "--requests", "3,0,3,1"]
    assert main(args + ["--out", str(trace)]) == EXIT_OK
    doc = json.loads(trace.read_text())
    assert doc["requests"] == [3, 0, 3, 1] and len(doc["u_history"]) == 5
    assert main(["certify", "--trace", str(trace)]) == EXIT_OK
    rep = _json(capsys)
    assert rep["certificate"]["passed"] and rep["feasible"] and rep["replay_drift"] == 0.0
    rows = tmp_path / "rounded.csv"
    assert main(["round", "--trace", str(trace), "--seeds", "5", "--out", str(rows)]) == EXIT_OK
    with open(rows) as fh:
        assert len(list(csv.DictReader(fh))) == 5


def test_certify_failure_exit(tmp_path, capsys):
    # weighted runs on this tree break dual tightness, which certify reports
    tree = tmp_path / "t.json"
    save_tree(balanced_hst(2, 2, sigma=8), str(tree))
    trace = tmp_path / "s.json"
    main(["serve", "--tree", str(tree), "--k", "2", "--requests", "2,3,0,1,2,3", "--out", str(trace)])
    code = main(["certify", "--trace", str(trace)])
    rep = _json(capsys)
    assert rep["certificate"]["passed"]
    assert any(v.startswith("tightness") for v in rep["dual_violations"])
    assert code == EXIT_CERT


def test_opt_and_baseline(capsys):
    common = ["--metric", str(FIXTURES / "line4.json"), "--k", "1", "--init", "0", "--requests", "3"]
    assert main(["opt", *common]) == EXIT_OK
    assert _json(capsys)["cost"] == 3.0
    assert main(["opt", *common, "--method", "dp"]) == EXIT_OK
    assert _json(capsys)["cost"] == 3.0
    for algo in ("dc", "wfa", "greedy"):
        assert main(["baseline", *common, "--algo", algo]) == EXIT_OK
        assert _json(capsys)["total"] == 3.0


def test_bench_with_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(
        json.dumps(
            {
                "metric": {"kind": "uniform", "n": 3},
                "k": 2,
                "reduce": False,
                "mode": "exact",
                "M": 6,
                "repetitions": 2,
                "rounding_samples": 2,
                "generator": "round_robin_lower_bound",
            }
        )
    )
    out = tmp_path / "rows.csv"
    full = tmp_path / "full.json"
    assert main(["bench", "--config", str(cfg), "--out", str(out), "--json", str(full)]) == EXIT_OK
    assert _json(capsys)["runs"] == 2
    assert out.exists() and json.loads(full.read_text())["rows"][1]["seed"] == 1


def test_config_supplies_flags(tmp_path, capsys):
    cfg = tmp_path / "opt.json"
    cfg.write_text(json.dumps({"k": 1, "initial": [0], "requests": [3, 0]}))
    assert main(["opt", "--metric", str(FIXTURES / "line4.json"), "--config", str(cfg)]) == EXIT_OK
    assert _json(capsys)["cost"] == 6.0


@pytest.mark.parametrize(
    "argv",
    [
        ["serve", "--tree", "missing.json", "--k", "2"],
        ["opt", "--k", "2"],
        ["bench", "--kind", "line", "--n", "3", "--k", "3"],
    ],
)
def test_stage_errors_exit_2(argv, capsys):
    assert main(argv) == EXIT_STAGE
    assert "error" in capsys.readouterr().err

import json

import pytest

from conformal_stop.calibrate import GridMode, build_grid
from conformal_stop.cli import UsageError, main, parse_epsilons
from conformal_stop.harness import read_report
from conformal_stop.signals import SignalSpec
from conformal_stop.trajectory import ingest

from oracles import brute_force_calibrate


@pytest.fixture
def pop(tmp_path):
    path = tmp_path / "pop.jsonl"
    rc = main(["generate", "--population", "120", "--solvable-fraction", "0.5", "--seed", "1",
               "--out", str(path)])
    assert rc == 0
    return path


def test_generate_writes_population(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    args = ["generate", "--population", "1000", "--solvable-fraction", "0.25", "--seed", "1"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert len(a.read_text().splitlines()) == 1000
    assert a.read_bytes() == b.read_bytes()
    resolved = json.loads((tmp_path / "a.jsonl.config.json").read_text())
    assert resolved["solvable_fraction"] == 0.25


def test_generate_invalid_fraction(tmp_path, capsys):
    rc = main(["generate", "--solvable-fraction", "1.5", "--seed", "1", "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "solvable_fraction" in capsys.readouterr().err


def test_missing_input_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    rc = main(["sweep", "--in", str(missing), "--seed", "1", "--out", str(tmp_path / "r.csv")])
    assert rc == 1
    assert str(missing) in capsys.readouterr().err


def test_ingest_check(pop, capsys):
    assert main(["ingest-check", "--in", str(pop)]) == 0
    assert "trajectories: 120" in capsys.readouterr().out


def test_calibrate_infeasible_exit_code(pop, tmp_path):
    rc = main(["calibrate", "--in", str(pop), "--epsilon", "0", "--correction", "ucb",
               "--out", str(tmp_path / "c.jsonl")])
    assert rc == 3
    rec = json.loads((tmp_path / "c.jsonl").read_text())
    assert rec["selected"] is None


def test_calibrate_dual_reports_both_stages(pop, tmp_path):
    out = tmp_path / "d.jsonl"
    rc = main(["calibrate", "--in", str(pop), "--eps-plus", "0.1", "--eps-minus", "0.1",
               "--delta", "0.1", "--out", str(out)])
    stages = [json.loads(l)["stage"] for l in out.read_text().splitlines()]
    assert rc in (0, 3)
    assert stages == ["upper", "lower"]
    rc = main(["calibrate", "--in", str(pop), "--eps-plus", "0.1", "--eps-minus", "0.5",
               "--delta", "0.1", "--out", str(out)])
    recs = [json.loads(l) for l in out.read_text().splitlines()]
    assert rc == 0
    assert recs[1]["fixed_upper"] == recs[0]["selected"]["parameter"]


@pytest.mark.parametrize("correction", ["naive", "ucb", "ucb-union"])
def test_calibrate_matches_oracle(pop, tmp_path, correction):
    out = tmp_path / "c.jsonl"
    rc = main(["calibrate", "--in", str(pop), "--epsilon", "0.3", "--correction", correction,
               "--grid", "uniform:30", "--delta", "0.1", "--out", str(out)])
    rec = json.loads(out.read_text())
    ds = ingest(pop)
    grid = build_grid(ds, [SignalSpec("confidence")], GridMode("uniform", 30))
    want, _ = brute_force_calibrate(ds, grid.per_signal, "upper", 0.3,
                                    correction.replace("-", "_"), 0.1)
    assert rc == 0 and want is not None
    assert (rec["selected"]["signal"], rec["selected"]["parameter"]) == want


def test_config_file_then_cli_override(pop, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("epsilon: 0.0\ncorrection: naive\ndelta: 0.2\n")
    out = tmp_path / "c.jsonl"
    # config alone: naive at epsilon 0 may or may not be feasible; the override must win
    assert main(["calibrate", "--config", str(cfg), "--in", str(pop), "--epsilon", "0.5",
                 "--out", str(out)]) == 0
    resolved = json.loads((tmp_path / "c.jsonl.config.json").read_text())
    assert resolved["epsilon"] == 0.5 and resolved["correction"] == "naive" and resolved["delta"] == 0.2
    assert json.loads(out.read_text())["epsilon"] == 0.5


def test_sweep_row_count_and_summary(pop, tmp_path, capsys):
    out = tmp_path / "r.csv"
    rc = main(["sweep", "--in", str(pop), "--seed", "2", "--splits", "3", "--validation-size", "20",
               "--epsilons", "0:1:0.1", "--out", str(out), "--workers", "1"])
    assert rc == 0
    rows = read_report(out)
    assert len(rows) == 11 * 3 * 2
    manifest = json.loads((tmp_path / "r.csv.manifest.jsonl").read_text())
    assert manifest["rows"] == len(rows)
    summary = tmp_path / "s.tsv"
    assert main(["report-summary", "--in", str(out), "--out", str(summary)]) == 0
    assert len(summary.read_text().splitlines()) == 1 + 11 * 2


def test_sweep_is_byte_identical(pop, tmp_path):
    args = ["sweep", "--in", str(pop), "--seed", "2", "--splits", "2", "--validation-size", "20",
            "--epsilons", "0.1,0.5", "--mode", "dual"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b), "--workers", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_sweep_shift_ablation(pop, tmp_path):
    other = tmp_path / "other.jsonl"
    main(["generate", "--population", "60", "--seed", "5", "--out", str(other)])
    out = tmp_path / "r.csv"
    rc = main(["sweep", "--in", str(pop), "--test-in", str(other), "--seed", "1", "--splits", "2",
               "--epsilons", "0.2", "--mode", "lower", "--out", str(out)])
    assert rc == 0 and len(read_report(out)) == 4


def test_parse_epsilons():
    eps = parse_epsilons("0:1:0.01")
    assert len(eps) == 101 and eps[0] == 0.0 and eps[-1] == 1.0 and eps[37] == 0.37
    assert parse_epsilons("0.1,0.2") == [0.1, 0.2]
    with pytest.raises(UsageError):
        parse_epsilons("0:1:0")

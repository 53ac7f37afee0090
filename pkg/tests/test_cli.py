import json
import subprocess
import sys
from dataclasses import replace

import pytest

from momentbound.cli import main
from momentbound.problem import MomentBound, Query, load_problem, save_problem


@pytest.fixture
def coarse(example1, tmp_path):
    """Example 1 with a 3-point grid and two moment queries."""
    queries = tuple(Query("moment", 2, f"nu{m}_t{k}", time_index=k, exponents=(m, 0))
                    for k in range(3) for m in (1, 2))
    p = replace(example1, times=(0.0, 0.5, 1.0), queries=queries, name="coarse")
    path = tmp_path / "coarse.json"
    save_problem(p, path)
    return path


def test_bound_moments_writes_outputs(coarse, tmp_path):
    out = tmp_path / "out"
    assert main(["bound-moments", str(coarse), "--out", str(out), "--order", "1"]) == 0
    rows = (out / "results.csv").read_text().splitlines()
    assert len(rows) == 1 + 6
    payload = json.loads((out / "results.json").read_text())
    assert payload["config"]["order"] == 1 and payload["config"]["subcommand"] == "bound-moments"
    assert payload["invalidated"] == []
    script = (out / "plot_moments.py").read_text()
    compile(script, "plot_moments.py", "exec")


def test_order_override_narrows(coarse, tmp_path):
    widths = {}
    for r in (1, 2):
        out = tmp_path / f"r{r}"
        assert main(["bound-moments", str(coarse), "--out", str(out), "--order", str(r)]) == 0
        res = json.loads((out / "results.json").read_text())["results"]
        widths[r] = [q["upper"] - q["lower"] for q in res]
    assert all(w2 <= w1 + 1e-6 for w1, w2 in zip(widths[1], widths[2]))


def test_deterministic_csv(coarse, tmp_path):
    texts = []
    for run in range(2):
        out = tmp_path / f"run{run}"
        main(["bound-moments", str(coarse), "--out", str(out), "--order", "1", "--no-timing"])
        texts.append((out / "results.csv").read_bytes())
    assert texts[0] == texts[1]


def test_missing_file_exit_1(tmp_path, capsys):
    assert main(["bound-moments", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    assert "no such file" in capsys.readouterr().err


def test_invalid_problem_exit_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"states": ["x"], "field": ["x +"], "box": {"x": [0, 1]}, "times": [0]}))
    assert main(["validate", str(bad), "--out", str(tmp_path)]) == 1


def test_bad_order_exit_1(coarse, tmp_path):
    assert main(["bound-moments", str(coarse), "--out", str(tmp_path), "--order", "0"]) == 1


def test_validate_exit_codes(coarse, tmp_path):
    assert main(["validate", str(coarse), "--out", str(tmp_path / "ok"), "--order", "2"]) == 0
    assert (tmp_path / "ok" / "verdict.json").exists()
    p = load_problem(coarse)
    bad = tmp_path / "bad.json"
    save_problem(replace(p, moments=(MomentBound(2, (1, 0), 0.9, 1.0),)), bad)
    assert main(["validate", str(bad), "--out", str(tmp_path / "no"), "--order", "3"]) == 3
    cert = json.loads((tmp_path / "no" / "certificate.json").read_text())
    assert cert["outcome"] == "invalidated" and cert["margin"] >= 1e-6


def test_validate_absurd_tolerance_reports(coarse, tmp_path):
    code = main(["validate", str(coarse), "--out", str(tmp_path), "--order", "1",
                 "--tol-feas", "0.5", "--tol-gap", "0.5"])
    assert code in (0, 4)


def test_env_override(coarse, tmp_path, monkeypatch):
    monkeypatch.setenv("MOMENTBOUND_ORDER", "1")
    out = tmp_path / "env"
    assert main(["bound-moments", str(coarse), "--out", str(out)]) == 0
    assert json.loads((out / "results.json").read_text())["config"]["order"] == 1


def test_export_sdpa_counts(coarse, tmp_path):
    out = tmp_path / "one"
    assert main(["export-sdpa", str(coarse), "--out", str(out), "--order", "1", "--query", "nu1_t2"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["nu1_t2_max.dat-s", "nu1_t2_min.dat-s"]
    out = tmp_path / "all"
    assert main(["export-sdpa", str(coarse), "--out", str(out), "--order", "1"]) == 0
    assert len(list(out.iterdir())) == 12


def test_export_sdpa_no_queries(example1, tmp_path, capsys):
    path = tmp_path / "none.json"
    save_problem(replace(example1, queries=()), path)
    out = tmp_path / "empty"
    assert main(["export-sdpa", str(path), "--out", str(out)]) == 0
    assert not out.exists() or not list(out.iterdir())


def test_oracle_and_mass_pipeline(example2, tmp_path):
    small = replace(example2, partition=replace(example2.partition), queries=())
    from momentbound.problem import Partition
    part = Partition.from_grid(0, (0, 2), (2, 2), ((0, 1), (0, 1)))
    small = replace(small, partition=part)
    src = tmp_path / "ex2.json"
    save_problem(small, src)
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["oracle", str(src), "--out", str(out), "--samples", "400", "--seed", "3",
                     "--degree", "2", "--marginal"]) == 0
        outs.append(out)
    for name in ("moments.json", "masses.csv", "problem_with_data.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    fed = load_problem(outs[0] / "problem_with_data.json")
    assert len(fed.moments) == 6
    out = tmp_path / "mass"
    assert main(["bound-mass", str(outs[0] / "problem_with_data.json"), "--out", str(out), "--order", "1"]) == 0
    grid = (out / "mass_grid.csv").read_text().splitlines()
    assert grid[0] == "cell,x1_lo,x1_hi,x3_lo,x3_hi,lower,upper" and len(grid) == 5
    compile((out / "plot_mass.py").read_text(), "plot_mass.py", "exec")


def test_oracle_slack_zero_pins(example2, tmp_path):
    src = tmp_path / "ex2.json"
    save_problem(replace(example2, queries=()), src)
    out = tmp_path / "o"
    assert main(["oracle", str(src), "--out", str(out), "--samples", "50", "--slack", "0",
                 "--degree", "1"]) == 0
    data = json.loads((out / "moments.json").read_text())["moments"]
    assert all(m["lower"] == m["upper"] for m in data)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "momentbound", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "momentbound" in proc.stdout

import json
import math

import numpy as np
import pytest

from momentbound.poly import parse_polynomial
from momentbound.problem import (EstimationProblem, Partition, ProblemError, Query, load_problem,
                                 problem_from_dict, problem_to_dict, save_problem, validate)


def base(**over):
    d = {"states": ["x1", "x2"], "field": ["-x1*x2", "0"], "box": {"x1": [0, 1], "x2": [0, 1]},
         "times": [0, 0.5, 1.0]}
    d.update(over)
    return d


def errors(problem):
    return [d for d in validate(problem) if d.level == "error"]


def test_example1_is_valid(example1):
    assert errors(example1) == []
    assert example1.n_x == 2 and example1.n_times == 11
    assert example1.oracle.pinned == frozenset({0, 1})
    assert len(example1.queries) == 22


def test_example2_has_no_diagnostics(example2):
    assert validate(example2) == []
    assert example2.partition.n_cells == 64
    assert len(example2.moments) == 20
    assert all(q.kind == "mass" for q in example2.queries)


def test_grid_not_increasing():
    with pytest.raises(ProblemError, match="grid not increasing"):
        problem_from_dict(base(times=[0, 0.5, 0.3]))


def test_moment_lower_above_upper():
    bad = base(moments=[{"time_index": 1, "exponents": [1, 0], "lower": 0.6, "upper": 0.5}])
    with pytest.raises(ProblemError, match="exceeds upper"):
        problem_from_dict(bad)


def test_unbounded_support_warns():
    p = problem_from_dict(base(box={"x1": [0, 1], "x2": ["-inf", "inf"]}))
    warnings = [d for d in validate(p) if d.level == "warning"]
    assert any("unbounded support" in d.message for d in warnings)


def test_overlapping_cells():
    cells = [{"x1": [0, 0.6], "x2": [0, 1]}, {"x1": [0.5, 1], "x2": [0, 1]}]
    with pytest.raises(ProblemError, match="overlap"):
        problem_from_dict(base(partition={"states": ["x1", "x2"], "cells": cells}))


def test_bad_polynomial_reports_path():
    with pytest.raises(ProblemError) as info:
        problem_from_dict(base(field=["-x1*x2", "x1 + + x2"]))
    assert "field[1]" in str(info.value)


def test_missing_file(tmp_path):
    with pytest.raises((ProblemError, OSError)):
        load_problem(tmp_path / "nope.json")


def test_json_roundtrip(example1, example2, tmp_path):
    for p in (example1, example2):
        path = tmp_path / f"{p.name}.json"
        save_problem(p, path)
        q = load_problem(path)
        assert problem_to_dict(q) == problem_to_dict(p)
        assert q.system.f == p.system.f
        assert q.partition == p.partition


def test_global_support_and_inf_bounds():
    d = base(support=[{"time_index": None, "inequalities": ["1 - x1 - x2"]},
                      {"time_index": 2, "inequalities": ["x1 - 0.1"]}],
             moments=[{"time_index": 2, "exponents": [0, 1], "lower": "-inf", "upper": 0.5}])
    p = problem_from_dict(d)
    assert parse_polynomial("1 - x1 - x2", p.names) in p.global_set().inequalities
    assert p.support_at(2).inequalities == (parse_polynomial("x1 - 0.1", p.names),)
    assert p.moments[0].lower == -math.inf


def test_with_time_inserts_point():
    d = base(support=[{"time_index": 2, "inequalities": ["x1"]}],
             moments=[{"time_index": 1, "exponents": [1, 0], "lower": 0, "upper": 1}])
    p = problem_from_dict(d)
    q, k = p.with_time(0.25)
    assert k == 1 and q.times == (0.0, 0.25, 0.5, 1.0)
    assert q.moments[0].time_index == 2
    assert set(q.supports) == {3}
    same, k0 = p.with_time(0.5)
    assert same is p and k0 == 1


def test_mass_query_expands_per_cell():
    d = base(partition={"states": ["x1"], "grid": [3]},
             queries=[{"id": "F", "kind": "mass", "cell": "all", "order": 1}])
    p = problem_from_dict(d)
    assert [q.id for q in p.queries] == ["F[0]", "F[1]", "F[2]"]
    assert [q.cell for q in p.queries] == [0, 1, 2]


def test_partition_grid_order_and_locate():
    part = Partition.from_grid(0, (0, 1), (2, 3), ((0.0, 1.0), (0.0, 1.0)))
    assert part.n_cells == 6
    # the first listed state varies slowest
    assert part.cells[1] == ((0.0, 0.5), (1 / 3, 2 / 3))
    assert part.cell_of((0.7, 0.9)) == 5
    X = np.array([[0.0, 0.0], [1.0, 1.0], [0.5, 0.5], [1.5, 0.2]])
    assert part.locate(X).tolist() == [0, 5, 4, -1]
    assert part.covers_bounds() and not part.overlaps()


def test_query_validation():
    p = problem_from_dict(base())
    bad = EstimationProblem(p.system, p.box, p.times,
                            queries=(Query("moment", 1, "q", time_index=0, exponents=(3, 0)),
                                     Query("mass", 1, "m", cell=0)))
    msgs = [d.message for d in errors(bad)]
    assert any("exceeds 2*order" in m for m in msgs)
    assert any("without a partition" in m for m in msgs)


def test_reserved_time_name():
    with pytest.raises(ProblemError):
        problem_from_dict(base(states=["t", "x2"], field=["0", "0"], box={"t": [0, 1], "x2": [0, 1]}))


def test_file_is_plain_json(data_dir):
    raw = json.loads((data_dir / "example1.json").read_text())
    assert raw["field"] == ["-x1*x2", "0"]

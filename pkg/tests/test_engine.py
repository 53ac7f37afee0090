import math
from dataclasses import replace

import pytest

from momentbound.conic import SolverSettings
from momentbound.engine import (CSV_COLUMNS, INVALIDATED, NOT_INVALIDATED, bound_mass, bound_moment,
                                check_consistency, run_queries)
from momentbound.oracle import analytic_example1
from momentbound.problem import MomentBound, Query, problem_from_dict


def small_example1(example1, n=3):
    """Example 1 on a coarse grid, which keeps solves fast."""
    times = tuple(i / (n - 1) for i in range(n))
    return replace(example1, times=times, queries=())


def test_pinned_moment_at_time_zero(example1):
    res = bound_moment(small_example1(example1), 0, (1, 0), 2)
    assert 0.5 - 1e-6 <= res.lower <= res.upper <= 0.5 + 1e-6


def test_enclosure_coarse_grid(example1):
    p = small_example1(example1)
    for exps, idx in (((1, 0), 0), ((2, 0), 1)):
        res = bound_moment(p, 2, exps, 2)
        truth = analytic_example1(1.0)[idx]
        assert res.lower - 1e-6 <= truth <= res.upper + 1e-6
        assert res.status_min in ("optimal", "inaccurate")


def test_bound_moment_preconditions(example1):
    p = small_example1(example1)
    with pytest.raises(ValueError):
        bound_moment(p, 1, (5, 0), 2)
    with pytest.raises(ValueError):
        bound_moment(p, 1, (1,), 2)
    with pytest.raises(IndexError):
        bound_moment(p, 7, (1, 0), 2)


def partition_problem(cells, support=()):
    return problem_from_dict({
        "states": ["x1", "x2"], "field": ["-x1*x2", "0"], "box": {"x1": [0, 1], "x2": [0, 1]},
        "times": [0, 1], "support": [{"time_index": 0, "inequalities": list(support)}],
        "partition": {"states": ["x1"], "cells": cells}})


def test_single_cell_partition_has_unit_mass():
    p = partition_problem([{"x1": [0, 1]}])
    res = bound_mass(p, 0, 2)
    assert res.lower == pytest.approx(1.0, abs=1e-6) and res.upper == pytest.approx(1.0, abs=1e-6)


def test_cell_outside_support_has_zero_mass():
    p = partition_problem([{"x1": [0, 0.4]}, {"x1": [0.4, 1]}], support=["x1 - 0.6"])
    res = bound_mass(p, 0, 2)
    assert res.lower == 0.0 and res.upper <= 1e-6
    other = bound_mass(p, 1, 2)
    assert other.lower >= 1 - 1e-6


def test_mass_needs_partition(example1):
    with pytest.raises(ValueError):
        bound_mass(example1, 0, 1)


def test_invalidation_and_truth(example1):
    p = small_example1(example1)
    bad = replace(p, moments=(MomentBound(2, (1, 0), 0.9, 1.0),))
    verdict = check_consistency(bad, 3)
    assert verdict.outcome == INVALIDATED and verdict.order <= 3
    assert verdict.margin >= 1e-6
    good = check_consistency(p, verdict.order, min_order=verdict.order)
    assert good.outcome == NOT_INVALIDATED


def test_empty_problem_not_invalidated():
    p = problem_from_dict({"states": ["x"], "field": ["0"], "box": {"x": [0, 1]}, "times": [0]})
    assert check_consistency(p, 2).outcome == NOT_INVALIDATED


def test_run_queries_order_and_error_isolation(example1):
    p = small_example1(example1)
    queries = [Query("moment", 2, "a", time_index=2, exponents=(1, 0)),
               Query("moment", 2, "broken", time_index=1, exponents=(9, 9)),
               Query("moment", 2, "offgrid", time=0.25, exponents=(1, 0)),
               Query("consistency", 1, "c")]
    for jobs in (1, 3):
        res = run_queries(p, queries, jobs=jobs)
        assert [r.query.id for r in res.results] == ["a", "broken", "offgrid", "c"]
        assert [r.ok for r in res.results] == [True, False, True, True]
        assert len(res.errors) == 1
        off = res.results[2].bound
        assert off.time == 0.25
        truth = analytic_example1(0.25)[0]
        assert off.lower - 1e-6 <= truth <= off.upper + 1e-6
        assert res.results[3].verdict.outcome == NOT_INVALIDATED


def test_run_queries_mixed_kinds(example1):
    p = partition_problem([{"x1": [0, 0.5]}, {"x1": [0.5, 1]}])
    queries = [Query("mass", 1, "m0", cell=0), Query("moment", 1, "nu", time_index=1, exponents=(1, 0))]
    res = run_queries(p, queries)
    assert res.results[0].bound.query.kind == "mass"
    assert res.results[1].bound.query.kind == "moment"


def test_csv_and_json_shapes(example1):
    p = small_example1(example1)
    res = run_queries(p, [Query("moment", 1, "q", time_index=1, exponents=(1, 0))])
    lines = res.to_csv().splitlines()
    assert lines[0].split(",") == list(CSV_COLUMNS)
    row = dict(zip(CSV_COLUMNS, lines[1].split(",")))
    assert row["id"] == "q" and row["order"] == "1" and row["target"] == "1 0"
    float(row["lower"]), float(row["upper"])
    d = res.to_dict()["results"][0]
    assert d["min"]["status"] in ("optimal", "inaccurate")


def test_order_override(example1):
    p = small_example1(example1)
    res = run_queries(p, [Query("moment", 1, "q", time_index=2, exponents=(2, 0))], order=2)
    assert res.results[0].bound.order == 2


def test_loose_tolerance_settings_flow_through(example1):
    s = SolverSettings(tol_feas=1e-3, tol_gap=1e-3, tol_inaccurate=1e-3)
    res = bound_moment(small_example1(example1), 2, (1, 0), 1, settings=s)
    assert res.min_report.settings.tol_feas == 1e-3
    assert not math.isnan(res.lower)

"""Run queries against a problem: moment intervals, cell masses, consistency.

Each interval costs two solves (minimize and maximize) against one shared
relaxation; the relaxation for a given (time grid, order, mode) is built once
and reused across queries.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from .conic import INACCURATE, INFEASIBLE, OPTIMAL, SolveReport, SolverSettings, solve
from .problem import EstimationProblem, Query
from .relaxation import Relaxation, build_relaxation

log = logging.getLogger(__name__)

__all__ = [
    "BoundResult", "ConsistencyVerdict", "QueryResult", "ResultSet", "RelaxationCache",
    "bound_moment", "bound_mass", "bound_all_masses", "check_consistency", "run_queries",
    "CSV_COLUMNS",
]

NOT_INVALIDATED, INVALIDATED, UNDECIDED = "not_invalidated", "invalidated", "undecided"

CSV_COLUMNS = ("id", "kind", "time", "target", "lower", "upper", "order",
               "status_min", "status_max", "wall_ms")


@dataclass
class BoundResult:
    """Interval ``[lower, upper]`` for one moment or one cell mass."""

    query: Query
    lower: float
    upper: float
    order: int
    min_report: SolveReport | None = None
    max_report: SolveReport | None = None
    time: float | None = None
    wall_ms: float = 0.0

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def status_min(self) -> str:
        return self.min_report.status if self.min_report else "skipped"

    @property
    def status_max(self) -> str:
        return self.max_report.status if self.max_report else "skipped"

    def certificate(self, threshold: float) -> float | None:
        """Largest certified infeasibility margin among the two solves, if any passes ``threshold``."""
        margins = [r.certificate_margin for r in (self.min_report, self.max_report)
                   if r is not None and r.status == INFEASIBLE and r.certificate_margin is not None]
        best = max(margins, default=None)
        return best if best is not None and best >= threshold else None


@dataclass
class ConsistencyVerdict:
    outcome: str
    order: int
    margin: float | None = None
    reports: list[SolveReport] = field(default_factory=list)
    message: str = ""

    @property
    def invalidated(self) -> bool:
        return self.outcome == INVALIDATED


@dataclass
class QueryResult:
    """One row of a result set; exactly one of ``bound``/``verdict``/``error`` is meaningful."""

    index: int
    query: Query
    bound: BoundResult | None = None
    verdict: ConsistencyVerdict | None = None
    error: str | None = None
    wall_ms: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None

    def row(self) -> dict[str, Any]:
        q = self.query
        if q.kind == "mass":
            target = f"cell {q.cell}"
        elif q.exponents is not None:
            target = " ".join(str(e) for e in q.exponents)
        else:
            target = ""
        time_ = ""
        lower = upper = ""
        s_min = s_max = ""
        order: Any = q.order
        if self.bound is not None:
            b = self.bound
            time_ = _fmt(b.time) if b.time is not None else ""
            lower, upper = _fmt(b.lower), _fmt(b.upper)
            s_min, s_max = b.status_min, b.status_max
            order = b.order
        elif self.verdict is not None:
            s_min = s_max = self.verdict.outcome
            order = self.verdict.order
        if self.error is not None:
            s_min = s_max = "error"
        return {"id": q.id, "kind": q.kind, "time": time_, "target": target, "lower": lower,
                "upper": upper, "order": order, "status_min": s_min, "status_max": s_max,
                "wall_ms": f"{self.wall_ms:.1f}"}

    def to_dict(self) -> dict[str, Any]:
        q = self.query
        out: dict[str, Any] = {"id": q.id, "kind": q.kind, "order": q.order}
        if q.exponents is not None:
            out["exponents"] = list(q.exponents)
        if q.cell is not None:
            out["cell"] = q.cell
        if self.error is not None:
            out["error"] = self.error
        if self.bound is not None:
            b = self.bound
            out.update(time=b.time, lower=_json_float(b.lower), upper=_json_float(b.upper), order=b.order,
                       min=b.min_report.summary() if b.min_report else None,
                       max=b.max_report.summary() if b.max_report else None)
        if self.verdict is not None:
            v = self.verdict
            out.update(outcome=v.outcome, order=v.order, margin=v.margin, message=v.message,
                       reports=[r.summary() for r in v.reports])
        out["wall_ms"] = round(self.wall_ms, 1)
        return out


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def _json_float(v: float) -> float | str:
    return _fmt(v) if math.isinf(v) else float(v)


@dataclass
class ResultSet:
    problem_name: str
    results: list[QueryResult]

    @property
    def bounds(self) -> list[BoundResult]:
        return [r.bound for r in self.results if r.bound is not None]

    @property
    def errors(self) -> list[QueryResult]:
        return [r for r in self.results if r.error is not None]

    def invalidations(self, threshold: float) -> list[QueryResult]:
        """Results whose solves certified that no consistent measure exists."""
        out = []
        for r in self.results:
            if r.bound is not None and r.bound.certificate(threshold) is not None:
                out.append(r)
            elif r.verdict is not None and r.verdict.invalidated:
                out.append(r)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.results:
            w.writerow(r.row())
        return buf.getvalue()

    def to_dict(self) -> dict[str, Any]:
        return {"problem": self.problem_name, "results": [r.to_dict() for r in self.results]}

    def write(self, directory: str | Path, extra: dict | None = None, stem: str = "results") -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = d / f"{stem}.csv", d / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        json_path.write_text(json.dumps(payload, indent=2) + "\n")
        return csv_path, json_path


class RelaxationCache:
    """Thread-safe memo of assembled relaxations for one base problem.

    Keys are (time grid, order, mode): problems derived by inserting a time
    point differ from the base only in their grid.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._items: dict[tuple, tuple[threading.Lock, list]] = {}

    def get(self, problem: EstimationProblem, order: int, cells: bool) -> Relaxation:
        key = (problem.times, order, cells)
        with self._lock:
            lock, slot = self._items.setdefault(key, (threading.Lock(), []))
        with lock:
            if not slot:
                slot.append(build_relaxation(problem, order, cells=cells))
            return slot[0]


def _interval(relax: Relaxation, column: int, settings: SolverSettings) -> tuple[float, float, SolveReport, SolveReport]:
    lo = solve(relax.program({column: 1.0}, "minimize"), settings)
    hi = solve(relax.program({column: 1.0}, "maximize"), settings)
    return lo.bound("minimize"), hi.bound("maximize"), lo, hi


def bound_moment(problem: EstimationProblem, k: int, exponents: Sequence[int], order: int,
                 settings: SolverSettings | None = None, relaxation: Relaxation | None = None,
                 query: Query | None = None) -> BoundResult:
    """Outer interval on the raw moment ``x^exponents`` at grid time ``t_k``."""
    exponents = tuple(int(e) for e in exponents)
    if len(exponents) != problem.n_x:
        raise ValueError(f"expected {problem.n_x} exponents, got {len(exponents)}")
    if sum(exponents) > 2 * order:
        raise ValueError(f"moment degree {sum(exponents)} exceeds 2r = {2 * order}")
    if not 0 <= k < problem.n_times:
        raise IndexError(f"time index {k} out of range")
    settings = settings or SolverSettings()
    start = time.perf_counter()
    relax = relaxation or build_relaxation(problem, order)
    lower, upper, lo, hi = _interval(relax, relax.moment_column(k, exponents), settings)
    query = query or Query("moment", order, time_index=k, exponents=exponents)
    return BoundResult(query, lower, upper, order, lo, hi, problem.times[k],
                       (time.perf_counter() - start) * 1e3)


def bound_mass(problem: EstimationProblem, cell: int, order: int,
               settings: SolverSettings | None = None, relaxation: Relaxation | None = None,
               query: Query | None = None) -> BoundResult:
    """Interval on the probability mass of partition cell ``cell``, clipped to [0, 1]."""
    if problem.partition is None:
        raise ValueError("problem has no partition")
    if not 0 <= cell < problem.partition.n_cells:
        raise IndexError(f"cell {cell} out of range")
    settings = settings or SolverSettings()
    start = time.perf_counter()
    relax = relaxation or build_relaxation(problem, order, cells=True)
    lower, upper, lo, hi = _interval(relax, relax.mass_column(cell), settings)
    # mass is a probability; a weaker solver value never beats the trivial bounds
    lower, upper = max(lower, 0.0), min(upper, 1.0)
    query = query or Query("mass", order, cell=cell)
    return BoundResult(query, lower, upper, order, lo, hi, problem.times[problem.partition.time_index],
                       (time.perf_counter() - start) * 1e3)


def bound_all_masses(problem: EstimationProblem, order: int, settings: SolverSettings | None = None,
                     jobs: int = 1) -> list[BoundResult]:
    relax = build_relaxation(problem, order, cells=True)
    cells = range(problem.partition.n_cells)
    work = lambda j: bound_mass(problem, j, order, settings, relax)  # noqa: E731
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(work, cells))
    return [work(j) for j in cells]


def check_consistency(problem: EstimationProblem, max_order: int, settings: SolverSettings | None = None,
                      min_order: int = 1) -> ConsistencyVerdict:
    """Search r = min_order..max_order for a certified infeasibility of the relaxation.

    The verdict is ``not_invalidated`` at the highest order whose relaxation was
    solved to full accuracy, provided no order produced an infeasibility claim
    that could not be certified.  Otherwise it is ``undecided``.
    """
    settings = settings or SolverSettings()
    reports: list[SolveReport] = []
    feasible_at = None
    trouble: tuple[int, SolveReport] | None = None
    for r in range(min_order, max_order + 1):
        rep = solve(build_relaxation(problem, r).program(), settings)
        reports.append(rep)
        log.info("consistency order %d: %s %s", r, rep.status, rep.message)
        if rep.status == INFEASIBLE:
            margin = rep.certificate_margin
            if margin is not None and margin >= settings.certificate_margin:
                return ConsistencyVerdict(INVALIDATED, r, margin, reports,
                                          f"dual ray certified at order {r}")
            trouble = (r, rep)
        elif rep.status == OPTIMAL:
            feasible_at = r
        elif rep.status != INACCURATE:
            trouble = (r, rep)
    if trouble is None and (feasible_at is not None or not reports):
        order = feasible_at if feasible_at is not None else max_order
        return ConsistencyVerdict(NOT_INVALIDATED, order, None, reports,
                                  f"relaxation feasible at order {order}")
    r, rep = trouble if trouble is not None else (max_order, reports[-1])
    return ConsistencyVerdict(UNDECIDED, r, rep.certificate_margin, reports,
                              f"solver could not settle order {r}: {rep.status} {rep.message}".strip())


def _execute(problem: EstimationProblem, q: Query, settings: SolverSettings, cache: RelaxationCache,
             order_override: int | None) -> BoundResult | ConsistencyVerdict:
    order = order_override or q.order
    if order < 1:
        raise ValueError("relaxation order must be at least 1")
    if q.kind == "moment":
        if q.exponents is None:
            raise ValueError("moment query without exponents")
        if q.time_index is not None:
            prob, k = problem, q.time_index
        elif q.time is not None:
            prob, k = problem.with_time(q.time)
        else:
            raise ValueError("moment query needs time_index or time")
        relax = cache.get(prob, order, False)
        return bound_moment(prob, k, q.exponents, order, settings, relax, replace(q, order=order))
    if q.kind == "mass":
        if problem.partition is None:
            raise ValueError("mass query without a partition")
        if q.cell is None:
            raise ValueError("mass query without a cell")
        relax = cache.get(problem, order, True)
        return bound_mass(problem, q.cell, order, settings, relax, replace(q, order=order))
    if q.kind == "consistency":
        return check_consistency(problem, order, settings)
    raise ValueError(f"unknown query kind {q.kind!r}")


def run_queries(problem: EstimationProblem, queries: Sequence[Query] | None = None,
                settings: SolverSettings | None = None, jobs: int = 1,
                order: int | None = None) -> ResultSet:
    """Execute ``queries`` (default: the problem's own); output order follows input order.

    A query that raises is reported as an error row and does not stop the batch.
    """
    queries = list(problem.queries if queries is None else queries)
    settings = settings or SolverSettings()
    cache = RelaxationCache()

    def work(item):
        i, q = item
        start = time.perf_counter()
        res = QueryResult(i, q)
        try:
            out = _execute(problem, q, settings, cache, order)
            if isinstance(out, BoundResult):
                res.bound = out
            else:
                res.verdict = out
        except Exception as exc:  # isolate per-query failures
            log.warning("query %s failed: %s", q.id or i, exc)
            res.error = f"{type(exc).__name__}: {exc}"
        res.wall_ms = (time.perf_counter() - start) * 1e3
        return res

    items = list(enumerate(queries))
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]
    results.sort(key=lambda r: r.index)
    return ResultSet(problem.name, results)

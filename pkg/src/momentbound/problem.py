"""Declarative estimation problems and their JSON form.

A problem file names the states, the polynomial vector field, a bounding
box, a time grid in [0, 1], per-time support inequalities ``g(t_k, x) >= 0``,
interval data on raw moments, an optional partition of the initial set and a
list of queries.  The ``oracle`` block holds the true initial laws used only
for fabricating data, for exact moment pins and for checking answers.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .oracle import InitialDistribution, law_to_dict, parse_law
from .poly import Polynomial, PolynomialParseError, format_polynomial, parse_polynomial

__all__ = [
    "DynamicalSystem", "SupportSet", "MomentBound", "Partition", "Query",
    "EstimationProblem", "Diagnostic", "ProblemError", "load_problem",
    "save_problem", "problem_from_dict", "problem_to_dict", "validate",
]

TIME_NAME = "t"


@dataclass(frozen=True)
class DynamicalSystem:
    names: tuple[str, ...]
    f: tuple[Polynomial, ...]

    @property
    def n_x(self) -> int:
        return len(self.names)

    @property
    def degree(self) -> int:
        return max([0, *(fi.degree for fi in self.f)])

    def is_static(self) -> bool:
        return all(fi.is_zero() for fi in self.f)


@dataclass(frozen=True)
class SupportSet:
    """Semialgebraic set ``{x : g(t, x) >= 0 for every g}``; emptiness is allowed."""

    inequalities: tuple[Polynomial, ...] = ()
    label: str = ""

    def __add__(self, other: SupportSet) -> SupportSet:
        label = "&".join(x for x in (self.label, other.label) if x)
        return SupportSet(self.inequalities + other.inequalities, label)


@dataclass(frozen=True)
class MomentBound:
    time_index: int
    exponents: tuple[int, ...]
    lower: float = -math.inf
    upper: float = math.inf

    @property
    def degree(self) -> int:
        return sum(self.exponents)


@dataclass(frozen=True)
class Partition:
    """Axis-aligned cells over some states at one time index.

    Cells are boxes ``{state_index: (lo, hi)}`` over the partitioned states.
    A grid partition enumerates cells with the first listed state varying
    slowest.
    """

    time_index: int
    states: tuple[int, ...]
    cells: tuple[tuple[tuple[float, float], ...], ...]
    grid: tuple[int, ...] | None = None

    @classmethod
    def from_grid(cls, time_index: int, states: Sequence[int], grid: Sequence[int],
                  bounds: Sequence[tuple[float, float]]) -> Partition:
        edges = [np.linspace(lo, hi, n + 1) for (lo, hi), n in zip(bounds, grid)]
        cells = []
        for idx in itertools.product(*(range(n) for n in grid)):
            cells.append(tuple((float(e[i]), float(e[i + 1])) for e, i in zip(edges, idx)))
        return cls(time_index, tuple(states), tuple(cells), tuple(grid))

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def bounds(self) -> tuple[tuple[float, float], ...]:
        return tuple((min(c[d][0] for c in self.cells), max(c[d][1] for c in self.cells))
                     for d in range(len(self.states)))

    def cell_of(self, point: Sequence[float]) -> int:
        """Index of the cell containing a full state vector, or -1."""
        return int(self.locate(np.asarray(point, dtype=float)[None, :])[0])

    def locate(self, X: np.ndarray) -> np.ndarray:
        """Cell index per row of ``X``; lower faces are closed, upper faces only on the outer boundary."""
        out = np.full(X.shape[0], -1, dtype=int)
        outer = self.bounds()
        for j, cell in enumerate(self.cells):
            hit = out < 0
            for d, s in enumerate(self.states):
                lo, hi = cell[d]
                v = X[:, s]
                upper_ok = v <= hi if hi >= outer[d][1] else v < hi
                hit &= (v >= lo) & upper_ok
            out[hit] = j
        return out

    def overlaps(self) -> list[tuple[int, int]]:
        bad = []
        for i, j in itertools.combinations(range(self.n_cells), 2):
            a, b = self.cells[i], self.cells[j]
            if all(min(a[d][1], b[d][1]) - max(a[d][0], b[d][0]) > 1e-12 for d in range(len(self.states))):
                bad.append((i, j))
        return bad

    def covers_bounds(self) -> bool:
        vol = math.fsum(math.prod(hi - lo for lo, hi in c) for c in self.cells)
        total = math.prod(hi - lo for lo, hi in self.bounds())
        return abs(vol - total) <= 1e-9 * max(1.0, total)


@dataclass(frozen=True)
class Query:
    kind: str  # "moment", "mass" or "consistency"
    order: int
    id: str = ""
    time_index: int | None = None
    time: float | None = None
    exponents: tuple[int, ...] | None = None
    cell: int | None = None


@dataclass(frozen=True)
class EstimationProblem:
    system: DynamicalSystem
    box: tuple[tuple[float, float], ...]
    times: tuple[float, ...]
    global_support: SupportSet = SupportSet()
    supports: Mapping[int, SupportSet] = field(default_factory=dict)
    moments: tuple[MomentBound, ...] = ()
    partition: Partition | None = None
    oracle: InitialDistribution | None = None
    oracle_settings: Mapping[str, Any] = field(default_factory=dict)
    queries: tuple[Query, ...] = ()
    name: str = ""

    @property
    def n_x(self) -> int:
        return self.system.n_x

    @property
    def names(self) -> tuple[str, ...]:
        return self.system.names

    @property
    def n_times(self) -> int:
        return len(self.times)

    def box_inequalities(self) -> tuple[Polynomial, ...]:
        """Linear faces, plus ``(x-a)(b-x)`` when both sides are finite and distinct."""
        out = []
        n = self.n_x
        for i, (lo, hi) in enumerate(self.box):
            x = Polynomial.state(i, n)
            if math.isfinite(lo):
                out.append(x - lo)
            if math.isfinite(hi):
                out.append(hi - x)
            if math.isfinite(lo) and math.isfinite(hi) and lo < hi:
                out.append((x - lo) * (hi - x))
        return tuple(out)

    def global_set(self) -> SupportSet:
        return SupportSet(self.box_inequalities(), "box") + self.global_support

    def support_at(self, k: int) -> SupportSet:
        return self.supports.get(k, SupportSet())

    def moment_data(self, k: int) -> list[MomentBound]:
        return [m for m in self.moments if m.time_index == k]

    def with_time(self, t: float) -> tuple[EstimationProblem, int]:
        """Problem with ``t`` on the grid (no data attached there) and its index."""
        for k, tk in enumerate(self.times):
            if abs(tk - t) <= 1e-12:
                return self, k
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"time {t} outside [0, 1]")
        k_new = sum(1 for tk in self.times if tk < t)
        shift = lambda k: k + 1 if k >= k_new else k  # noqa: E731
        times = tuple(sorted((*self.times, float(t))))
        supports = {shift(k): s for k, s in self.supports.items()}
        moments = tuple(replace(m, time_index=shift(m.time_index)) for m in self.moments)
        partition = (replace(self.partition, time_index=shift(self.partition.time_index))
                     if self.partition else None)
        queries = tuple(replace(q, time_index=shift(q.time_index)) if q.time_index is not None else q
                        for q in self.queries)
        return replace(self, times=times, supports=supports, moments=moments,
                       partition=partition, queries=queries), k_new


# -- diagnostics ----------------------------------------------------------------

@dataclass(frozen=True)
class Diagnostic:
    level: str  # "error" or "warning"
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.level}: {self.path}: {self.message}"


class ProblemError(ValueError):
    def __init__(self, diagnostics: Sequence[Diagnostic]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


def validate(problem: EstimationProblem) -> list[Diagnostic]:
    """All invariant violations (errors) and soft problems (warnings)."""
    out: list[Diagnostic] = []
    err = lambda p, m: out.append(Diagnostic("error", p, m))  # noqa: E731
    warn = lambda p, m: out.append(Diagnostic("warning", p, m))  # noqa: E731
    n = problem.n_x
    names = problem.names

    if len(set(names)) != len(names):
        err("states", "duplicate state names")
    if TIME_NAME in names:
        err("states", f"{TIME_NAME!r} is reserved for time")
    if len(problem.system.f) != n:
        err("field", f"expected {n} components, got {len(problem.system.f)}")
    for i, fi in enumerate(problem.system.f):
        if fi.n_x != n:
            err(f"field[{i}]", "wrong state dimension")

    if len(problem.box) != n:
        err("box", "box must list every state")
    for i, (lo, hi) in enumerate(problem.box):
        if lo > hi:
            err(f"box.{names[i]}", f"lower {lo} exceeds upper {hi}")
        if not (math.isfinite(lo) and math.isfinite(hi)):
            warn(f"box.{names[i]}", "unbounded support: declare a finite box for every state")

    times = problem.times
    if not times:
        err("times", "time grid is empty")
    if any(b <= a for a, b in zip(times, times[1:])):
        err("times", "grid not increasing")
    if any(not 0.0 <= t <= 1.0 for t in times):
        err("times", "grid points must lie in [0, 1]")

    for k in problem.supports:
        if not 0 <= k < len(times):
            err(f"support[{k}]", f"time index {k} out of range")

    for j, m in enumerate(problem.moments):
        p = f"moments[{j}]"
        if not 0 <= m.time_index < len(times):
            err(p, f"time index {m.time_index} out of range")
        if len(m.exponents) != n or any(e < 0 for e in m.exponents):
            err(p, "exponents must be nonnegative, one per state")
        if not m.lower <= m.upper:
            err(p, f"lower {m.lower} exceeds upper {m.upper}")

    part = problem.partition
    if part is not None:
        if part.time_index != 0:
            err("partition.time_index", "partitions are supported at time index 0 only")
        if any(not 0 <= s < n for s in part.states):
            err("partition.states", "unknown state")
        for j, cell in enumerate(part.cells):
            if any(lo >= hi for lo, hi in cell):
                err(f"partition.cells[{j}]", "empty cell")
        overlaps = part.overlaps()
        if overlaps:
            i, j = overlaps[0]
            err("partition", f"cells {i} and {j} overlap ({len(overlaps)} overlapping pairs)")
        elif not part.covers_bounds():
            err("partition", "cells do not cover their bounding box")
        for d, s in enumerate(part.states):
            if 0 <= s < n:
                lo, hi = part.bounds()[d]
                blo, bhi = problem.box[s] if s < len(problem.box) else (-math.inf, math.inf)
                if lo > blo + 1e-12 or hi < bhi - 1e-12:
                    warn("partition", f"cells do not span the box of {names[s]}")

    if problem.oracle is not None:
        for i, law in problem.oracle.laws.items():
            lo, hi = law.support
            blo, bhi = problem.box[i] if i < len(problem.box) else (-math.inf, math.inf)
            if lo < blo - 1e-12 or hi > bhi + 1e-12:
                warn(f"oracle.{names[i]}", "law support leaves the box")

    for j, q in enumerate(problem.queries):
        p = f"queries[{j}]"
        if q.kind not in ("moment", "mass", "consistency"):
            err(p, f"unknown query kind {q.kind!r}")
            continue
        if q.order < 1:
            err(p, "relaxation order must be at least 1")
        if q.kind == "moment":
            if q.time_index is None and q.time is None:
                err(p, "moment query needs time_index or time")
            if q.time_index is not None and not 0 <= q.time_index < len(times):
                err(p, f"time index {q.time_index} out of range")
            if q.time is not None and not 0.0 <= q.time <= 1.0:
                err(p, "time outside [0, 1]")
            if q.exponents is None or len(q.exponents) != n:
                err(p, "exponents must list every state")
            elif sum(q.exponents) > 2 * q.order:
                err(p, f"moment degree {sum(q.exponents)} exceeds 2*order={2 * q.order}")
        if q.kind == "mass":
            if part is None:
                err(p, "mass query without a partition")
            elif q.cell is None or not 0 <= q.cell < part.n_cells:
                err(p, f"cell {q.cell} does not exist")
    return out


# -- JSON ---------------------------------------------------------------------

def _num(v) -> float:
    if v is None:
        return math.nan
    if isinstance(v, str):
        v = v.strip().lower()
        if v in ("inf", "+inf", "infinity"):
            return math.inf
        if v in ("-inf", "-infinity"):
            return -math.inf
    return float(v)


def _json_num(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def problem_from_dict(data: Mapping[str, Any]) -> EstimationProblem:
    """Build and validate a problem; raises ``ProblemError`` listing every error."""
    diags: list[Diagnostic] = []

    def fail(path, msg):
        diags.append(Diagnostic("error", path, msg))

    def poly(text, path) -> Polynomial | None:
        try:
            return parse_polynomial(str(text), names, TIME_NAME)
        except PolynomialParseError as exc:
            fail(path, str(exc))
        except ValueError as exc:
            fail(path, str(exc))
        return None

    if not isinstance(data, Mapping):
        raise ProblemError([Diagnostic("error", "", "problem must be a JSON object")])
    for key in ("states", "field", "times"):
        if key not in data:
            fail(key, "missing required field")
    if diags:
        raise ProblemError(diags)

    names = tuple(str(s) for s in data["states"])
    n = len(names)
    if n == 0:
        raise ProblemError([Diagnostic("error", "states", "at least one state required")])

    f = []
    field_list = data["field"]
    if not isinstance(field_list, list) or len(field_list) != n:
        fail("field", f"expected a list of {n} expressions")
        field_list = []
    for i, text in enumerate(field_list):
        p = poly(text, f"field[{i}]")
        f.append(p if p is not None else Polynomial.zero(n))

    box_data = data.get("box", {}) or {}
    unknown = set(box_data) - set(names)
    if unknown:
        fail("box", f"unknown states {sorted(unknown)}")
    box = []
    for name in names:
        if name in box_data:
            try:
                lo, hi = (_num(v) for v in box_data[name])
            except (TypeError, ValueError):
                fail(f"box.{name}", "expected [lower, upper]")
                lo, hi = -math.inf, math.inf
        else:
            lo, hi = -math.inf, math.inf
        box.append((lo, hi))

    try:
        times = tuple(float(t) for t in data["times"])
    except (TypeError, ValueError):
        fail("times", "expected a list of numbers")
        times = ()

    global_ineqs: list[Polynomial] = []
    supports: dict[int, list[Polynomial]] = {}
    for j, entry in enumerate(data.get("support", []) or []):
        k = entry.get("time_index")
        polys = [poly(g, f"support[{j}].inequalities[{i}]")
                 for i, g in enumerate(entry.get("inequalities", []))]
        polys = [p for p in polys if p is not None]
        if k is None:
            global_ineqs.extend(polys)
        else:
            supports.setdefault(int(k), []).extend(polys)

    moments = []
    for j, entry in enumerate(data.get("moments", []) or []):
        try:
            moments.append(MomentBound(
                int(entry["time_index"]), tuple(int(e) for e in entry["exponents"]),
                _num(entry.get("lower", "-inf")), _num(entry.get("upper", "inf"))))
        except (KeyError, TypeError, ValueError) as exc:
            fail(f"moments[{j}]", f"malformed moment bound: {exc}")

    partition = None
    pdata = data.get("partition")
    if pdata:
        try:
            pstates = pdata.get("states", list(names))
            idx = tuple(names.index(s) for s in pstates)
            k = int(pdata.get("time_index", 0))
            if "cells" in pdata:
                cells = tuple(tuple((_num(c[s][0]), _num(c[s][1])) for s in pstates)
                              for c in pdata["cells"])
                partition = Partition(k, idx, cells)
            else:
                grid = tuple(int(g) for g in pdata["grid"])
                if len(grid) != len(idx) or any(g < 1 for g in grid):
                    raise ValueError("grid needs one positive count per partitioned state")
                bounds = pdata.get("bounds") or {}
                bnds = tuple(tuple(_num(v) for v in bounds.get(names[s], box[s])) for s in idx)
                if not all(math.isfinite(v) for b in bnds for v in b):
                    raise ValueError("partition needs finite bounds")
                partition = Partition.from_grid(k, idx, grid, bnds)
        except (KeyError, TypeError, ValueError) as exc:
            fail("partition", str(exc))

    oracle = None
    oracle_settings: dict = {}
    odata = data.get("oracle")
    if odata:
        laws, pinned = {}, set()
        for key, spec in odata.items():
            if key == "sampling":
                oracle_settings = dict(spec)
                continue
            if key not in names:
                fail(f"oracle.{key}", "unknown state")
                continue
            try:
                law, pin = parse_law(spec)
            except (TypeError, ValueError, KeyError) as exc:
                fail(f"oracle.{key}", str(exc))
                continue
            laws[names.index(key)] = law
            if pin:
                pinned.add(names.index(key))
        oracle = InitialDistribution(laws, frozenset(pinned))

    queries = []
    for j, q in enumerate(data.get("queries", []) or []):
        try:
            kind = q["kind"]
            qid = str(q.get("id", f"q{j}"))
            order = int(q.get("order", 2))
            if kind == "mass" and q.get("cell", "all") == "all":
                n_cells = partition.n_cells if partition else 0
                for c in range(n_cells):
                    queries.append(Query("mass", order, f"{qid}[{c}]", cell=c))
                continue
            exps = q.get("exponents")
            queries.append(Query(
                kind, order, qid,
                time_index=int(q["time_index"]) if q.get("time_index") is not None else None,
                time=float(q["time"]) if q.get("time") is not None else None,
                exponents=tuple(int(e) for e in exps) if exps is not None else None,
                cell=int(q["cell"]) if q.get("cell") is not None else None))
        except (KeyError, TypeError, ValueError) as exc:
            fail(f"queries[{j}]", f"malformed query: {exc}")

    if diags:
        raise ProblemError(diags)

    problem = EstimationProblem(
        system=DynamicalSystem(names, tuple(f)),
        box=tuple(box),
        times=times,
        global_support=SupportSet(tuple(global_ineqs), "X"),
        supports={k: SupportSet(tuple(v), f"X_{k}") for k, v in sorted(supports.items())},
        moments=tuple(moments),
        partition=partition,
        oracle=oracle,
        oracle_settings=oracle_settings,
        queries=tuple(queries),
        name=str(data.get("name", "")),
    )
    errors = [d for d in validate(problem) if d.level == "error"]
    if errors:
        raise ProblemError(errors)
    return problem


def problem_to_dict(problem: EstimationProblem) -> dict:
    names = problem.names
    fmt = lambda p: format_polynomial(p, names, TIME_NAME)  # noqa: E731
    out: dict[str, Any] = {}
    if problem.name:
        out["name"] = problem.name
    out["states"] = list(names)
    out["field"] = [fmt(fi) for fi in problem.system.f]
    out["box"] = {nm: [_json_num(lo), _json_num(hi)] for nm, (lo, hi) in zip(names, problem.box)
                  if math.isfinite(lo) or math.isfinite(hi)}
    out["times"] = list(problem.times)
    support = []
    if problem.global_support.inequalities:
        support.append({"time_index": None,
                        "inequalities": [fmt(g) for g in problem.global_support.inequalities]})
    for k, s in sorted(problem.supports.items()):
        support.append({"time_index": k, "inequalities": [fmt(g) for g in s.inequalities]})
    out["support"] = support
    out["moments"] = [{"time_index": m.time_index, "exponents": list(m.exponents),
                       "lower": _json_num(m.lower), "upper": _json_num(m.upper)}
                      for m in problem.moments]
    part = problem.partition
    if part is not None:
        pd: dict[str, Any] = {"time_index": part.time_index, "states": [names[s] for s in part.states]}
        if part.grid is not None and part == Partition.from_grid(
                part.time_index, part.states, part.grid, part.bounds()):
            pd["grid"] = list(part.grid)
            pd["bounds"] = {names[s]: list(b) for s, b in zip(part.states, part.bounds())}
        else:
            pd["cells"] = [{names[s]: list(b) for s, b in zip(part.states, c)} for c in part.cells]
        out["partition"] = pd
    if problem.oracle is not None:
        od: dict[str, Any] = {names[i]: law_to_dict(law, i in problem.oracle.pinned)
                              for i, law in sorted(problem.oracle.laws.items())}
        if problem.oracle_settings:
            od["sampling"] = dict(problem.oracle_settings)
        out["oracle"] = od
    queries = []
    for q in problem.queries:
        d: dict[str, Any] = {"id": q.id, "kind": q.kind, "order": q.order}
        if q.time_index is not None:
            d["time_index"] = q.time_index
        if q.time is not None:
            d["time"] = q.time
        if q.exponents is not None:
            d["exponents"] = list(q.exponents)
        if q.cell is not None:
            d["cell"] = q.cell
        queries.append(d)
    out["queries"] = queries
    return out


def load_problem(path: str | Path) -> EstimationProblem:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ProblemError([Diagnostic("error", str(path), f"cannot read file: {exc.strerror}")]) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemError([Diagnostic("error", str(path), f"invalid JSON: {exc}")]) from exc
    return problem_from_dict(data)


def save_problem(problem: EstimationProblem, path: str | Path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(problem), indent=2) + "\n")

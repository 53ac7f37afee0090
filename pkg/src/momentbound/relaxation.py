"""Moment relaxation of the time-split Liouville equation.

Every unknown measure becomes a block of consecutive columns holding its
moments up to degree ``2r``:

* endpoint measures ``mu_k`` on ``x`` at grid time ``t_k``,
* occupation measures ``mu_{k,k+1}`` on ``(t, x)`` over ``[t_k, t_{k+1}]``,
* in mass mode, cell measures ``mu_{0,j}`` on ``x`` whose sum is ``mu_0``.

For each interval and each test monomial ``v = t^a x^b`` the weak Liouville
equation gives one linear row

    <L_f v, mu_{k,k+1}> - t_{k+1}^a <x^b, mu_{k+1}> + t_k^a <x^b, mu_k> = 0,

and positivity/support enter as moment and localizing matrices.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .conic import ConicProgram, PsdBlock
from .poly import Monomial, MonomialOrdering, Polynomial, lie_derivative, monomial_basis
from .problem import DynamicalSystem, EstimationProblem

log = logging.getLogger(__name__)

__all__ = [
    "MeasureVar", "LinearConstraint", "Layout", "Relaxation", "test_monomials",
    "liouville_rows", "normalization_rows", "split_rows", "moment_matrix",
    "localizing_matrix", "vanishing_rows", "build_relaxation", "assemble",
]

EQUAL, LOWER, UPPER = "equal", "lower_bound", "upper_bound"


@dataclass(frozen=True, eq=False)
class MeasureVar:
    kind: str  # "endpoint", "occupation" or "cell"
    index: tuple[int, ...]
    include_t: bool
    degree: int
    offset: int
    ordering: MonomialOrdering
    support: tuple[Polynomial, ...] = ()
    vanishing: tuple[Polynomial, ...] = ()
    window: tuple[float, float] | None = None
    has_blocks: bool = True

    @property
    def basis(self) -> list[Monomial]:
        return self.ordering.monomials

    @property
    def name(self) -> str:
        if self.kind == "endpoint":
            return f"mu_{self.index[0]}"
        if self.kind == "occupation":
            return f"mu_{self.index[0]},{self.index[1]}"
        return f"mu_0,cell{self.index[0]}"

    def column(self, mono: Monomial) -> int:
        if not self.include_t and mono.t_exp:
            raise KeyError(f"{self.name} has no time variable")
        return self.offset + self.ordering.index(mono)

    def columns(self) -> range:
        return range(self.offset, self.offset + len(self.ordering))

    @property
    def mass_column(self) -> int:
        return self.offset


@dataclass(frozen=True)
class LinearConstraint:
    coefficients: dict[int, float]
    rhs: float
    relation: str = EQUAL
    label: str = ""


class Layout:
    """Column allocation of all measures in one stacked moment vector."""

    def __init__(self, measures: Sequence[MeasureVar], times: Sequence[float], names: Sequence[str]):
        self.measures = list(measures)
        self.times = tuple(times)
        self.names = tuple(names)
        self.n_vars = sum(len(m.ordering) for m in self.measures)
        self._endpoint = {m.index[0]: m for m in self.measures if m.kind == "endpoint"}
        self._occupation = {m.index[0]: m for m in self.measures if m.kind == "occupation"}
        self.cells = [m for m in self.measures if m.kind == "cell"]

    def endpoint(self, k: int) -> MeasureVar:
        return self._endpoint[k]

    def occupation(self, k: int) -> MeasureVar:
        return self._occupation[k]

    def var_labels(self) -> tuple[str, ...]:
        out = []
        for m in self.measures:
            out.extend(f"{m.name}[{mono.label(self.names)}]" for mono in m.basis)
        return tuple(out)


# -- pieces -------------------------------------------------------------------------

def test_monomials(order: int, system: DynamicalSystem) -> list[Monomial]:
    """Test functions ``t^a x^b`` whose Liouville image fits in degree ``2r``."""
    if order < 1:
        raise ValueError("relaxation order must be at least 1")
    budget = 2 * order + 1 - max(1, system.degree)
    if budget < 1:
        log.warning("order %d admits only constant test functions for a degree-%d field",
                    order, system.degree)
        return [Monomial.one(system.n_x)]
    return monomial_basis(system.n_x, budget, include_t=True)


def liouville_rows(system: DynamicalSystem, layout: Layout, k: int, order: int,
                   tests: Sequence[Monomial] | None = None) -> list[LinearConstraint]:
    """Equality rows linking ``mu_k``, ``mu_{k,k+1}`` and ``mu_{k+1}``."""
    tests = test_monomials(order, system) if tests is None else tests
    occ, start, end = layout.occupation(k), layout.endpoint(k), layout.endpoint(k + 1)
    t0, t1 = layout.times[k], layout.times[k + 1]
    rows = []
    for v in tests:
        lv = lie_derivative(Polynomial.monomial(v), system.f)
        coefs: dict[int, float] = {}
        for mono, c in lv.terms.items():
            if mono.degree > occ.degree:
                raise AssertionError(f"L_f({v}) exceeds truncation degree {occ.degree}")
            col = occ.column(mono)
            coefs[col] = coefs.get(col, 0.0) + c
        x_mono = Monomial(0, v.x_exps)
        for meas, weight in ((end, -t1 ** v.t_exp), (start, t0 ** v.t_exp)):
            if weight != 0.0:
                col = meas.column(x_mono)
                coefs[col] = coefs.get(col, 0.0) + weight
        coefs = {c: a for c, a in coefs.items() if a != 0.0}
        if coefs:
            rows.append(LinearConstraint(coefs, 0.0, EQUAL,
                                         f"liouville[{k}] v={v.label(layout.names)}"))
    return rows


def normalization_rows(layout: Layout) -> list[LinearConstraint]:
    """Unit mass for endpoint measures; for cells, total mass one and each in [0, 1]."""
    rows = []
    for m in layout.measures:
        if m.kind == "endpoint" and m.has_blocks:
            rows.append(LinearConstraint({m.mass_column: 1.0}, 1.0, EQUAL, f"mass {m.name}"))
    if layout.cells:
        rows.append(LinearConstraint({m.mass_column: 1.0 for m in layout.cells}, 1.0, EQUAL,
                                     "mass sum of cells"))
        for m in layout.cells:
            rows.append(LinearConstraint({m.mass_column: 1.0}, 0.0, LOWER, f"mass {m.name} >= 0"))
            rows.append(LinearConstraint({m.mass_column: 1.0}, 1.0, UPPER, f"mass {m.name} <= 1"))
    return rows


def split_rows(layout: Layout) -> list[LinearConstraint]:
    """Moment-wise identity ``mu_0 = sum_j mu_{0,j}``."""
    if not layout.cells:
        return []
    total = layout.endpoint(0)
    rows = []
    for mono in total.basis:
        coefs = {total.column(mono): 1.0}
        for cell in layout.cells:
            coefs[cell.column(mono)] = -1.0
        rows.append(LinearConstraint(coefs, 0.0, EQUAL, f"split mu_0[{mono.label(layout.names)}]"))
    return rows


def moment_matrix(measure: MeasureVar, order: int, n_vars: int) -> PsdBlock:
    """``M[i, j] = y(b_i * b_j)`` over the degree-``order`` basis of the measure."""
    return localizing_matrix(measure, Polynomial.constant(1.0, measure.ordering.n_x), order, n_vars,
                             label=f"M({measure.name})")


def localizing_matrix(measure: MeasureVar, g: Polynomial, order: int, n_vars: int,
                      label: str = "") -> PsdBlock:
    """``L[i, j] = sum_c g_c y(c * b_i * b_j)`` over the degree ``order - ceil(deg g / 2)`` basis."""
    if g.degree > 2 * order:
        raise ValueError(f"deg g = {g.degree} exceeds 2r = {2 * order}")
    half = order - math.ceil(max(g.degree, 0) / 2)
    basis = monomial_basis(measure.ordering.n_x, half, include_t=measure.include_t)
    entries: dict[tuple[int, int], dict[int, float]] = {}
    for i, bi in enumerate(basis):
        for j in range(i + 1):
            prod = bi * basis[j]
            acc: dict[int, float] = {}
            for gm, gc in g.terms.items():
                col = measure.column(gm * prod)
                acc[col] = acc.get(col, 0.0) + gc
            entries[(i, j)] = acc
    return PsdBlock.from_entries(len(basis), entries, n_vars,
                                 label=label or f"L({measure.name}; {g})")


# -- whole relaxation -----------------------------------------------------------------

def _box_polys(i: int, lo: float, hi: float, n_x: int) -> list[Polynomial]:
    x = Polynomial.state(i, n_x)
    return [x - lo, hi - x, (x - lo) * (hi - x)]


def _split_support(polys: Iterable[Polynomial]) -> tuple[tuple[Polynomial, ...], tuple[Polynomial, ...]]:
    """Deduplicate, drop trivial ones, and pull out pairs ``g >= 0, -g >= 0`` as ``g = 0``."""
    seen: dict[Polynomial, None] = {}
    for p in polys:
        if p.is_zero() or (p.degree == 0 and next(iter(p.terms.values())) > 0):
            continue
        seen.setdefault(p, None)
    inequalities, vanishing = [], []
    for p in seen:
        if -p in seen:
            if -p not in vanishing:
                vanishing.append(p)
        else:
            inequalities.append(p)
    return tuple(inequalities), tuple(vanishing)


def vanishing_rows(measure: MeasureVar, g: Polynomial, names: Sequence[str] = ()) -> list[LinearConstraint]:
    """``<g * m, y> = 0`` for every basis monomial ``m`` with ``deg(g m) <= 2r``.

    Equivalent to the pair of localizing constraints for ``g`` and ``-g``,
    which have no strictly feasible point and stall interior-point solvers.
    """
    rows = []
    for m in measure.basis:
        if m.degree + g.degree > measure.degree:
            continue
        coefs: dict[int, float] = {}
        for gm, gc in g.terms.items():
            col = measure.column(gm * m)
            coefs[col] = coefs.get(col, 0.0) + gc
        coefs = {c: a for c, a in coefs.items() if a != 0.0}
        if coefs:
            label = f"support {measure.name}: ({g.to_string(names or None)})*{m.label(names or None)} = 0"
            rows.append(LinearConstraint(coefs, 0.0, EQUAL, label))
    return rows


@dataclass
class Relaxation:
    """Assembled constraint skeleton; objectives are attached per solve."""

    problem: EstimationProblem
    order: int
    layout: Layout
    rows: list[LinearConstraint]
    lower: np.ndarray
    upper: np.ndarray
    blocks: list[PsdBlock]
    magnitude: np.ndarray
    tests: list[Monomial] = field(default_factory=list)
    ignored_data: list = field(default_factory=list)

    @property
    def n_vars(self) -> int:
        return self.layout.n_vars

    def moment_column(self, k: int, exponents: Sequence[int]) -> int:
        mono = Monomial(0, tuple(exponents))
        if mono.degree > 2 * self.order:
            raise ValueError(f"moment degree {mono.degree} exceeds 2r = {2 * self.order}")
        return self.layout.endpoint(k).column(mono)

    def mass_column(self, cell: int) -> int:
        return self.layout.cells[cell].mass_column

    def program(self, objective: dict[int, float] | None = None, sense: str = "minimize") -> ConicProgram:
        n = self.n_vars
        c = np.zeros(n)
        for col, a in (objective or {}).items():
            c[col] += a
        A, b, labels = self._equalities
        return ConicProgram(n, c, A, b, self.lower.copy(), self.upper.copy(), tuple(self.blocks), sense,
                            var_labels=self._var_labels, row_labels=labels, magnitude=self.magnitude)

    @cached_property
    def _equalities(self):
        eq = [r for r in self.rows if r.relation == EQUAL]
        data, ri, ci = [], [], []
        for r, row in enumerate(eq):
            for col, a in row.coefficients.items():
                ri.append(r)
                ci.append(col)
                data.append(a)
        A = sp.csr_matrix((data, (ri, ci)), shape=(len(eq), self.n_vars))
        return A, np.array([row.rhs for row in eq]), tuple(row.label for row in eq)

    @cached_property
    def _var_labels(self) -> tuple[str, ...]:
        return self.layout.var_labels()


def build_relaxation(problem: EstimationProblem, order: int, *, cells: bool = False,
                     localizers: bool = True) -> Relaxation:
    """Assemble every constraint of the order-``order`` relaxation.

    With ``cells=True`` the measure at the partition time is split into one
    measure per partition cell.
    """
    if order < 1:
        raise ValueError("relaxation order must be at least 1")
    if cells and problem.partition is None:
        raise ValueError("mass relaxation needs a partition")
    n_x, times, sys = problem.n_x, problem.times, problem.system
    deg = 2 * order
    t_var = Polynomial.time(n_x)
    global_polys = problem.global_set().inequalities

    measures: list[MeasureVar] = []
    offset = 0

    def add(kind, index, include_t, support, window=None, has_blocks=True):
        nonlocal offset
        ordering = MonomialOrdering(n_x, deg, include_t)
        ineqs, zeros = _split_support(support)
        m = MeasureVar(kind, index, include_t, deg, offset, ordering, ineqs, zeros, window, has_blocks)
        measures.append(m)
        offset += len(ordering)
        return m

    split_at = problem.partition.time_index if cells else None
    for k, tk in enumerate(times):
        support = [g.substitute_time(tk) for g in (*global_polys, *problem.support_at(k).inequalities)]
        add("endpoint", (k,), False, support, has_blocks=(k != split_at))
    for k in range(len(times) - 1):
        t0, t1 = times[k], times[k + 1]
        window = [t_var - t0, t1 - t_var, (t_var - t0) * (t1 - t_var)]
        add("occupation", (k, k + 1), True, [*global_polys, *window], (t0, t1))
    if cells:
        part = problem.partition
        base = [g.substitute_time(times[split_at])
                for g in (*global_polys, *problem.support_at(split_at).inequalities)]
        for j, cell in enumerate(part.cells):
            box = [p for s, (lo, hi) in zip(part.states, cell) for p in _box_polys(s, lo, hi, n_x)]
            add("cell", (j,), False, [*base, *box])

    layout = Layout(measures, times, problem.names)
    n = layout.n_vars

    tests = test_monomials(order, sys)
    rows: list[LinearConstraint] = []
    for k in range(len(times) - 1):
        rows.extend(liouville_rows(sys, layout, k, order, tests))
    rows.extend(normalization_rows(layout))
    rows.extend(split_rows(layout))
    if localizers:
        for m in measures:
            if m.has_blocks:
                for g in m.vanishing:
                    rows.extend(vanishing_rows(m, g, problem.names))

    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    ignored = []
    data = list(problem.moments)
    if problem.oracle is not None and problem.oracle.pinned:
        from .problem import MomentBound
        data += [MomentBound(0, e, v, v) for e, v in problem.oracle.pin_values(deg, n_x)]
    for mb in data:
        if mb.degree > deg:
            ignored.append(mb)
            continue
        col = layout.endpoint(mb.time_index).column(Monomial(0, mb.exponents))
        lower[col] = max(lower[col], mb.lower)
        upper[col] = min(upper[col], mb.upper)
    if ignored:
        log.debug("%d moment data above degree %d are not used at order %d", len(ignored), deg, order)
    for row in rows:
        if row.relation == EQUAL:
            continue
        (col, a), = row.coefficients.items()
        bound = row.rhs / a
        if (row.relation == LOWER) == (a > 0):
            lower[col] = max(lower[col], bound)
        else:
            upper[col] = min(upper[col], bound)

    blocks: list[PsdBlock] = []
    for m in measures:
        if not m.has_blocks:
            continue
        blocks.append(moment_matrix(m, order, n))
        if localizers:
            for g in m.support:
                if g.degree > deg:
                    log.warning("support polynomial %s of degree %d ignored at order %d", g, g.degree, order)
                    continue
                blocks.append(localizing_matrix(m, g, order, n,
                                                label=f"L({m.name}; {g.to_string(problem.names)})"))

    magnitude = _magnitudes(layout, problem.box)
    return Relaxation(problem, order, layout, rows, lower, upper, blocks, magnitude, tests, ignored)


def _magnitudes(layout: Layout, box: Sequence[tuple[float, float]]) -> np.ndarray:
    """Bound on ``|y_col|`` valid for every nonnegative measure of admissible mass on the box."""
    radius = [max(abs(lo), abs(hi)) for lo, hi in box]
    out = np.empty(layout.n_vars)
    for m in layout.measures:
        if m.kind == "occupation":
            t0, t1 = m.window
            mass, t_rad = t1 - t0, max(abs(t0), abs(t1))
        else:
            mass, t_rad = 1.0, 1.0
        for i, mono in enumerate(m.basis):
            val = mass * t_rad ** mono.t_exp
            for r, e in zip(radius, mono.x_exps):
                if e:
                    val *= r ** e
            out[m.offset + i] = val
    return out


def assemble(problem: EstimationProblem, order: int, objective: tuple | None = None,
             sense: str = "maximize", localizers: bool = True) -> ConicProgram:
    """One program with objective ``("moment", k, exponents)``, ``("mass", cell)`` or None."""
    if objective is None:
        return build_relaxation(problem, order, localizers=localizers).program()
    kind = objective[0]
    if kind == "moment":
        relax = build_relaxation(problem, order, localizers=localizers)
        col = relax.moment_column(objective[1], objective[2])
    elif kind == "mass":
        relax = build_relaxation(problem, order, cells=True, localizers=localizers)
        col = relax.mass_column(objective[1])
    else:
        raise ValueError(f"unknown objective {objective!r}")
    return relax.program({col: 1.0}, sense)

"""Solver-agnostic conic programs, the interior-point backend, SDPA export.

A :class:`ConicProgram` optimizes a linear objective over a vector ``x``
subject to linear equalities, per-variable bounds and linear matrix
inequalities ``C + sum_k x_k F_k >= 0`` (one :class:`PsdBlock` each).
Backends are plain functions ``(program, settings) -> SolveReport``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

__all__ = [
    "PsdBlock", "ConicProgram", "SolverSettings", "SolveReport", "solve",
    "register_backend", "export_sdpa", "sdpa_data", "SdpaData",
    "OPTIMAL", "INFEASIBLE", "UNBOUNDED", "INACCURATE", "ERROR",
]

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
INACCURATE = "inaccurate"
ERROR = "error"


@dataclass(frozen=True, eq=False)
class PsdBlock:
    """Symmetric affine matrix ``M(x)`` stored by its lower triangle.

    Entry ``e`` sits at ``(rows[e], cols[e])`` with ``rows[e] >= cols[e]`` and
    equals ``offset[e] + coeffs[e] @ x``.
    """

    size: int
    rows: np.ndarray
    cols: np.ndarray
    coeffs: sp.csr_matrix
    offset: np.ndarray
    label: str = ""

    def __post_init__(self):
        if np.any(self.rows < self.cols):
            raise ValueError("PSD entries must be stored lower-triangular")
        if self.coeffs.shape[0] != len(self.rows) or len(self.offset) != len(self.rows):
            raise ValueError("entry arrays disagree in length")

    @classmethod
    def from_entries(cls, size: int, entries: dict[tuple[int, int], dict[int, float]],
                     n_vars: int, constants: dict[tuple[int, int], float] | None = None,
                     label: str = "") -> PsdBlock:
        constants = constants or {}
        keys = sorted(set(entries) | set(constants))
        rows = np.array([max(i, j) for i, j in keys], dtype=np.int64)
        cols = np.array([min(i, j) for i, j in keys], dtype=np.int64)
        data, ri, ci = [], [], []
        for e, key in enumerate(keys):
            for var, c in entries.get(key, {}).items():
                if c != 0.0:
                    ri.append(e)
                    ci.append(var)
                    data.append(c)
        coeffs = sp.csr_matrix((data, (ri, ci)), shape=(len(keys), n_vars))
        offset = np.array([constants.get(k, 0.0) for k in keys])
        return cls(size, rows, cols, coeffs, offset, label)

    def values(self, x: np.ndarray) -> np.ndarray:
        return self.offset + self.coeffs @ x

    def matrix(self, x: np.ndarray) -> np.ndarray:
        M = np.zeros((self.size, self.size))
        v = self.values(x)
        M[self.rows, self.cols] = v
        M[self.cols, self.rows] = v
        return M

    def variables(self) -> np.ndarray:
        return np.unique(self.coeffs.indices)


@dataclass(frozen=True, eq=False)
class ConicProgram:
    n_vars: int
    objective: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    blocks: tuple[PsdBlock, ...] = ()
    sense: str = "minimize"
    var_labels: tuple[str, ...] | None = None
    row_labels: tuple[str, ...] | None = None
    magnitude: np.ndarray | None = None  # a-priori |x_i| bound, used to vet infeasibility rays

    def __post_init__(self):
        if self.sense not in ("minimize", "maximize"):
            raise ValueError(f"unknown sense {self.sense!r}")
        n = self.n_vars
        if self.objective.shape != (n,) or self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("objective and bounds must have one entry per variable")
        if self.A_eq.shape[1] != n or self.A_eq.shape[0] != len(self.b_eq):
            raise ValueError("equality system has wrong shape")
        for b in self.blocks:
            if b.coeffs.shape[1] != n:
                raise ValueError(f"block {b.label!r} references {b.coeffs.shape[1]} variables, program has {n}")

    @classmethod
    def build(cls, n_vars: int, *, objective=None, eq_rows: Sequence[tuple[dict[int, float], float]] = (),
              lower=None, upper=None, blocks: Sequence[PsdBlock] = (), sense: str = "minimize",
              **kw) -> ConicProgram:
        """Convenience constructor from coefficient dictionaries."""
        data, ri, ci, b = [], [], [], []
        for r, (coefs, rhs) in enumerate(eq_rows):
            for var, c in coefs.items():
                ri.append(r)
                ci.append(var)
                data.append(c)
            b.append(rhs)
        A = sp.csr_matrix((data, (ri, ci)), shape=(len(eq_rows), n_vars))
        c = np.zeros(n_vars) if objective is None else np.asarray(objective, dtype=float)
        lo = np.full(n_vars, -np.inf) if lower is None else np.asarray(lower, dtype=float)
        hi = np.full(n_vars, np.inf) if upper is None else np.asarray(upper, dtype=float)
        return cls(n_vars, c, A, np.asarray(b, dtype=float), lo, hi, tuple(blocks), sense, **kw)

    def with_objective(self, objective: np.ndarray, sense: str) -> ConicProgram:
        return replace(self, objective=np.asarray(objective, dtype=float), sense=sense)

    def residuals(self, x: np.ndarray) -> dict[str, float]:
        """Worst violations of ``x``: equality residual, bound excess, most negative eigenvalue."""
        eq = float(np.max(np.abs(self.A_eq @ x - self.b_eq), initial=0.0))
        bnd = float(max(np.max(self.lower - x, initial=0.0), np.max(x - self.upper, initial=0.0), 0.0))
        eig = min((float(np.linalg.eigvalsh(b.matrix(x))[0]) for b in self.blocks), default=0.0)
        return {"equality": eq, "bounds": bnd, "min_eigenvalue": eig}

    def label(self, i: int) -> str:
        return self.var_labels[i] if self.var_labels else f"x[{i}]"

    def dump(self) -> str:
        """Readable listing of rows, bounds and blocks with variable labels."""
        lines = [f"{self.sense} " + _affine_text({i: c for i, c in enumerate(self.objective) if c}, 0.0, self.label),
                 f"variables: {self.n_vars}", f"equalities: {self.A_eq.shape[0]}"]
        A = self.A_eq.tocsr()
        for r in range(A.shape[0]):
            lo, hi = A.indptr[r], A.indptr[r + 1]
            coefs = dict(zip(A.indices[lo:hi].tolist(), A.data[lo:hi].tolist()))
            tag = f"  [{self.row_labels[r]}]" if self.row_labels else ""
            lines.append(f"  r{r}: {_affine_text(coefs, 0.0, self.label)} = {self.b_eq[r]:.17g}{tag}")
        bounded = [i for i in range(self.n_vars) if np.isfinite(self.lower[i]) or np.isfinite(self.upper[i])]
        lines.append(f"bounds: {len(bounded)}")
        for i in bounded:
            lines.append(f"  {self.lower[i]:.17g} <= {self.label(i)} <= {self.upper[i]:.17g}")
        lines.append(f"psd blocks: {len(self.blocks)}")
        for b in self.blocks:
            lines.append(f"  block {b.label} ({b.size}x{b.size})")
            C = b.coeffs.tocsr()
            for e in range(len(b.rows)):
                lo, hi = C.indptr[e], C.indptr[e + 1]
                coefs = dict(zip(C.indices[lo:hi].tolist(), C.data[lo:hi].tolist()))
                lines.append(f"    ({b.rows[e]},{b.cols[e]}): {_affine_text(coefs, b.offset[e], self.label)}")
        return "\n".join(lines) + "\n"


def _affine_text(coefs: dict[int, float], const: float, label: Callable[[int], str]) -> str:
    parts = [f"{c:+.6g}*{label(i)}" for i, c in sorted(coefs.items())]
    if const or not parts:
        parts.append(f"{const:+.6g}")
    return " ".join(parts)


# -- solving ------------------------------------------------------------------

@dataclass(frozen=True)
class SolverSettings:
    tol_feas: float = 1e-8
    tol_gap: float = 1e-8
    tol_inaccurate: float = 1e-5
    max_iter: int = 200
    # Clarabel's default (1e-8) lets the KKT solves drift on moment programs whose optimal
    # moment matrices are singular; the stalled iterates come back one digit short.
    static_regularization: float = 1e-7
    time_limit: float = math.inf
    certificate_margin: float = 1e-6
    verbose: bool = False


@dataclass
class SolveReport:
    status: str
    objective: float | None = None
    dual_objective: float | None = None
    x: np.ndarray | None = None
    iterations: int = 0
    wall_time: float = 0.0
    settings: SolverSettings = field(default_factory=SolverSettings)
    message: str = ""
    certificate_margin: float | None = None
    backend_status: str = ""

    @property
    def has_value(self) -> bool:
        return self.status in (OPTIMAL, INACCURATE)

    def bound(self, sense: str) -> float:
        """Conservative optimal value: the weaker of primal and dual objectives."""
        vals = [v for v in (self.objective, self.dual_objective) if v is not None and math.isfinite(v)]
        if not self.has_value or not vals:
            return math.inf if sense == "maximize" else -math.inf
        return max(vals) if sense == "maximize" else min(vals)

    def summary(self) -> dict:
        return {"status": self.status, "objective": self.objective, "dual_objective": self.dual_objective,
                "iterations": self.iterations, "wall_time": self.wall_time, "message": self.message,
                "certificate_margin": self.certificate_margin, "backend_status": self.backend_status,
                "settings": asdict(self.settings)}


Backend = Callable[[ConicProgram, SolverSettings], SolveReport]
_BACKENDS: dict[str, Backend] = {}


def register_backend(name: str, fn: Backend) -> None:
    _BACKENDS[name] = fn


def solve(program: ConicProgram, settings: SolverSettings | None = None,
          backend: str = "clarabel") -> SolveReport:
    """Solve with the named backend; failures come back as ``status='error'``."""
    settings = settings or SolverSettings()
    start = time.perf_counter()
    try:
        fn = _BACKENDS[backend]
        report = fn(program, settings)
    except Exception as exc:  # backend failures must never escape
        log.exception("backend %s failed", backend)
        report = SolveReport(ERROR, message=f"{type(exc).__name__}: {exc}", settings=settings)
    report.wall_time = time.perf_counter() - start
    return report


# -- clarabel backend -----------------------------------------------------------

def _svec_index(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # packed upper triangle, column-major; (i >= j) lower entry maps to upper (j, i)
    return rows * (rows + 1) // 2 + cols


class _Standard:
    """Program in the form ``A x + s = b``, ``s`` in zero x nonneg x PSD cones."""

    def __init__(self, program: ConicProgram):
        import clarabel

        n = program.n_vars
        lo, hi = program.lower, program.upper
        fixed = np.flatnonzero(np.isfinite(lo) & (lo == hi))
        up = np.flatnonzero(np.isfinite(hi) & ~(lo == hi))
        dn = np.flatnonzero(np.isfinite(lo) & ~(lo == hi))
        I = sp.identity(n, format="csr")

        zero_A = sp.vstack([program.A_eq, I[fixed]], format="csr")
        zero_b = np.concatenate([program.b_eq, lo[fixed]])
        nn_A = sp.vstack([I[up], -I[dn]], format="csr")
        nn_b = np.concatenate([hi[up], -lo[dn]])

        parts_A, parts_b = [zero_A, nn_A], [zero_b, nn_b]
        cones = []
        if zero_A.shape[0]:
            cones.append(clarabel.ZeroConeT(zero_A.shape[0]))
        if nn_A.shape[0]:
            cones.append(clarabel.NonnegativeConeT(nn_A.shape[0]))
        self.psd_slices = []
        offset = zero_A.shape[0] + nn_A.shape[0]
        for blk in program.blocks:
            dim = blk.size * (blk.size + 1) // 2
            pos = _svec_index(blk.rows, blk.cols)
            scale = np.where(blk.rows == blk.cols, 1.0, math.sqrt(2.0))
            P = sp.csr_matrix((scale, (pos, np.arange(len(pos)))), shape=(dim, len(pos)))
            parts_A.append(-(P @ blk.coeffs))
            parts_b.append(P @ blk.offset)
            cones.append(clarabel.PSDTriangleConeT(blk.size))
            self.psd_slices.append((offset, blk.size))
            offset += dim
        self.A = sp.vstack(parts_A, format="csc") if parts_A else sp.csc_matrix((0, n))
        self.b = np.concatenate(parts_b) if parts_b else np.zeros(0)
        self.cones = cones
        self.n_zero = zero_A.shape[0]
        self.n_nonneg = nn_A.shape[0]

    def project_dual(self, z: np.ndarray) -> np.ndarray:
        """Project onto the dual cone (free x nonneg x PSD)."""
        z = z.copy()
        s, e = self.n_zero, self.n_zero + self.n_nonneg
        z[s:e] = np.maximum(z[s:e], 0.0)
        for off, size in self.psd_slices:
            dim = size * (size + 1) // 2
            M = _unsvec(z[off:off + dim], size)
            w, V = np.linalg.eigh(M)
            z[off:off + dim] = _svec((V * np.maximum(w, 0.0)) @ V.T)
        return z


def _unsvec(v: np.ndarray, n: int) -> np.ndarray:
    M = np.zeros((n, n))
    iu = np.triu_indices(n)
    # triu_indices is row-major; packed order is column-major of the upper triangle
    order = np.lexsort((iu[0], iu[1]))
    r, c = iu[0][order], iu[1][order]
    vals = np.where(r == c, v, v / math.sqrt(2.0))
    M[r, c] = vals
    M[c, r] = vals
    return M


def _svec(M: np.ndarray) -> np.ndarray:
    n = M.shape[0]
    iu = np.triu_indices(n)
    order = np.lexsort((iu[0], iu[1]))
    r, c = iu[0][order], iu[1][order]
    return np.where(r == c, M[r, c], M[r, c] * math.sqrt(2.0))


_RAY_ROUNDOFF = 1e-10


def _certificate_margin(program: ConicProgram, std: _Standard, z: np.ndarray) -> float:
    """Margin of a primal infeasibility ray, after projection and normalization.

    For any feasible ``x``, ``b'z - (A'z)'x = z's >= 0``.  With ``|x_i| <= m_i``
    this is impossible once ``-b'z - sum |A'z|_i m_i > 0``; that quantity is
    the margin, for ``z`` scaled to unit max-norm.
    """
    z = std.project_dual(np.asarray(z, dtype=float))
    scale = np.max(np.abs(z), initial=0.0)
    if scale == 0.0 or not np.isfinite(scale):
        return -math.inf
    z = z / scale
    Atz = std.A.T @ z
    mag = program.magnitude
    if mag is None:
        mag = np.maximum(np.abs(program.lower), np.abs(program.upper))
    slack = np.abs(Atz)
    # unbounded variables tolerate only round-off in A'z
    free = ~np.isfinite(mag)
    if np.any(slack[free] > _RAY_ROUNDOFF):
        return -math.inf
    spill = np.where(free, 0.0, slack * np.where(free, 0.0, mag))
    return float(-(std.b @ z) - spill.sum())


def _clarabel_backend(program: ConicProgram, settings: SolverSettings) -> SolveReport:
    import clarabel

    std = _Standard(program)
    n = program.n_vars
    sign = 1.0 if program.sense == "minimize" else -1.0
    q = sign * program.objective
    P = sp.csc_matrix((n, n))

    opts = clarabel.DefaultSettings()
    opts.verbose = settings.verbose
    opts.tol_feas = settings.tol_feas
    opts.tol_gap_abs = settings.tol_gap
    opts.tol_gap_rel = settings.tol_gap
    opts.reduced_tol_feas = settings.tol_inaccurate
    opts.reduced_tol_gap_abs = settings.tol_inaccurate
    opts.reduced_tol_gap_rel = settings.tol_inaccurate
    opts.max_iter = settings.max_iter
    opts.static_regularization_constant = settings.static_regularization
    if math.isfinite(settings.time_limit):
        opts.time_limit = settings.time_limit
    opts.max_threads = 1

    if not std.cones:
        # nothing constrains x: the optimum is 0 or unbounded
        if np.any(q != 0):
            return SolveReport(UNBOUNDED, settings=settings, message="no constraints")
        return SolveReport(OPTIMAL, 0.0, 0.0, np.zeros(n), settings=settings)

    solver = clarabel.DefaultSolver(P, q, std.A, std.b, std.cones, opts)
    sol = solver.solve()
    status = str(sol.status).split(".")[-1]
    x = np.asarray(sol.x)
    report = SolveReport(ERROR, iterations=int(sol.iterations), settings=settings, backend_status=status)

    if status in ("Solved", "AlmostSolved"):
        report.status = OPTIMAL if status == "Solved" else INACCURATE
        report.objective = sign * float(sol.obj_val)
        report.dual_objective = sign * float(sol.obj_val_dual)
        report.x = x
        info = solver.get_info()
        report.message = f"gap_abs={info.gap_abs:.3g} gap_rel={info.gap_rel:.3g}"
    elif status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        report.status = INFEASIBLE
        report.certificate_margin = _certificate_margin(program, std, np.asarray(sol.z))
        report.message = f"numerically infeasible; ray margin {report.certificate_margin:.3g}"
    elif status in ("DualInfeasible", "AlmostDualInfeasible"):
        report.status = UNBOUNDED
    elif status in ("MaxIterations", "MaxTime", "InsufficientProgress", "NumericalError"):
        info = solver.get_info()
        gap = min(info.gap_abs, info.gap_rel)
        feas = max(info.res_primal, info.res_dual)
        if gap <= settings.tol_inaccurate and feas <= settings.tol_inaccurate:
            report.status = INACCURATE
            report.objective = sign * float(sol.obj_val)
            report.dual_objective = sign * float(sol.obj_val_dual)
            report.x = x
        report.message = f"{status}: gap={gap:.3g} residual={feas:.3g}"
    else:
        report.message = status
    return report


register_backend("clarabel", _clarabel_backend)


# -- SDPA sparse export -------------------------------------------------------------

@dataclass
class SdpaData:
    """SDPA primal data: minimize ``c'x`` s.t. ``sum_i x_i F_i - F_0 >= 0``.

    ``entries`` maps ``(matno, blkno, i, j)`` (1-based, ``i <= j``) to values;
    negative block sizes denote diagonal blocks.
    """

    c: np.ndarray
    block_sizes: list[int]
    entries: dict[tuple[int, int, int, int], float]


def sdpa_data(program: ConicProgram) -> SdpaData:
    n = program.n_vars
    entries: dict[tuple[int, int, int, int], float] = {}
    sizes: list[int] = []

    diag: list[tuple[dict[int, float], float]] = []  # a'x - b >= 0
    A = program.A_eq.tocsr()
    for r in range(A.shape[0]):
        lo, hi = A.indptr[r], A.indptr[r + 1]
        coefs = dict(zip(A.indices[lo:hi].tolist(), A.data[lo:hi].tolist()))
        diag.append((coefs, float(program.b_eq[r])))
        diag.append(({i: -c for i, c in coefs.items()}, -float(program.b_eq[r])))
    for i in range(n):
        if np.isfinite(program.lower[i]):
            diag.append(({i: 1.0}, float(program.lower[i])))
        if np.isfinite(program.upper[i]):
            diag.append(({i: -1.0}, -float(program.upper[i])))

    blk = 0
    if diag:
        blk += 1
        sizes.append(-len(diag))
        for r, (coefs, rhs) in enumerate(diag, start=1):
            for i, c in coefs.items():
                if c != 0.0:
                    entries[(i + 1, blk, r, r)] = c
            if rhs != 0.0:
                entries[(0, blk, r, r)] = rhs
    for b in program.blocks:
        blk += 1
        sizes.append(b.size)
        C = b.coeffs.tocsr()
        for e in range(len(b.rows)):
            i, j = int(b.cols[e]) + 1, int(b.rows[e]) + 1  # upper triangle
            if b.offset[e] != 0.0:
                entries[(0, blk, i, j)] = -float(b.offset[e])
            for p in range(C.indptr[e], C.indptr[e + 1]):
                if C.data[p] != 0.0:
                    entries[(int(C.indices[p]) + 1, blk, i, j)] = float(C.data[p])
    c = program.objective if program.sense == "minimize" else -program.objective
    return SdpaData(np.asarray(c, dtype=float).copy(), sizes, entries)


def _g17(v: float) -> str:
    return format(float(v), ".17g")


def export_sdpa(program: ConicProgram, path: str | Path, comment: str = "") -> Path:
    """Write ``program`` as an SDPA sparse (``.dat-s``) file.

    Equality rows become pairs of opposite inequalities and variable bounds
    single inequalities, all inside one leading diagonal block.  A maximize
    program is written with a negated objective.
    """
    data = sdpa_data(program)
    path = Path(path)
    lines = [f'"{comment or "momentbound export"} (sense={program.sense})',
             f"{program.n_vars} = mDIM",
             f"{len(data.block_sizes)} = nBLOCK",
             " ".join(str(s) for s in data.block_sizes) + " = bLOCKsTRUCT",
             " ".join(_g17(v) for v in data.c)]
    for key in sorted(data.entries):
        m, b, i, j = key
        lines.append(f"{m} {b} {i} {j} {_g17(data.entries[key])}")
    path.write_text("\n".join(lines) + "\n")
    return path

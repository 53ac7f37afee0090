"""Command-line front end.

Every subcommand reads one problem file and writes its outputs into ``--out``.
Flags may also be supplied through ``MOMENTBOUND_<FLAG>`` environment
variables (for example ``MOMENTBOUND_ORDER=3``); command-line flags win.

Exit codes: 0 success, 1 unreadable or invalid input, 2 solver failure.
``validate`` additionally returns 3 when the model is invalidated and 4 when
the answer is undecided.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .conic import ERROR, SolverSettings, export_sdpa
from .engine import INVALIDATED, NOT_INVALIDATED, ResultSet, check_consistency, run_queries
from .problem import EstimationProblem, ProblemError, Query, load_problem, problem_to_dict, validate
from .relaxation import build_relaxation

log = logging.getLogger("momentbound")

ENV_PREFIX = "MOMENTBOUND_"

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_INVALIDATED, EXIT_UNDECIDED = 0, 1, 2, 3, 4


@dataclass
class RunConfig:
    subcommand: str
    problem: str
    out: str = "."
    order: int | None = None
    tol_feas: float | None = None
    tol_gap: float | None = None
    jobs: int = 1
    seed: int | None = None
    options: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.order is not None and self.order < 1:
            raise ValueError("--order must be at least 1")
        if self.jobs < 1:
            raise ValueError("--jobs must be at least 1")

    def settings(self) -> SolverSettings:
        s = SolverSettings()
        if self.tol_feas is not None:
            s = replace(s, tol_feas=self.tol_feas)
        if self.tol_gap is not None:
            s = replace(s, tol_gap=self.tol_gap)
        # the fallback tolerance must not be tighter than the main one
        return replace(s, tol_inaccurate=max(s.tol_inaccurate, s.tol_feas, s.tol_gap))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _env(name: str, cast, default=None):
    raw = os.environ.get(ENV_PREFIX + name.upper())
    if raw is None or raw == "":
        return default
    try:
        return cast(raw)
    except ValueError:
        raise SystemExit(f"error: bad value {raw!r} for {ENV_PREFIX}{name.upper()}")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("problem", help="problem JSON file")
    common.add_argument("--out", default=_env("out", str, "."), help="output directory")
    common.add_argument("--order", type=int, default=_env("order", int),
                        help="relaxation order r (overrides the per-query order)")
    common.add_argument("--tol-feas", type=float, default=_env("tol_feas", float))
    common.add_argument("--tol-gap", type=float, default=_env("tol_gap", float))
    common.add_argument("--jobs", type=int, default=_env("jobs", int, 1), help="parallel queries")
    common.add_argument("--seed", type=int, default=_env("seed", int), help="oracle sampling seed")
    common.add_argument("--dump-program", metavar="FILE",
                        help="write a readable dump of the first assembled program")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="momentbound",
                                description="Outer moment bounds for polynomial ODE state distributions.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="subcommand", required=True)

    bm = sub.add_parser("bound-moments", parents=[common], help="interval bounds on moment queries")
    bm.add_argument("--overlay", action="store_true", help="add Monte Carlo oracle moments to the plot data")
    bm.add_argument("--no-timing", action="store_true", help="leave wall_ms empty so outputs are reproducible")

    ms = sub.add_parser("bound-mass", parents=[common], help="probability-mass bounds on partition cells")
    ms.add_argument("--no-timing", action="store_true")

    va = sub.add_parser("validate", parents=[common], help="search for an invalidation certificate")
    va.add_argument("--min-order", type=int, default=1)

    orc = sub.add_parser("oracle", parents=[common], help="fabricate moment data and cell masses")
    orc.add_argument("--samples", type=int, default=_env("samples", int))
    orc.add_argument("--slack", type=float, default=0.01, help="relative half-width of moment intervals")
    orc.add_argument("--degree", type=int, default=4, help="highest moment degree")
    orc.add_argument("--times", type=int, nargs="*", help="time indices to measure (default: all but 0)")
    orc.add_argument("--marginal", action="store_true", help="pure powers of single states only")

    ex = sub.add_parser("export-sdpa", parents=[common], help="write SDPA files for queries")
    ex.add_argument("--query", action="append", default=[], help="query id (repeatable; default all)")
    return p


def _load(path: str) -> EstimationProblem:
    p = Path(path)
    if not p.is_file():
        raise ProblemError([_diag(f"no such file: {path}")])
    return load_problem(p)


def _diag(msg: str):
    from .problem import Diagnostic
    return Diagnostic("error", "file", msg)


def _exit_for(results: ResultSet) -> int:
    for r in results.results:
        if r.error is not None:
            return EXIT_SOLVER
        b = r.bound
        if b is not None and ERROR in (b.status_min, b.status_max):
            return EXIT_SOLVER
    return EXIT_OK


def _dump(problem: EstimationProblem, order: int, cells: bool, path: str | None) -> None:
    if not path:
        return
    program = build_relaxation(problem, order, cells=cells).program()
    Path(path).write_text(program.dump())
    log.info("program dump written to %s", path)


def _strip_timing(results: ResultSet) -> None:
    for r in results.results:
        r.wall_ms = 0.0


def _first_order(problem: EstimationProblem, cfg: RunConfig, kind: str) -> int:
    if cfg.order is not None:
        return cfg.order
    return next((q.order for q in problem.queries if q.kind == kind), 2)


# -- subcommands --------------------------------------------------------------

def cmd_bound_moments(cfg: RunConfig, problem: EstimationProblem) -> int:
    queries = [q for q in problem.queries if q.kind == "moment"]
    if not queries:
        log.warning("problem has no moment queries")
    _dump(problem, _first_order(problem, cfg, "moment"), False, cfg.options.get("dump_program"))
    results = run_queries(problem, queries, cfg.settings(), cfg.jobs, cfg.order)
    if cfg.options.get("no_timing"):
        _strip_timing(results)
    threshold = cfg.settings().certificate_margin
    extra = {"config": cfg.to_dict(),
             "invalidated": [r.query.id for r in results.invalidations(threshold)]}
    out = Path(cfg.out)
    results.write(out, extra)
    overlay = None
    if cfg.options.get("overlay") and problem.oracle is not None:
        overlay = _oracle_overlay(problem, queries, cfg, out)
    (out / "plot_moments.py").write_text(_moment_plot_script("results.csv", overlay))
    for r in results.results:
        if r.bound is not None:
            b = r.bound
            print(f"{r.query.id:>16}  t={b.time:<8.4g} [{b.lower:.8g}, {b.upper:.8g}]  "
                  f"{b.status_min}/{b.status_max}")
        else:
            print(f"{r.query.id:>16}  error: {r.error}")
    return _exit_for(results)


def _oracle_overlay(problem: EstimationProblem, queries: Sequence[Query], cfg: RunConfig, out: Path) -> str:
    from .oracle import sample_moments

    run = _sample_run(problem, cfg)
    times = problem.times
    exps = sorted({q.exponents for q in queries if q.exponents is not None})
    degree = max((sum(e) for e in exps), default=1)
    table = sample_moments(problem.system, problem.oracle, times, max(degree, 1), run)
    lines = ["time,target,mean,stderr"]
    for k, t in enumerate(times):
        for e in exps:
            j = table.exponents.index(e)
            lines.append(f"{t!r},{' '.join(map(str, e))},{table.mean[k, j]!r},{table.stderr[k, j]!r}")
    (out / "oracle_moments.csv").write_text("\n".join(lines) + "\n")
    return "oracle_moments.csv"


def cmd_bound_mass(cfg: RunConfig, problem: EstimationProblem) -> int:
    part = problem.partition
    if part is None:
        raise ProblemError([_diag("problem declares no partition")])
    queries = [q for q in problem.queries if q.kind == "mass"]
    if not queries:
        order = _first_order(problem, cfg, "mass")
        queries = [Query("mass", order, f"cell{j}", cell=j) for j in range(part.n_cells)]
    _dump(problem, _first_order(problem, cfg, "mass"), True, cfg.options.get("dump_program"))
    results = run_queries(problem, queries, cfg.settings(), cfg.jobs, cfg.order)
    if cfg.options.get("no_timing"):
        _strip_timing(results)
    out = Path(cfg.out)
    results.write(out, {"config": cfg.to_dict()})

    names = [problem.names[s] for s in part.states]
    header = ["cell", *(f"{n}_{side}" for n in names for side in ("lo", "hi")), "lower", "upper"]
    rows = [",".join(header)]
    for r in results.results:
        if r.bound is None or r.query.cell is None:
            continue
        cell = part.cells[r.query.cell]
        vals = [str(r.query.cell), *(repr(float(v)) for lohi in cell for v in lohi),
                repr(r.bound.lower), repr(r.bound.upper)]
        rows.append(",".join(vals))
    (out / "mass_grid.csv").write_text("\n".join(rows) + "\n")
    if len(names) == 2:
        (out / "plot_mass.py").write_text(_mass_plot_script("mass_grid.csv", names))
    bounds = results.bounds
    if bounds:
        lo = sum(b.lower for b in bounds)
        hi = sum(b.upper for b in bounds)
        best = max(bounds, key=lambda b: b.upper)
        print(f"{len(bounds)} cells: sum of lower bounds {lo:.6g}, sum of upper bounds {hi:.6g}")
        print(f"largest upper bound {best.upper:.6g} in cell {best.query.cell} "
              f"{part.cells[best.query.cell]}")
    return _exit_for(results)


def cmd_validate(cfg: RunConfig, problem: EstimationProblem) -> int:
    max_order = _first_order(problem, cfg, "consistency")
    min_order = min(cfg.options.get("min_order", 1), max_order)
    settings = cfg.settings()
    verdict = check_consistency(problem, max_order, settings, min_order=min_order)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"problem": problem.name, "outcome": verdict.outcome, "order": verdict.order,
               "margin": verdict.margin, "message": verdict.message,
               "reports": [r.summary() for r in verdict.reports], "config": cfg.to_dict()}
    name = "certificate.json" if verdict.outcome == INVALIDATED else "verdict.json"
    (out / name).write_text(json.dumps(payload, indent=2) + "\n")
    print(f"{verdict.outcome} (order {verdict.order}): {verdict.message}")
    if verdict.outcome == INVALIDATED:
        return EXIT_INVALIDATED
    if verdict.outcome == NOT_INVALIDATED:
        return EXIT_OK
    return EXIT_UNDECIDED


def _sample_run(problem: EstimationProblem, cfg: RunConfig):
    from .oracle import SampleRun

    s = dict(problem.oracle_settings)
    seed = cfg.seed if cfg.seed is not None else int(s.get("seed", 0))
    n = cfg.options.get("samples") or int(s.get("n_samples", 10_000))
    return SampleRun(seed=seed, n_samples=n, step=float(s.get("step", 1e-3)))


def cmd_oracle(cfg: RunConfig, problem: EstimationProblem) -> int:
    from .oracle import cell_masses, sample_moments, table_to_bounds

    if problem.oracle is None or not problem.oracle.is_complete(problem.n_x):
        raise ProblemError([_diag("problem needs an oracle law for every state")])
    run = _sample_run(problem, cfg)
    slack = float(cfg.options.get("slack", 0.01))
    degree = int(cfg.options.get("degree", 4))
    idx = cfg.options.get("times")
    if not idx:
        idx = list(range(1, problem.n_times)) or [0]
    times = [problem.times[k] for k in idx]
    table = sample_moments(problem.system, problem.oracle, times, degree, run,
                           time_indices=idx, marginal=bool(cfg.options.get("marginal")))
    bounds = table_to_bounds(table, slack)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = [{"time_index": b.time_index, "exponents": list(b.exponents), "lower": b.lower, "upper": b.upper}
            for b in bounds]
    meta = {"seed": run.seed, "n_samples": run.n_samples, "step": run.step, "slack": slack}
    (out / "moments.json").write_text(json.dumps({"sampling": meta, "moments": data}, indent=2) + "\n")
    (out / "sample_moments.json").write_text(json.dumps({"sampling": meta, **table.to_dict()}, indent=2) + "\n")
    fed = problem_to_dict(replace(problem, moments=tuple(bounds)))
    (out / "problem_with_data.json").write_text(json.dumps(fed, indent=2) + "\n")
    print(f"{len(bounds)} moment intervals from {run.n_samples} samples (seed {run.seed}, slack {slack:g})")
    if problem.partition is not None:
        p, se = cell_masses(problem.oracle, problem.partition, problem.n_x, run)
        lines = ["cell,mass,stderr"] + [f"{j},{p[j]!r},{se[j]!r}" for j in range(len(p))]
        (out / "masses.csv").write_text("\n".join(lines) + "\n")
        print(f"cell masses for {len(p)} cells written")
    return EXIT_OK


def cmd_export_sdpa(cfg: RunConfig, problem: EstimationProblem) -> int:
    wanted = set(cfg.options.get("query") or [])
    queries = [q for q in problem.queries if not wanted or q.id in wanted]
    missing = wanted - {q.id for q in queries}
    if missing:
        raise ProblemError([_diag(f"unknown query id {m!r}") for m in sorted(missing)])
    if not queries:
        log.warning("no queries selected; nothing exported")
        print("no queries selected; nothing exported")
        return EXIT_OK
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    for q in queries:
        order = cfg.order or q.order
        if q.kind == "consistency":
            relax = build_relaxation(problem, order)
            export_sdpa(relax.program(), out / f"{q.id}.dat-s", f"{q.id} feasibility")
            continue
        prob, k = problem, q.time_index
        if q.kind == "moment" and k is None:
            prob, k = problem.with_time(q.time)
        cells = q.kind == "mass"
        key = (prob.times, order, cells)
        if key not in cache:
            cache[key] = build_relaxation(prob, order, cells=cells)
        relax = cache[key]
        col = relax.mass_column(q.cell) if cells else relax.moment_column(k, q.exponents)
        for sense, tag in (("minimize", "min"), ("maximize", "max")):
            path = out / f"{q.id}_{tag}.dat-s"
            export_sdpa(relax.program({col: 1.0}, sense), path, f"{q.id} {sense}")
            print(path)
    return EXIT_OK


COMMANDS = {
    "bound-moments": cmd_bound_moments,
    "bound-mass": cmd_bound_mass,
    "validate": cmd_validate,
    "oracle": cmd_oracle,
    "export-sdpa": cmd_export_sdpa,
}

_OPTION_KEYS = ("dump_program", "overlay", "no_timing", "min_order", "samples", "slack",
                "degree", "times", "marginal", "query")


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig(args.subcommand, args.problem, args.out, args.order, args.tol_feas, args.tol_gap,
                        args.jobs, args.seed,
                        {k: getattr(args, k) for k in _OPTION_KEYS if getattr(args, k, None) is not None})
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        problem = _load(cfg.problem)
        for d in validate(problem):
            if d.level == "warning":
                log.warning("%s", d)
        return COMMANDS[cfg.subcommand](cfg, problem)
    except ProblemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


# -- plot scripts ------------------------------------------------------------------

def _moment_plot_script(csv_name: str, overlay: str | None) -> str:
    overlay_block = ""
    if overlay:
        overlay_block = f'''
mc = {{}}
with open(HERE / "{overlay}") as fh:
    for row in csv.DictReader(fh):
        mc.setdefault(row["target"], []).append((float(row["time"]), float(row["mean"])))
'''
    return f'''"""Plot moment intervals from {csv_name}. Requires matplotlib."""
import csv
from pathlib import Path

import matplotlib.pyplot as plt

HERE = Path(__file__).resolve().parent
series = {{}}
with open(HERE / "{csv_name}") as fh:
    for row in csv.DictReader(fh):
        if row["kind"] != "moment" or not row["lower"]:
            continue
        series.setdefault(row["target"], []).append(
            (float(row["time"]), float(row["lower"]), float(row["upper"])))
mc = {{}}
{overlay_block}
fig, axes = plt.subplots(1, max(len(series), 1), figsize=(4 * max(len(series), 1), 3.2), squeeze=False)
for ax, (target, pts) in zip(axes[0], sorted(series.items())):
    pts.sort()
    t = [p[0] for p in pts]
    ax.plot(t, [p[1] for p in pts], "o-", label="lower bound")
    ax.plot(t, [p[2] for p in pts], "s-", label="upper bound")
    if target in mc:
        ref = sorted(mc[target])
        ax.plot([p[0] for p in ref], [p[1] for p in ref], "k--", label="Monte Carlo")
    ax.set_title("moment " + target)
    ax.set_xlabel("t")
    ax.legend()
fig.tight_layout()
fig.savefig(HERE / "moments.png", dpi=150)
'''


def _mass_plot_script(csv_name: str, names: Sequence[str]) -> str:
    a, b = names
    return f'''"""Heatmap of upper mass bounds from {csv_name}. Requires matplotlib."""
import csv
from pathlib import Path

import matplotlib.pyplot as plt
from matplotlib.patches import Rectangle

HERE = Path(__file__).resolve().parent
rows = list(csv.DictReader(open(HERE / "{csv_name}")))
fig, ax = plt.subplots(figsize=(5, 4.2))
top = max(float(r["upper"]) for r in rows) or 1.0
cmap = plt.get_cmap("viridis")
for r in rows:
    x0, x1 = float(r["{a}_lo"]), float(r["{a}_hi"])
    y0, y1 = float(r["{b}_lo"]), float(r["{b}_hi"])
    ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, color=cmap(float(r["upper"]) / top)))
ax.autoscale_view()
ax.set_xlabel("{a}")
ax.set_ylabel("{b}")
sm = plt.cm.ScalarMappable(cmap=cmap, norm=plt.Normalize(0, top))
fig.colorbar(sm, ax=ax, label="upper bound on mass")
fig.tight_layout()
fig.savefig(HERE / "mass_upper.png", dpi=150)
'''


if __name__ == "__main__":
    sys.exit(main())

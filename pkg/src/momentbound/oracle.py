"""Ground truth by simulation: initial laws, RK4 trajectories, Monte Carlo moments.

Nothing in the estimator depends on these laws.  They exist to fabricate
measurement data, to pin exactly known initial moments, and to check that
computed bounds enclose the truth.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

import numpy as np

from .poly import Polynomial, monomial_basis

if TYPE_CHECKING:
    from .problem import DynamicalSystem, MomentBound, Partition

log = logging.getLogger(__name__)

__all__ = [
    "Dirac", "Uniform", "Beta", "Discrete", "InitialDistribution", "SampleRun",
    "MomentTable", "IntegrationError", "parse_law", "law_to_dict", "integrate",
    "integrate_batch", "sample_initial", "sample_moments", "analytic_example1",
    "cell_masses", "fabricate_moment_data", "trajectory_moment_vector",
]


# -- initial laws -------------------------------------------------------------

@dataclass(frozen=True)
class Dirac:
    value: float

    @property
    def support(self) -> tuple[float, float]:
        return (self.value, self.value)

    def raw_moment(self, m: int) -> float:
        return self.value ** m

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.full(n, self.value)


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError(f"uniform law needs low < high, got [{self.low}, {self.high}]")

    @property
    def support(self) -> tuple[float, float]:
        return (self.low, self.high)

    def raw_moment(self, m: int) -> float:
        a, b = self.low, self.high
        return (b ** (m + 1) - a ** (m + 1)) / ((m + 1) * (b - a))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, n)


@dataclass(frozen=True)
class Beta:
    alpha: float
    beta: float
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("beta law needs positive shape parameters")
        if not self.low < self.high:
            raise ValueError(f"beta law needs low < high, got [{self.low}, {self.high}]")

    @property
    def support(self) -> tuple[float, float]:
        return (self.low, self.high)

    @property
    def mode(self) -> float:
        a, b = self.alpha, self.beta
        if a > 1 and b > 1:
            y = (a - 1) / (a + b - 2)
        else:
            y = 0.0 if a < b else 1.0
        return self.low + (self.high - self.low) * y

    def unit_moment(self, m: int) -> float:
        # E[Y^m] for Y ~ Beta(a, b) on [0, 1]
        out = 1.0
        for j in range(m):
            out *= (self.alpha + j) / (self.alpha + self.beta + j)
        return out

    def raw_moment(self, m: int) -> float:
        a, w = self.low, self.high - self.low
        return math.fsum(math.comb(m, j) * a ** (m - j) * w ** j * self.unit_moment(j)
                         for j in range(m + 1))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        # gamma ratio for every (alpha, beta); numpy's gamma is Marsaglia-Tsang with squeeze
        g1 = rng.standard_gamma(self.alpha, n)
        g2 = rng.standard_gamma(self.beta, n)
        return self.low + (self.high - self.low) * g1 / (g1 + g2)


@dataclass(frozen=True)
class Discrete:
    points: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.points) != len(self.weights) or not self.points:
            raise ValueError("discrete law needs matching, nonempty points and weights")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("discrete weights must be nonnegative and sum to 1")

    @property
    def support(self) -> tuple[float, float]:
        return (min(self.points), max(self.points))

    def raw_moment(self, m: int) -> float:
        return math.fsum(w * p ** m for p, w in zip(self.points, self.weights))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(len(self.points), size=n, p=np.asarray(self.weights))
        return np.asarray(self.points)[idx]


Law = Dirac | Uniform | Beta | Discrete


def parse_law(spec: Mapping) -> tuple[Law, bool]:
    """Read one coordinate law from its JSON form; returns ``(law, pin)``."""
    if not isinstance(spec, Mapping):
        raise ValueError("law must be an object")
    pin = bool(spec.get("pin", False))
    kinds = [k for k in ("dirac", "uniform", "beta", "discrete") if k in spec]
    if len(kinds) != 1:
        raise ValueError("law must name exactly one of dirac, uniform, beta, discrete")
    kind = kinds[0]
    arg = spec[kind]
    if kind == "dirac":
        return Dirac(float(arg)), pin
    if kind == "uniform":
        lo, hi = arg
        return Uniform(float(lo), float(hi)), pin
    if kind == "beta":
        a, b = arg
        lo, hi = spec.get("range", (0.0, 1.0))
        return Beta(float(a), float(b), float(lo), float(hi)), pin
    return Discrete(tuple(float(p) for p in arg["points"]),
                    tuple(float(w) for w in arg["weights"])), pin


def law_to_dict(law: Law, pin: bool) -> dict:
    if isinstance(law, Dirac):
        out = {"dirac": law.value}
    elif isinstance(law, Uniform):
        out = {"uniform": [law.low, law.high]}
    elif isinstance(law, Beta):
        out = {"beta": [law.alpha, law.beta]}
        if (law.low, law.high) != (0.0, 1.0):
            out["range"] = [law.low, law.high]
    else:
        out = {"discrete": {"points": list(law.points), "weights": list(law.weights)}}
    if pin:
        out["pin"] = True
    return out


@dataclass(frozen=True)
class InitialDistribution:
    """Independent per-coordinate laws of ``x(0)``; ``pinned`` marks exact-moment coordinates."""

    laws: Mapping[int, Law]
    pinned: frozenset[int] = frozenset()

    def is_complete(self, n_x: int) -> bool:
        return all(i in self.laws for i in range(n_x))

    def pin_values(self, degree: int, n_x: int) -> list[tuple[tuple[int, ...], float]]:
        """Exact marginal raw moments of pinned coordinates, degrees 1..degree."""
        out = []
        for i in sorted(self.pinned):
            for m in range(1, degree + 1):
                exps = [0] * n_x
                exps[i] = m
                out.append((tuple(exps), self.laws[i].raw_moment(m)))
        return out

    def sample(self, rng: np.random.Generator, n: int, n_x: int) -> np.ndarray:
        if not self.is_complete(n_x):
            missing = [i for i in range(n_x) if i not in self.laws]
            raise ValueError(f"no initial law for state indices {missing}")
        return np.column_stack([self.laws[i].sample(rng, n) for i in range(n_x)])


# -- sampling runs ------------------------------------------------------------

@dataclass(frozen=True)
class SampleRun:
    seed: int = 0
    n_samples: int = 10_000
    step: float = 1e-3
    chunk_size: int = 4096

    def chunk_generators(self) -> list[tuple[int, np.random.Generator]]:
        """One independent generator per sample chunk; stable for any worker count."""
        n_chunks = max(1, math.ceil(self.n_samples / self.chunk_size))
        seqs = np.random.SeedSequence(self.seed).spawn(n_chunks)
        sizes = [min(self.chunk_size, self.n_samples - c * self.chunk_size) for c in range(n_chunks)]
        return [(size, np.random.Generator(np.random.PCG64(s))) for size, s in zip(sizes, seqs)]


def sample_initial(dist: InitialDistribution, n_x: int, run: SampleRun) -> np.ndarray:
    parts = [dist.sample(gen, size, n_x) for size, gen in run.chunk_generators()]
    return np.vstack(parts)


# -- integration --------------------------------------------------------------

class IntegrationError(RuntimeError):
    def __init__(self, message: str, sample_index: int | None = None):
        super().__init__(message)
        self.sample_index = sample_index


class _CompiledPoly:
    """Vectorized evaluator of a polynomial at many states and one time."""

    def __init__(self, p: Polynomial):
        self.coefs = np.array(list(p.terms.values()), dtype=float)
        self.t_exps = np.array([m.t_exp for m in p.terms], dtype=int)
        self.x_exps = np.array([m.x_exps for m in p.terms], dtype=int).reshape(len(p), p.n_x)

    def __call__(self, t: float, X: np.ndarray) -> np.ndarray:
        out = np.zeros(X.shape[0])
        for c, te, xe in zip(self.coefs, self.t_exps, self.x_exps):
            term = np.full(X.shape[0], c * t ** te)
            for i, e in enumerate(xe):
                if e:
                    term *= X[:, i] ** e
            out += term
        return out


def _field(system: DynamicalSystem):
    comps = [_CompiledPoly(fi) for fi in system.f]

    def rhs(t: float, X: np.ndarray) -> np.ndarray:
        return np.column_stack([c(t, X) for c in comps]) if comps else np.zeros_like(X)
    return rhs


def _substeps(t0: float, t1: float, step: float, even: bool = False) -> int:
    n = max(1, math.ceil((t1 - t0) / step - 1e-9))
    if even and n % 2:
        n += 1
    return n


def _check_finite(X: np.ndarray, t: float) -> None:
    bad = ~np.isfinite(X).all(axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise IntegrationError(f"non-finite state at t={t:.6g} for sample {idx}", idx)


def _rk4(rhs, t: float, X: np.ndarray, h: float) -> np.ndarray:
    # blow-ups surface as non-finite states, which _check_finite reports
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = rhs(t, X)
        k2 = rhs(t + h / 2, X + h / 2 * k1)
        k3 = rhs(t + h / 2, X + h / 2 * k2)
        k4 = rhs(t + h, X + h * k3)
        return X + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_batch(system: DynamicalSystem, X0: np.ndarray, times: Sequence[float],
                    step: float = 1e-3, box: Sequence[tuple[float, float]] | None = None) -> np.ndarray:
    """Fixed-step RK4 from t=0 for many initial states; returns ``(len(times), N, n_x)``.

    The step is shrunk per interval so every grid time is hit exactly.
    """
    X = np.array(X0, dtype=float, copy=True)
    if X.ndim != 2 or X.shape[1] != system.n_x:
        raise ValueError(f"initial states must be (N, {system.n_x})")
    rhs = _field(system)
    out = np.empty((len(times), *X.shape))
    t = 0.0
    for k, tk in enumerate(times):
        if tk < t - 1e-15:
            raise ValueError("grid times must be nondecreasing and start at or after 0")
        if tk > t:
            n = _substeps(t, tk, step)
            h = (tk - t) / n
            for s in range(n):
                X = _rk4(rhs, t + s * h, X, h)
            _check_finite(X, tk)
            t = tk
        out[k] = X
    if box is not None:
        lo = np.array([b[0] for b in box])
        hi = np.array([b[1] for b in box])
        tol = 1e-9
        if ((out < lo - tol) | (out > hi + tol)).any():
            log.warning("trajectories leave the declared box")
    return out


def integrate(system: DynamicalSystem, x0: Sequence[float], times: Sequence[float],
              step: float = 1e-3) -> np.ndarray:
    """Single trajectory at the grid times, shape ``(len(times), n_x)``."""
    return integrate_batch(system, np.asarray(x0, dtype=float)[None, :], times, step)[:, 0, :]


# -- moments ------------------------------------------------------------------

@dataclass
class MomentTable:
    """Empirical raw moments ``mean[k, j]`` of ``exponents[j]`` at ``times[k]``."""

    times: tuple[float, ...]
    time_indices: tuple[int, ...]
    exponents: tuple[tuple[int, ...], ...]
    mean: np.ndarray
    stderr: np.ndarray
    n_samples: int

    def value(self, k: int, exps: Sequence[int]) -> float:
        return float(self.mean[k, self.exponents.index(tuple(exps))])

    def to_dict(self) -> dict:
        rows = []
        for k, (t, ti) in enumerate(zip(self.times, self.time_indices)):
            for j, e in enumerate(self.exponents):
                rows.append({"time_index": ti, "time": t, "exponents": list(e),
                             "mean": float(self.mean[k, j]), "stderr": float(self.stderr[k, j])})
        return {"n_samples": self.n_samples, "moments": rows}


def moment_exponents(n_x: int, degree: int, states: Iterable[int] | None = None,
                     marginal: bool = False) -> list[tuple[int, ...]]:
    states = list(range(n_x)) if states is None else list(states)
    if marginal:
        out = []
        for i in states:
            for m in range(1, degree + 1):
                e = [0] * n_x
                e[i] = m
                out.append(tuple(e))
        return out
    return [m.x_exps for m in monomial_basis(n_x, degree)[1:]
            if all(e == 0 or i in states for i, e in enumerate(m.x_exps))]


def _powers(X: np.ndarray, exps: Sequence[Sequence[int]]) -> np.ndarray:
    """``out[j, s] = prod_i X[s, i] ** exps[j][i]``."""
    out = np.ones((len(exps), X.shape[0]))
    for j, e in enumerate(exps):
        for i, p in enumerate(e):
            if p:
                out[j] *= X[:, i] ** p
    return out


def sample_moments(system: DynamicalSystem, dist: InitialDistribution, times: Sequence[float],
                   degree: int, run: SampleRun, *, time_indices: Sequence[int] | None = None,
                   states: Iterable[int] | None = None, marginal: bool = False) -> MomentTable:
    """Monte Carlo raw moments up to ``degree`` with standard errors."""
    if degree < 1:
        raise ValueError("degree cap must be at least 1")
    X0 = sample_initial(dist, system.n_x, run)
    traj = integrate_batch(system, X0, times, run.step)
    exps = moment_exponents(system.n_x, degree, states, marginal)
    n = X0.shape[0]
    mean = np.empty((len(times), len(exps)))
    se = np.empty_like(mean)
    for k in range(len(times)):
        vals = _powers(traj[k], exps)
        mean[k] = vals.mean(axis=1)
        se[k] = vals.std(axis=1, ddof=1) / math.sqrt(n) if n > 1 else 0.0
    idx = tuple(time_indices) if time_indices is not None else tuple(range(len(times)))
    return MomentTable(tuple(float(t) for t in times), idx, tuple(exps), mean, se, n)


def analytic_example1(t: float, x10: float = 0.5) -> tuple[float, float]:
    """First two moments of ``x1(t)`` for ``x1' = -x1*x2``, ``x2 ~ U[0,1]`` static."""
    if t == 0.0:
        return x10, x10 ** 2
    # expm1 keeps the small-t limit accurate
    return x10 * -math.expm1(-t) / t, x10 ** 2 * -math.expm1(-2 * t) / (2 * t)


def cell_masses(dist: InitialDistribution, partition: Partition, n_x: int,
                run: SampleRun) -> tuple[np.ndarray, np.ndarray]:
    """Histogram masses of initial samples over partition cells, with standard errors."""
    X0 = sample_initial(dist, n_x, run)
    cells = partition.locate(X0)
    inside = cells >= 0
    if not inside.all():
        log.warning("%d samples fall outside the partition", int((~inside).sum()))
    counts = np.bincount(cells[inside], minlength=partition.n_cells).astype(float)
    n = X0.shape[0]
    p = counts / n
    return p, np.sqrt(p * (1 - p) / n)


def fabricate_moment_data(moments: Iterable[tuple[int, Sequence[int], float]],
                          slack: float) -> list[MomentBound]:
    """Interval data ``m*(1 -+ slack)`` around each measured moment."""
    from .problem import MomentBound

    if slack < 0:
        raise ValueError("slack must be nonnegative")
    out = []
    for k, exps, m in moments:
        a, b = m * (1 - slack), m * (1 + slack)
        out.append(MomentBound(int(k), tuple(int(e) for e in exps), min(a, b), max(a, b)))
    return out


def table_to_bounds(table: MomentTable, slack: float) -> list[MomentBound]:
    return fabricate_moment_data(
        ((ti, e, float(table.mean[k, j]))
         for k, ti in enumerate(table.time_indices)
         for j, e in enumerate(table.exponents)), slack)


# -- occupation moments along trajectories -------------------------------------

def trajectory_moment_vector(layout, system: DynamicalSystem, dist: InitialDistribution,
                             run: SampleRun) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo estimate of the stacked moment vector of a relaxation layout.

    Endpoint measures get sample means of ``x^b`` at their time, occupation
    measures the sample mean of ``int t^a x(t)^b dt`` over their interval by
    composite Simpson on the RK4 nodes.  Cell measures are not supported.
    Returns ``(mean, stderr)`` aligned with the layout's columns.
    """
    X = sample_initial(dist, system.n_x, run)
    rhs = _field(system)
    n_cols = layout.n_vars
    mean = np.zeros(n_cols)
    se = np.zeros(n_cols)
    times = layout.times
    n = X.shape[0]

    def store(measure, per_sample: np.ndarray) -> None:
        cols = measure.offset + np.arange(len(measure.basis))
        mean[cols] = per_sample.mean(axis=1)
        se[cols] = per_sample.std(axis=1, ddof=1) / math.sqrt(n) if n > 1 else 0.0

    endpoint = {m.index[0]: m for m in layout.measures if m.kind == "endpoint"}
    occupation = {m.index[0]: m for m in layout.measures if m.kind == "occupation"}
    if any(m.kind == "cell" for m in layout.measures):
        raise ValueError("cell measures have no trajectory counterpart")

    if times[0] > 0:
        X = integrate_batch(system, X, [times[0]], run.step)[0]
    for k, tk in enumerate(times):
        if k in endpoint:
            store(endpoint[k], _powers(X, [m.x_exps for m in endpoint[k].basis]))
        if k + 1 == len(times):
            break
        t1 = times[k + 1]
        steps = _substeps(tk, t1, run.step, even=True)
        h = (t1 - tk) / steps
        occ = occupation.get(k)
        x_exps = sorted({m.x_exps for m in occ.basis}) if occ else []
        weights = np.ones(steps + 1)
        weights[1:-1:2] = 4
        weights[2:-1:2] = 2
        weights *= h / 3
        node_t = tk + h * np.arange(steps + 1)
        if occ:
            x_vals = {e: np.empty((steps + 1, n)) for e in x_exps}
            P = _powers(X, x_exps)
            for j, e in enumerate(x_exps):
                x_vals[e][0] = P[j]
        for s in range(steps):
            X = _rk4(rhs, tk + s * h, X, h)
            if occ:
                P = _powers(X, x_exps)
                for j, e in enumerate(x_exps):
                    x_vals[e][s + 1] = P[j]
        _check_finite(X, t1)
        if occ:
            per = np.empty((len(occ.basis), n))
            for j, mono in enumerate(occ.basis):
                w = weights * node_t ** mono.t_exp
                per[j] = w @ x_vals[mono.x_exps]
            store(occ, per)
    return mean, se

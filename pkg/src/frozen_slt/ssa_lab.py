"""Monte-Carlo checks of subset-sum approximation with pruned and locked terms.

A trial draws X_i ~ U(-1, 1), availability M_i ~ Ber(p) and locking
M'_i ~ Ber(q).  Locked available terms are always in the sum; the other
available terms may be chosen freely.  The quantity of interest is

    min_I | z - sum_i M_i M'_i X_i - sum_{i in I} M_i (1 - M'_i) X_i |

and how often it stays below eps for every target z on a grid.  p = 1 and/or
q = 0 give the plain, pruned-only and locked-only settings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .init_rng import Purpose, StreamKey, stream

MITM_LIMIT = 40
BRUTE_FORCE_LIMIT = 24


class InstanceTooLarge(ValueError):
    pass


@dataclass
class SsaTrial:
    values: np.ndarray
    available: np.ndarray
    locked: np.ndarray
    target: float
    eps: float
    achieved_error: float = math.nan
    subset: tuple = ()

    @property
    def n(self):
        return self.values.size

    @property
    def free_index(self) -> np.ndarray:
        return np.flatnonzero(self.available & ~self.locked)

    @property
    def locked_sum(self) -> float:
        return float(self.values[self.available & self.locked].sum())

    def error_of(self, subset) -> float:
        subset = np.asarray(subset, dtype=np.int64)
        if subset.size and not np.isin(subset, self.free_index).all():
            raise ValueError("subset uses unavailable or locked variables")
        return abs(self.target - self.locked_sum - float(self.values[subset].sum()))


def sample_trial(n: int, p: float, q: float, z: float, eps: float, key: StreamKey) -> SsaTrial:
    """Draw one instance: n uniforms, then n availability, then n lock indicators."""
    if not (0.0 < p <= 1.0 and 0.0 <= q < 1.0):
        raise ValueError(f"need p in (0, 1] and q in [0, 1), got p={p} q={q}")
    s = stream(key)
    x = 2.0 * s.uniform(n) - 1.0
    m = s.bernoulli(n, p)
    ml = s.bernoulli(n, q)
    return SsaTrial(x, m, ml, float(z), float(eps))


def _subset_sums(values):
    """All 2^len subset sums; entry b is the sum over set bits of b."""
    sums = np.zeros(1, dtype=np.float64)
    for v in values:
        sums = np.concatenate([sums, sums + v])
    return sums


class _MitmTable:
    """Sorted half-sums for repeated nearest-sum queries over one value set."""

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.size > MITM_LIMIT:
            raise InstanceTooLarge(
                f"{values.size} free variables exceed the exact-solver limit {MITM_LIMIT}; use solve_greedy")
        h = values.size // 2
        self.h = h
        self.a = _subset_sums(values[:h])
        b = _subset_sums(values[h:])
        self.b_order = np.argsort(b, kind="stable")
        self.b = b[self.b_order]

    def nearest(self, target):
        """(error, mask_a, mask_b) of the subset whose sum is closest to target."""
        need = target - self.a
        pos = np.searchsorted(self.b, need)
        lo = np.clip(pos - 1, 0, self.b.size - 1)
        hi = np.clip(pos, 0, self.b.size - 1)
        err_lo = np.abs(need - self.b[lo])
        err_hi = np.abs(need - self.b[hi])
        use_hi = err_hi < err_lo
        err = np.where(use_hi, err_hi, err_lo)
        j = int(np.argmin(err))
        bj = int(hi[j] if use_hi[j] else lo[j])
        return float(err[j]), j, int(self.b_order[bj])

    def best_errors(self, targets):
        """Minimum achievable error for each target (no subsets returned)."""
        return np.array([self.nearest(t)[0] for t in np.atleast_1d(targets)])


def _bits(mask, count):
    return [k for k in range(count) if (mask >> k) & 1]


def solve_exact(trial: SsaTrial):
    """Globally optimal error and subset by meet-in-the-middle (<= 40 free variables)."""
    free = trial.free_index
    table = _MitmTable(trial.values[free])
    target = trial.target - trial.locked_sum
    err, ja, jb = table.nearest(target)
    chosen = [free[k] for k in _bits(ja, table.h)] + [free[table.h + k] for k in _bits(jb, free.size - table.h)]
    subset = tuple(sorted(int(c) for c in chosen))
    trial.achieved_error = trial.error_of(subset)
    trial.subset = subset
    return trial.achieved_error, subset


def solve_brute_force(trial: SsaTrial):
    """Exhaustive enumeration; independent oracle for the exact solver (<= 24 free variables)."""
    free = trial.free_index
    if free.size > BRUTE_FORCE_LIMIT:
        raise InstanceTooLarge(f"{free.size} free variables exceed the brute-force limit {BRUTE_FORCE_LIMIT}")
    sums = _subset_sums(trial.values[free])
    err = np.abs(trial.target - trial.locked_sum - sums)
    b = int(np.argmin(err))
    subset = tuple(int(free[k]) for k in _bits(b, free.size))
    return float(err[b]), subset


def solve_greedy(trial: SsaTrial):
    """Largest-magnitude-first greedy; an upper bound on the optimal error."""
    free = trial.free_index
    order = free[np.argsort(-np.abs(trial.values[free]), kind="stable")]
    residual = trial.target - trial.locked_sum
    chosen = []
    for i in order:
        nxt = residual - trial.values[i]
        if abs(nxt) < abs(residual):
            residual = nxt
            chosen.append(int(i))
    subset = tuple(sorted(chosen))
    return trial.error_of(subset), subset


# -- success curves ------------------------------------------------------------


@dataclass
class CurvePoint:
    n: int
    solver: str
    successes: int
    trials: int

    @property
    def success_rate(self):
        return self.successes / self.trials if self.trials else math.nan

    @property
    def stderr(self):
        p = self.success_rate
        return math.sqrt(max(p * (1 - p), 0.0) / self.trials) if self.trials else math.nan


@dataclass
class SuccessCurve:
    p: float
    q: float
    eps: float
    z_grid: np.ndarray
    points: list = field(default_factory=list)

    def rates(self):
        return np.array([pt.success_rate for pt in self.points])

    def to_rows(self):
        return [(pt.n, pt.solver, pt.success_rate, pt.trials) for pt in self.points]


def default_z_grid(points: int = 21):
    return np.linspace(-1.0, 1.0, points)


def trial_key(seed: int, n: int, trial: int) -> StreamKey:
    # n in the high bits keeps trial streams distinct across grid points
    return StreamKey(seed, (n << 24) | trial, Purpose.SSA)


def worst_case_error(trial: SsaTrial, z_grid, exact: bool = True) -> float:
    """max over z of the best achievable error, via the exact or greedy solver."""
    free = trial.free_index
    shifted = np.asarray(z_grid, dtype=np.float64) - trial.locked_sum
    if exact:
        return float(_MitmTable(trial.values[free]).best_errors(shifted).max())
    worst = 0.0
    for z in z_grid:
        t = SsaTrial(trial.values, trial.available, trial.locked, float(z), trial.eps)
        worst = max(worst, solve_greedy(t)[0])
    return worst


def estimate_success(n_grid, p: float, q: float, eps: float, z_grid=None, trials_per_point: int = 200,
                     seed: int = 0) -> SuccessCurve:
    """Fraction of trials where every grid target is reachable within eps.

    Trials with more than 40 free variables use the greedy solver, which can
    only under-report success; each point records which solver(s) ran.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    z_grid = default_z_grid() if z_grid is None else np.asarray(z_grid, dtype=np.float64)
    if np.any(np.abs(z_grid) > 1.0):
        raise ValueError("targets must lie in [-1, 1]")
    curve = SuccessCurve(p, q, eps, z_grid)
    for n in n_grid:
        ok = 0
        used = set()
        for t in range(trials_per_point):
            trial = sample_trial(int(n), p, q, 0.0, eps, trial_key(seed, int(n), t))
            exact = trial.free_index.size <= MITM_LIMIT
            used.add("exact" if exact else "greedy")
            if worst_case_error(trial, z_grid, exact) <= eps:
                ok += 1
        solver = used.pop() if len(used) == 1 else "mixed"
        curve.points.append(CurvePoint(int(n), solver, ok, trials_per_point))
    return curve


def is_monotone_within_noise(curve: SuccessCurve, sigmas: float = 2.0) -> bool:
    """No drop between consecutive n larger than ``sigmas`` combined binomial std errors."""
    pts = curve.points
    for a, b in zip(pts, pts[1:]):
        tol = sigmas * math.sqrt(a.stderr ** 2 + b.stderr ** 2)
        # a zero-variance point still carries one-trial granularity
        tol = max(tol, sigmas / max(a.trials, b.trials))
        if b.success_rate < a.success_rate - tol:
            return False
    return True


def tail_fit(curve: SuccessCurve):
    """Least-squares fit of log(1 - success) against n over points with 0 < success < 1.

    Returns ``(slope, intercept, r_squared, n_points)``; fewer than two
    estimable points give NaNs.
    """
    ns, ys = [], []
    for pt in curve.points:
        r = pt.success_rate
        if 0.0 < r < 1.0:
            ns.append(pt.n)
            ys.append(math.log(1.0 - r))
    if len(ns) < 2:
        return math.nan, math.nan, math.nan, len(ns)
    ns = np.array(ns, dtype=np.float64)
    ys = np.array(ys)
    slope, intercept = np.polyfit(ns, ys, 1)
    pred = slope * ns + intercept
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2, len(ns)


def locked_mass_violation_rate(alpha: float, m: int, trials: int, seed: int = 0):
    """Empirical P(|sum of m uniforms| > alpha m) and its Hoeffding bound 2 exp(-3 alpha^2 m / 2)."""
    s = stream(StreamKey(seed, m, Purpose.SSA))
    x = (2.0 * s.uniform(m * trials) - 1.0).reshape(trials, m)
    rate = float((np.abs(x.sum(axis=1)) > alpha * m).mean())
    return rate, 2.0 * math.exp(-1.5 * alpha * alpha * m)

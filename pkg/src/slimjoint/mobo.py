"""Multi-objective BO over widths: random scalarization (RS) and targeted
scalarization with a binary search on the weighting (TS2).

Both objectives are minimized.  The scalarization weight ``lam`` multiplies
the cost term, so a larger ``lam`` favours smaller networks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import gp

DEFAULT_BETA = 0.1
N_RANDOM = 256
STEP_START = 0.1
STEP_MIN = 1e-3
MAX_REFINE_EVALS = 200


# -- history ----------------------------------------------------------------------------


@dataclass
class HistoryEntry:
    width: np.ndarray
    ce: float
    cost: float
    iteration_added: int


@dataclass
class History:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def append(self, entry: HistoryEntry) -> None:
        self.entries.append(entry)

    def widths(self) -> np.ndarray:
        return np.array([e.width for e in self.entries], dtype=float)

    def ce(self) -> np.ndarray:
        return np.array([e.ce for e in self.entries], dtype=float)

    def costs(self) -> np.ndarray:
        return np.array([e.cost for e in self.entries], dtype=float)

    def rows(self):
        for e in self.entries:
            yield [e.iteration_added, *map(float, e.width), float(e.ce), float(e.cost)]

    def header(self, d: int):
        return ["iteration", *[f"a_{i + 1}" for i in range(d)], "ce", "cost"]

    def to_csv(self, path, d: int | None = None) -> None:
        if d is None:
            d = len(self.entries[0].width) if self.entries else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header(d))
            for row in self.rows():
                w.writerow([row[0], *[repr(v) for v in row[1:]]])


def read_history_csv(path) -> History:
    h = History()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            width = [float(v) for k, v in row.items() if k.startswith("a_")]
            h.append(HistoryEntry(np.array(width), float(row["ce"]), float(row["cost"]),
                                  int(row["iteration"])))
    return h


# -- scalarization ----------------------------------------------------------------------


def scalarize(lam: float, g_ce, g_cost):
    """Weighted sum of normalized surrogate values; ``lam`` weights the cost."""
    return lam * g_cost + (1.0 - lam) * g_ce


@dataclass(frozen=True)
class Surrogates:
    """The two fitted GPs plus the normalization used by the scalarization."""

    g_ce: gp.GpModel
    g_cost: gp.GpModel
    ce_min: float
    ce_max: float
    full_cost: float
    beta: float = DEFAULT_BETA

    def normalized(self, X):
        ce = gp.acquisition_lcb(self.g_ce, X, self.beta)
        cost = gp.acquisition_lcb(self.g_cost, X, self.beta)
        span = self.ce_max - self.ce_min
        ce = (ce - self.ce_min) / (span if span > 0 else 1.0)
        return ce, cost / self.full_cost

    def objective(self, lam: float) -> Callable[[np.ndarray], np.ndarray]:
        def f(X):
            ce, cost = self.normalized(X)
            return scalarize(lam, ce, cost)
        return f


def fit_surrogates(history: History, bounds, full_cost: float, *, hyper_opt: bool = False,
                   seed: int = 0, beta: float = DEFAULT_BETA) -> Surrogates:
    X = history.widths()
    ce = history.ce()
    g_ce = gp.fit(X, ce, hyper_opt=hyper_opt, bounds=bounds, seed=seed)
    g_cost = gp.fit(X, history.costs(), hyper_opt=hyper_opt, bounds=bounds, seed=seed + 1)
    return Surrogates(g_ce, g_cost, float(ce.min()), float(ce.max()), float(full_cost), beta)


# -- acquisition optimization -----------------------------------------------------------


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def minimize_box(fn, lower, upper, seed, *, n_random: int = N_RANDOM,
                 step_start: float = STEP_START, step_min: float = STEP_MIN,
                 max_evals: int = MAX_REFINE_EVALS) -> np.ndarray:
    """Minimize a vectorized ``fn: (m, d) -> (m,)`` over a box.

    Best of ``n_random`` uniform samples, then a coordinate hill-climb.  Each
    round probes +/- step on every coordinate plus the combined move of all
    improving coordinates; the step (a fraction of the box side) halves when
    nothing improves.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    span = upper - lower
    d = len(lower)
    rng = _rng(seed)
    X = lower + rng.random((n_random, d)) * span
    vals = fn(X)
    i = int(np.argmin(vals))
    x, best = X[i].copy(), float(vals[i])
    step, evals = step_start, 0
    eye = np.eye(d)
    while step >= step_min * (1 - 1e-9) and evals + 2 * d + 1 <= max_evals:
        moves = np.concatenate([eye, -eye]) * (step * span)
        cand = np.clip(x + moves, lower, upper)
        v = fn(cand)
        # combined move: per coordinate take the better direction if it improved
        gain = np.stack([v[:d], v[d:]])
        direction = np.where(gain.min(0) < best, np.where(gain[0] <= gain[1], 1.0, -1.0), 0.0)
        combo = np.clip(x + direction * step * span, lower, upper)[None]
        vc = fn(combo)
        evals += 2 * d + 1
        cand = np.concatenate([cand, combo])
        v = np.concatenate([v, vc])
        j = int(np.argmin(v))
        if v[j] < best:
            x, best = cand[j].copy(), float(v[j])
        else:
            step /= 2
    return x


def optimize_acquisition(surrogates: Surrogates, lam: float, bounds, seed) -> np.ndarray:
    """Width minimizing the scalarized LCB acquisition for one weighting."""
    return minimize_box(surrogates.objective(lam), bounds[0], bounds[1], seed)


# -- samplers ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleResult:
    width: np.ndarray
    lam: float
    target: float | None
    gap: float | None  # relative cost gap of the returned width (TS2 only)
    iterations: int
    probes: tuple = ()  # (lam, cost, relative gap) per binary-search step


def targeted_search(argmin_fn: Callable[[float], np.ndarray], cost_fn: Callable[[np.ndarray], float],
                    target: float, full_cost: float, epsilon: float,
                    max_iters: int) -> SampleResult:
    """Binary search on ``lam`` until the minimizer's cost is within ``epsilon``
    (relative to the full cost) of ``target``.

    Returns the probe with the smallest gap; running out of iterations is not
    an error.
    """
    if epsilon <= 0 or max_iters < 1:
        raise ValueError("epsilon must be > 0 and max_iters >= 1")
    lam, lam_min, lam_max = 0.5, 0.0, 1.0
    best = None
    probes = []
    for it in range(1, max_iters + 1):
        a = argmin_fn(lam)
        c = float(cost_fn(a))
        gap = abs(c - target) / full_cost
        probes.append((lam, c, gap))
        if best is None or gap < best[2]:
            best = (a, lam, gap)
        if gap <= epsilon:
            break
        if c > target:
            lam_min = lam
            lam = (lam + lam_max) / 2
        else:
            lam_max = lam
            lam = (lam + lam_min) / 2
    a, lam_best, gap = best
    return SampleResult(np.asarray(a, dtype=float), lam_best, float(target), float(gap), it,
                        tuple(probes))


def mobo_ts2_sample(surrogates: Surrogates, cost_fn, bounds, epsilon: float, max_iters: int,
                    seed, cost_range: Sequence[float] | None = None) -> SampleResult:
    """Draw a target cost uniformly in [cost(lower), cost(upper)] and hit it by
    binary search over the scalarization weight."""
    rng = _rng(seed)
    lower, upper = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    lo, hi = cost_range if cost_range is not None else (cost_fn(lower), cost_fn(upper))
    target = float(rng.uniform(lo, hi))
    # one inner seed for every probe, so all weightings see the same random candidates
    inner = int(rng.integers(2**63))
    return targeted_search(lambda lam: optimize_acquisition(surrogates, lam, bounds, inner),
                           cost_fn, target, surrogates.full_cost, epsilon, max_iters)


def mobo_rs_sample(surrogates: Surrogates, bounds, seed) -> SampleResult:
    """Uniform weighting, then one acquisition optimization."""
    rng = _rng(seed)
    lam = float(rng.uniform(0.0, 1.0))
    width = optimize_acquisition(surrogates, lam, bounds, int(rng.integers(2**63)))
    return SampleResult(width, lam, None, None, 1, ())


def cost_entropy(costs, lower: float, upper: float, bins: int = 10) -> float:
    """Shannon entropy (nats) of a cost histogram over equal bins in [lower, upper]."""
    counts, _ = np.histogram(np.clip(costs, lower, upper), bins=bins, range=(lower, upper))
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum()) if len(p) else 0.0


__all__ = [
    "History", "HistoryEntry", "Surrogates", "SampleResult", "scalarize", "fit_surrogates",
    "minimize_box", "optimize_acquisition", "targeted_search", "mobo_ts2_sample",
    "mobo_rs_sample", "cost_entropy", "read_history_csv",
]

"""Non-dominated sorting of (loss, cost) pairs and the staircase AUC metric."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np


def non_dominated_sort(f1, f2) -> list[list[int]]:
    """Fronts of indices for minimization of both objectives; rank 0 first.

    Within a front, indices are ordered by ``f2`` (cost) ascending, ties by index.
    Points are swept in lexicographic (f1, f2) order and each joins the first
    front holding no point that dominates it.
    """
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if f1.shape != f2.shape or f1.ndim != 1 or len(f1) == 0:
        raise ValueError("need two equal-length, non-empty 1-D objective arrays")
    if not (np.all(np.isfinite(f1)) and np.all(np.isfinite(f2))):
        raise ValueError("objective values must be finite")
    order = np.lexsort((f2, f1))
    fronts: list[list[int]] = []
    # per front: smallest f2 so far and the smallest f1 among points attaining it
    tail_f2: list[float] = []
    tail_f1: list[float] = []
    for i in order:
        a, b = f1[i], f2[i]
        for k in range(len(fronts)):
            # earlier members all have f1 <= a, so only f2 decides dominance;
            # an exact duplicate does not dominate
            if tail_f2[k] > b or (tail_f2[k] == b and tail_f1[k] == a):
                fronts[k].append(int(i))
                if b < tail_f2[k]:
                    tail_f2[k], tail_f1[k] = b, a
                break
        else:
            fronts.append([int(i)])
            tail_f2.append(b)
            tail_f1.append(a)
    return [sorted(fr, key=lambda j: (f2[j], j)) for fr in fronts]


def pareto_front(f1, f2) -> list[int]:
    return non_dominated_sort(f1, f2)[0]


def dominates(p, q) -> bool:
    return p[0] <= q[0] and p[1] <= q[1] and (p[0] < q[0] or p[1] < q[1])


@dataclass(frozen=True)
class CurveEstimate:
    lower: float
    upper: float
    N: int
    grid: np.ndarray
    samples: np.ndarray
    auc: float


def staircase(costs, losses) -> Callable[[float], float]:
    """Loss of the most expensive point whose cost does not exceed ``c``
    (the lowest loss among points tied at that cost)."""
    costs = np.asarray(costs, dtype=float)
    losses = np.asarray(losses, dtype=float)
    if len(costs) == 0 or costs.shape != losses.shape:
        raise ValueError("need a non-empty front with one loss per cost")
    order = np.lexsort((losses, costs))
    cs, starts = np.unique(costs[order], return_index=True)
    ls = losses[order][starts]

    def curve(c: float) -> float:
        k = int(np.searchsorted(cs, c, side="right")) - 1
        if k < 0:
            raise ValueError(
                f"no width at or below cost {c:g}; cheapest available is {cs[0]:g}")
        return float(ls[k])
    return curve


def auc_riemann(eval_fn: Callable[[float], float], lower: float, upper: float,
                N: int) -> CurveEstimate:
    """Mean of ``eval_fn`` over ``N`` evenly spaced costs spanning [lower, upper]."""
    if not lower < upper:
        raise ValueError(f"need lower < upper, got {lower} and {upper}")
    if N < 2:
        raise ValueError(f"need N >= 2, got {N}")
    grid = np.linspace(lower, upper, N)
    samples = np.array([eval_fn(c) for c in grid], dtype=float)
    return CurveEstimate(float(lower), float(upper), int(N), grid, samples, float(samples.mean()))


def write_curve_csv(path, rows, d: int) -> None:
    """rows: iterables of (cost, train_loss, val_error, width)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cost", "train_loss", "val_error", *[f"a_{i + 1}" for i in range(d)]])
        for cost, loss, err, width in rows:
            w.writerow([repr(float(cost)), repr(float(loss)), repr(float(err)),
                        *[repr(float(v)) for v in width]])


def read_curve_csv(path):
    """Returns (cost, train_loss, val_error) arrays."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"cost", "val_error"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        rows = list(reader)
    cost = np.array([float(r["cost"]) for r in rows])
    loss = np.array([float(r.get("train_loss") or "nan") for r in rows])
    err = np.array([float(r["val_error"]) for r in rows])
    return cost, loss, err

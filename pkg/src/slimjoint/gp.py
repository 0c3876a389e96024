"""Gaussian-process regression over the width box with a Matern-5/2 ARD kernel.

Inputs are mapped to the unit cube, targets are standardized, and the
posterior is served from a Cholesky factor of ``K + noise * I``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

SQRT5 = math.sqrt(5.0)
JITTER_LADDER = (1e-6, 1e-5, 1e-4, 1e-3)

DEFAULT_LENGTHSCALE = 0.5
DEFAULT_SIGNAL_VAR = 1.0
DEFAULT_NOISE_VAR = 1e-6

# log-space grids for hyperparameter search; the defaults sit on the grid
LENGTHSCALE_GRID = np.geomspace(0.05, 5.0, 9)
SIGNAL_GRID = np.geomspace(0.1, 10.0, 9)
NOISE_GRID = np.geomspace(1e-6, 1e-1, 9)
N_RESTARTS = 4
MAX_SWEEPS = 4


class GpFitError(RuntimeError):
    pass


def matern52(r: np.ndarray, signal_var: float) -> np.ndarray:
    return signal_var * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)


def _scaled_dist(A, B, lengthscales):
    A = A / lengthscales
    B = B / lengthscales
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.sqrt(np.maximum(sq, 0.0))


def kernel(A, B, lengthscales, signal_var):
    return matern52(_scaled_dist(np.atleast_2d(A), np.atleast_2d(B), lengthscales), signal_var)


@dataclass(frozen=True)
class GpModel:
    train_inputs: np.ndarray  # n x d, unit cube
    y_mean: float
    y_scale: float
    lengthscales: np.ndarray
    signal_var: float  # standardized units
    noise_var: float  # standardized units, includes any jitter added
    cholesky: np.ndarray
    alpha: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    log_marginal_likelihood: float

    @property
    def n(self) -> int:
        return len(self.train_inputs)

    def normalize(self, X) -> np.ndarray:
        return (np.atleast_2d(np.asarray(X, dtype=float)) - self.lower) / (self.upper - self.lower)

    def gram(self) -> np.ndarray:
        """Noisy covariance of the training inputs, ``K + noise * I``."""
        K = kernel(self.train_inputs, self.train_inputs, self.lengthscales, self.signal_var)
        return K + self.noise_var * np.eye(self.n)


def _factor(K, noise):
    """Cholesky of K + noise*I, climbing the jitter ladder on failure."""
    n = len(K)
    for extra in (0.0,) + JITTER_LADDER:
        try:
            L = cholesky(K + (noise + extra) * np.eye(n), lower=True, check_finite=False)
            return L, noise + extra
        except LinAlgError:
            continue
    raise GpFitError(
        f"Cholesky failed with jitter up to {JITTER_LADDER[-1]:g}; "
        "training inputs are probably degenerate duplicates"
    )


def _lml(L, alpha, y):
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * math.log(2 * math.pi))


def _condition(Xn, ys, lengthscales, signal_var, noise_var):
    K = kernel(Xn, Xn, lengthscales, signal_var)
    L, noise = _factor(K, noise_var)
    alpha = cho_solve((L, True), ys, check_finite=False)
    return L, alpha, noise, _lml(L, alpha, ys)


def _search_hyperparameters(Xn, ys, seed):
    """Seeded multi-start coordinate search over log-space grids, maximizing the LML."""
    d = Xn.shape[1]
    grids = [LENGTHSCALE_GRID] * d + [SIGNAL_GRID, NOISE_GRID]
    # pairwise squared differences per dimension, reused by every evaluation
    diff2 = (Xn[:, None, :] - Xn[None, :, :]) ** 2
    eye = np.eye(len(ys))

    def score(idx):
        ls = np.array([LENGTHSCALE_GRID[i] for i in idx[:d]])
        r = np.sqrt(diff2 @ (1.0 / ls**2))
        K = matern52(r, SIGNAL_GRID[idx[d]])
        try:
            L = cholesky(K + NOISE_GRID[idx[d + 1]] * eye, lower=True, check_finite=False)
        except LinAlgError:
            return -np.inf
        alpha = cho_solve((L, True), ys, check_finite=False)
        return _lml(L, alpha, ys)

    rng = np.random.default_rng(seed)
    default = [4] * d + [4, 0]
    starts = [default] + [list(rng.integers(0, 9, size=d + 2)) for _ in range(N_RESTARTS - 1)]
    best_idx, best = None, -np.inf
    cache = {}
    for start in starts:
        idx = list(start)
        current = cache.setdefault(tuple(idx), score(idx))
        for _ in range(MAX_SWEEPS):
            moved = False
            for j in range(d + 2):
                for g in range(len(grids[j])):
                    if g == idx[j]:
                        continue
                    trial = idx.copy()
                    trial[j] = g
                    key = tuple(trial)
                    if key not in cache:
                        cache[key] = score(trial)
                    if cache[key] > current:
                        idx, current, moved = trial, cache[key], True
            if not moved:
                break
        if current > best:
            best_idx, best = idx, current
    if best_idx is None:
        return np.full(d, DEFAULT_LENGTHSCALE), DEFAULT_SIGNAL_VAR, DEFAULT_NOISE_VAR
    ls = np.array([LENGTHSCALE_GRID[i] for i in best_idx[:d]])
    return ls, float(SIGNAL_GRID[best_idx[d]]), float(NOISE_GRID[best_idx[d + 1]])


def fit(X, y, hyper_opt: bool = False, bounds=None, seed: int = 0, *,
        lengthscales=None, signal_var: float | None = None,
        noise_var: float | None = None) -> GpModel:
    """Condition a GP on ``(X, y)``.

    ``bounds`` is ``(lower, upper)`` of the input box (default: unit cube).
    Without ``hyper_opt`` the kernel uses lengthscale 0.5 per dimension,
    signal variance 1 and noise 1e-6, all in standardized units, unless
    overridden by keyword.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(X) < 1 or len(X) != len(y):
        raise ValueError(f"need n >= 1 matching rows, got X {X.shape} and y {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("responses must be finite")
    d = X.shape[1]
    if bounds is None:
        lower, upper = np.zeros(d), np.ones(d)
    else:
        lower = np.broadcast_to(np.asarray(bounds[0], dtype=float), (d,)).copy()
        upper = np.broadcast_to(np.asarray(bounds[1], dtype=float), (d,)).copy()
    Xn = (X - lower) / (upper - lower)
    mean = float(y.mean())
    scale = float(y.std())
    if not scale > 1e-12:
        scale = 1.0
    ys = (y - mean) / scale
    if hyper_opt:
        ls, sv, nv = _search_hyperparameters(Xn, ys, seed)
    else:
        ls = np.full(d, DEFAULT_LENGTHSCALE)
        sv, nv = DEFAULT_SIGNAL_VAR, DEFAULT_NOISE_VAR
    if lengthscales is not None:
        ls = np.broadcast_to(np.asarray(lengthscales, dtype=float), (d,)).copy()
    sv = sv if signal_var is None else float(signal_var)
    nv = nv if noise_var is None else float(noise_var)
    L, alpha, noise, lml = _condition(Xn, ys, ls, sv, nv)
    return GpModel(Xn, mean, scale, ls, sv, noise, L, alpha, lower, upper, lml)


def predict(model: GpModel, x, standardized: bool = False):
    """Posterior mean and variance of the latent function at ``x`` (one row or many).

    Returns scalars for a single point, arrays for a batch.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    Xq = model.normalize(x)
    Kq = kernel(Xq, model.train_inputs, model.lengthscales, model.signal_var)
    mean = Kq @ model.alpha
    v = solve_triangular(model.cholesky, Kq.T, lower=True, check_finite=False)
    var = np.maximum(model.signal_var - (v * v).sum(axis=0), 0.0)
    if not standardized:
        mean = mean * model.y_scale + model.y_mean
        var = var * model.y_scale**2
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def acquisition_lcb(model: GpModel, x, beta: float):
    """Lower confidence bound ``mean - sqrt(beta) * std`` (both objectives are minimized)."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    mean, var = predict(model, x)
    return mean - math.sqrt(beta) * np.sqrt(var)

"""End-to-end training procedures and trade-off curve evaluation.

* ``joslim_train`` alternates sandwich training with BO over widths, where
  the architecture history is shared across iterations.
* ``slim_train`` trains uniform width multipliers only.
* ``bignas_train`` trains random layer-wise widths first, then searches
  the frozen network with random-scalarization BO.

All three run the same number of gradient steps for one config.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import mobo, nn, pareto
from .archspec import ArchSpec, cost_function
from .data import Dataset, batch_stream

log = logging.getLogger(__name__)

SAMPLERS = ("ts2", "rs")
SLIM_EVAL_POINTS = 40
BISECTION_STEPS = 60

# independent random streams derived from the run seed
_STREAM_TRAIN, _STREAM_REEVAL, _STREAM_SEARCH, _STREAM_WIDTHS = 1, 2, 3, 4


@dataclass
class JoslimConfig:
    F: int = 100
    K: int | None = 50  # None: derived from train.epochs
    M: int = 2
    w0: float | None = None  # None: the spec's own lower bound
    epsilon: float = 0.02
    max_search_iters: int = 10
    cost_objective: str = "flops"
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    gp_hyper_opt: bool = False
    beta: float = mobo.DEFAULT_BETA
    sampler: str = "ts2"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = nn.TrainConfig(**self.train)
        if self.F < 1:
            raise ValueError("F must be >= 1")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be >= 1")
        if self.K is None and self.train.epochs < 1:
            raise ValueError("either K or train.epochs must be given")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.max_search_iters < 1:
            raise ValueError("max_search_iters must be >= 1")
        if self.cost_objective not in ("flops", "memory"):
            raise ValueError(f"unknown cost_objective {self.cost_objective!r}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.w0 is not None and not 0 < self.w0 <= 1:
            raise ValueError("w0 must be in (0, 1]")

    def steps_per_iteration(self, n_train: int) -> int:
        if self.K is not None:
            return self.K
        per_epoch = math.ceil(n_train / self.train.batch_size)
        return max(1, math.ceil(self.train.epochs * per_epoch / self.F))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunArtifacts:
    method: str
    spec: ArchSpec
    config: JoslimConfig
    weights: nn.SharedWeights
    history: mobo.History
    pareto: list  # indices into history, front 0, cost ascending
    logs: list
    total_steps: int
    lower: np.ndarray  # width box
    upper: np.ndarray

    @property
    def pareto_widths(self) -> np.ndarray:
        return self.history.widths()[self.pareto]

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for entry in self.logs:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


# -- shared pieces ----------------------------------------------------------------------


def _stream_seed(seed: int, stream: int) -> int:
    return int(np.random.default_rng([seed, stream]).integers(2**31))


def _box(spec: ArchSpec, config: JoslimConfig):
    w0 = spec.w0 if config.w0 is None else config.w0
    if w0 < spec.w0:
        raise ValueError(f"w0={w0} is below the spec's lower bound {spec.w0}")
    return np.full(spec.d, w0), np.ones(spec.d)


def _ce_on(weights, spec, widths, inputs, labels) -> np.ndarray:
    out = np.empty(len(widths))
    for i, w in enumerate(widths):
        logits = nn.forward(weights, spec, w, inputs)
        out[i] = nn.ce_loss(logits, labels)
    return out


def _reevaluate(history: mobo.History, weights, spec, inputs, labels) -> None:
    if len(history):
        for e, ce in zip(history, _ce_on(weights, spec, history.widths(), inputs, labels)):
            e.ce = float(ce)


class _Trainer:
    """Owns the weights, optimizer state and minibatch stream of one run."""

    def __init__(self, spec, train_set: Dataset, config: JoslimConfig, total_steps: int):
        self.spec = spec
        self.config = config
        self.weights = nn.init_weights(spec, config.seed)
        self.state = nn.SgdState()
        self.stream = batch_stream(train_set, config.train.batch_size,
                                   _stream_seed(config.seed, _STREAM_TRAIN))
        self.total = total_steps
        self.step = 0

    def run(self, widths, count: int) -> dict:
        full, sub = [], []
        for _ in range(count):
            out = nn.slimmable_train_step(self.weights, self.spec, widths, next(self.stream),
                                          self.config.train, self.step, self.total, self.state)
            self.step += 1
            full.append(out["full"])
            sub.extend(out["sub"])
        return {"full_loss": float(np.mean(full)),
                "sub_loss": float(np.mean(sub)) if sub else None}


def _final_front(history: mobo.History, weights, spec, train_set: Dataset) -> list:
    """Reevaluate H on the whole train split and keep front 0 of (CE, cost)."""
    _reevaluate(history, weights, spec, train_set.inputs, train_set.labels)
    return pareto.pareto_front(history.ce(), history.costs())


# -- Joslim -----------------------------------------------------------------------------


def joslim_train(spec: ArchSpec, dataset: Dataset, config: JoslimConfig,
                 callback=None) -> RunArtifacts:
    train_set = dataset.train
    if len(train_set) == 0:
        raise ValueError("dataset has no training samples")
    lower, upper = _box(spec, config)
    cost = cost_function(spec, config.cost_objective)
    full_cost = float(cost(upper))
    cost_range = (float(cost(lower)), full_cost)
    K = config.steps_per_iteration(len(train_set))
    trainer = _Trainer(spec, train_set, config, config.F * K)
    reeval = batch_stream(train_set, config.train.batch_size,
                          _stream_seed(config.seed, _STREAM_REEVAL))
    search_rng = np.random.default_rng(_stream_seed(config.seed, _STREAM_SEARCH))
    history = mobo.History()
    logs = []
    for t in range(config.F):
        batch = next(reeval)
        _reevaluate(history, trainer.weights, spec, batch.inputs, batch.labels)
        samples = []
        if len(history) == 0:
            # nothing to fit yet: the first widths are drawn uniformly from the box
            for _ in range(config.M):
                samples.append(mobo.SampleResult(
                    lower + search_rng.random(spec.d) * (upper - lower), float("nan"),
                    None, None, 0))
        else:
            sur = mobo.fit_surrogates(history, (lower, upper), full_cost,
                                      hyper_opt=config.gp_hyper_opt,
                                      seed=int(search_rng.integers(2**31)), beta=config.beta)
            for _ in range(config.M):
                if config.sampler == "ts2":
                    samples.append(mobo.mobo_ts2_sample(
                        sur, cost, (lower, upper), config.epsilon, config.max_search_iters,
                        search_rng, cost_range=cost_range))
                else:
                    samples.append(mobo.mobo_rs_sample(sur, (lower, upper), search_rng))
        new = [s.width for s in samples]
        for w, ce in zip(new, _ce_on(trainer.weights, spec, new, batch.inputs, batch.labels)):
            history.append(mobo.HistoryEntry(w, float(ce), float(cost(w)), t))
        losses = trainer.run(new + [lower], K)
        searched = [s.iterations for s in samples if s.iterations]
        entry = {
            "iteration": t,
            "history_size": len(history),
            "widths": [list(map(float, w)) for w in new],
            "lambdas": [s.lam for s in samples if s.iterations],
            "targets": [s.target for s in samples if s.target is not None],
            "gaps": [s.gap for s in samples if s.gap is not None],
            "search_iters": searched,
            "mean_search_iters": float(np.mean(searched)) if searched else None,
            **losses,
        }
        logs.append(entry)
        log.debug("joslim iter %d: %s", t, entry)
        if callback:
            callback(entry)
    front = _final_front(history, trainer.weights, spec, train_set)
    return RunArtifacts("joslim", spec, config, trainer.weights, history, front, logs,
                        trainer.step, lower, upper)


# -- Slim -------------------------------------------------------------------------------


def uniform_for_cost(spec: ArchSpec, cost, target: float, lo: float, hi: float) -> float:
    """Bisection on a global multiplier so that cost(m * 1) is closest to ``target``."""
    a, b = lo, hi
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (a + b)
        if cost(np.full(spec.d, mid)) < target:
            a = mid
        else:
            b = mid
    ca, cb = cost(np.full(spec.d, a)), cost(np.full(spec.d, b))
    return a if abs(ca - target) <= abs(cb - target) else b


def slim_train(spec: ArchSpec, dataset: Dataset, config: JoslimConfig,
               callback=None) -> RunArtifacts:
    train_set = dataset.train
    if len(train_set) == 0:
        raise ValueError("dataset has no training samples")
    lower, upper = _box(spec, config)
    w0 = float(lower[0])
    cost = cost_function(spec, config.cost_objective)
    K = config.steps_per_iteration(len(train_set))
    trainer = _Trainer(spec, train_set, config, config.F * K)
    rng = np.random.default_rng(_stream_seed(config.seed, _STREAM_WIDTHS))
    logs = []
    for t in range(config.F):
        full, sub = [], []
        for _ in range(K):
            mults = rng.uniform(w0, 1.0, size=config.M)
            out = trainer.run([np.full(spec.d, m) for m in mults] + [lower], 1)
            full.append(out["full_loss"])
            sub.append(out["sub_loss"])
        entry = {"iteration": t, "full_loss": float(np.mean(full)),
                 "sub_loss": float(np.mean(sub))}
        logs.append(entry)
        if callback:
            callback(entry)
    # evaluation widths: uniform multipliers spread evenly on the cost axis
    targets = np.linspace(cost(lower), cost(upper), SLIM_EVAL_POINTS)
    history = mobo.History()
    for c in targets:
        m = uniform_for_cost(spec, cost, c, w0, 1.0)
        w = np.full(spec.d, m)
        history.append(mobo.HistoryEntry(w, float("nan"), float(cost(w)), config.F))
    front = _final_front(history, trainer.weights, spec, train_set)
    return RunArtifacts("slim", spec, config, trainer.weights, history, front, logs,
                        trainer.step, lower, upper)


# -- BigNAS -----------------------------------------------------------------------------


def bignas_train(spec: ArchSpec, dataset: Dataset, config: JoslimConfig,
                 callback=None) -> RunArtifacts:
    train_set = dataset.train
    if len(train_set) == 0:
        raise ValueError("dataset has no training samples")
    lower, upper = _box(spec, config)
    cost = cost_function(spec, config.cost_objective)
    full_cost = float(cost(upper))
    K = config.steps_per_iteration(len(train_set))
    trainer = _Trainer(spec, train_set, config, config.F * K)
    rng = np.random.default_rng(_stream_seed(config.seed, _STREAM_WIDTHS))
    logs = []
    # stage 1: random layer-wise widths
    for t in range(config.F):
        full, sub = [], []
        for _ in range(K):
            widths = [lower + rng.random(spec.d) * (upper - lower) for _ in range(config.M)]
            out = trainer.run(widths + [lower], 1)
            full.append(out["full_loss"])
            sub.append(out["sub_loss"])
        entry = {"stage": 1, "iteration": t, "full_loss": float(np.mean(full)),
                 "sub_loss": float(np.mean(sub))}
        logs.append(entry)
        if callback:
            callback(entry)
    # stage 2: random-scalarization BO on the frozen weights, M widths per round
    search_rng = np.random.default_rng(_stream_seed(config.seed, _STREAM_SEARCH))
    history = mobo.History()
    x, y = train_set.inputs, train_set.labels
    for t in range(config.F):
        if len(history) == 0:
            new = [lower + search_rng.random(spec.d) * (upper - lower) for _ in range(config.M)]
            lams = []
        else:
            sur = mobo.fit_surrogates(history, (lower, upper), full_cost,
                                      hyper_opt=config.gp_hyper_opt,
                                      seed=int(search_rng.integers(2**31)), beta=config.beta)
            samples = [mobo.mobo_rs_sample(sur, (lower, upper), search_rng)
                       for _ in range(config.M)]
            new = [s.width for s in samples]
            lams = [s.lam for s in samples]
        for w, ce in zip(new, _ce_on(trainer.weights, spec, new, x, y)):
            history.append(mobo.HistoryEntry(w, float(ce), float(cost(w)), t))
        entry = {"stage": 2, "iteration": t, "history_size": len(history),
                 "widths": [list(map(float, w)) for w in new], "lambdas": lams}
        logs.append(entry)
        if callback:
            callback(entry)
    front = pareto.pareto_front(history.ce(), history.costs())
    return RunArtifacts("bignas", spec, config, trainer.weights, history, front, logs,
                        trainer.step, lower, upper)


TRAINERS = {"joslim": joslim_train, "slim": slim_train, "bignas": bignas_train}


# -- evaluation -------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    width: np.ndarray
    cost: float
    train_loss: float
    val_error: float


def eval_tradeoff_curve(weights, spec: ArchSpec, dataset: Dataset, widths, N_grid: int = 50,
                        *, lower=None, cost_objective: str = "flops"):
    """Held-out trade-off curve of a set of candidate widths.

    The two extreme widths (all-lower-bound and all-ones) are added as
    anchors; the candidates are re-sorted by full train-split loss and cost,
    and the curve at each grid cost takes the held-out error of the most
    expensive front point not exceeding it.  Returns ``(CurveEstimate,
    points)`` with the front points sorted by cost.
    """
    widths = [np.asarray(w, dtype=float) for w in widths]
    if not widths:
        raise ValueError("empty Pareto set")
    lo = np.full(spec.d, spec.w0 if lower is None else float(np.min(lower)))
    hi = np.ones(spec.d)
    cost = cost_function(spec, cost_objective)
    cands = [lo, hi]
    seen = {lo.tobytes(), hi.tobytes()}
    for w in widths:
        if w.tobytes() not in seen:
            seen.add(w.tobytes())
            cands.append(w)
    train, val = dataset.train, dataset.val
    if len(val) == 0:
        raise ValueError("dataset has no held-out samples")
    losses = _ce_on(weights, spec, cands, train.inputs, train.labels)
    costs = np.array([float(cost(w)) for w in cands])
    front = pareto.pareto_front(losses, costs)
    points = []
    for i in front:
        _, err = nn.evaluate(weights, spec, cands[i], val)
        points.append(CurvePoint(cands[i], costs[i], float(losses[i]), float(err)))
    curve = pareto.staircase([p.cost for p in points], [p.val_error for p in points])
    estimate = pareto.auc_riemann(curve, float(cost(lo)), float(cost(hi)), N_grid)
    return estimate, points


def evaluate_run(art: RunArtifacts, dataset: Dataset, N_grid: int = 50):
    return eval_tradeoff_curve(art.weights, art.spec, dataset, art.pareto_widths, N_grid,
                               lower=art.lower, cost_objective=art.config.cost_objective)

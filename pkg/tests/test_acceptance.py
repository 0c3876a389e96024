"""End-to-end acceptance checks, one ``test_cNN_`` group per criterion.

The summary hook in conftest.py prints one PASS/FAIL line per criterion.
Tolerances and time limits are pinned here and must not be loosened.
"""

import logging
import math
import time

import numpy as np
import pytest

from audits import audit_history, audit_pareto
from gradcheck import max_rel_error
from slimjoint import archspec, drivers, gp, mobo, nn, pareto
from slimjoint.data import synth_spirals

log = logging.getLogger(__name__)

SEEDS = (0, 1, 2)

# -- frozen desk task -------------------------------------------------------------------------

DESK_SPEC = archspec.tiny_resnet()
DESK_DATA = synth_spirals(3, 3000, 0.1, 0, turns=2.0)


def desk_config(seed, **kw):
    return drivers.JoslimConfig(seed=seed, train=nn.TrainConfig(learning_rate=0.05), **kw)


class DeskRuns:
    """Lazily trained desk runs, shared by the end-to-end criteria."""

    def __init__(self):
        self._runs = {}
        self.seconds = {}

    def get(self, method, seed, **kw):
        key = (method, seed, tuple(sorted(kw.items())))
        if key not in self._runs:
            start = time.perf_counter()
            art = drivers.TRAINERS[method](DESK_SPEC, DESK_DATA, desk_config(seed, **kw))
            est, points = drivers.evaluate_run(art, DESK_DATA)
            self.seconds[key] = time.perf_counter() - start
            self._runs[key] = (art, est, points)
        return self._runs[key]


@pytest.fixture(scope="module")
def desk():
    return DeskRuns()


# -- 1: cost model --------------------------------------------------------------------------------


def test_c01_mobilenetv2_macs(detail):
    start = time.perf_counter()
    spec = archspec.mobilenetv2_cost()
    full = archspec.count_flops(spec, np.ones(spec.d))
    small = archspec.count_flops(spec, np.full(spec.d, spec.w0))
    elapsed = time.perf_counter() - start
    detail(f"full={full / 1e6:.1f}M w0={small / 1e6:.1f}M")
    assert abs(full / 300e6 - 1) <= 0.05
    assert abs(small / 59e6 - 1) <= 0.05
    assert elapsed < 1.0


# -- 2: GP posterior ------------------------------------------------------------------------------


def _matern(A, B, ls, sv):
    r = np.sqrt((((A[:, None, :] - B[None, :, :]) / ls) ** 2).sum(-1))
    return sv * (1 + math.sqrt(5) * r + 5 / 3 * r**2) * np.exp(-math.sqrt(5) * r)


def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12)))


def test_c02_gp_posterior_matches_dense_solve(detail):
    start = time.perf_counter()
    worst = 0.0
    for n in (1, 5, 20, 50):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            X = rng.uniform(0, 1, size=(n, 6))
            y = np.sin(3 * X).sum(1) + 0.1 * rng.normal(size=n)
            Xq = rng.uniform(0, 1, size=(25, 6))
            model = gp.fit(X, y)
            ys = (y - model.y_mean) / model.y_scale
            K = _matern(X, X, model.lengthscales, model.signal_var) + model.noise_var * np.eye(n)
            Kq = _matern(Xq, X, model.lengthscales, model.signal_var)
            mean = Kq @ np.linalg.solve(K, ys)
            var = model.signal_var - np.einsum("ij,ji->i", Kq, np.linalg.solve(K, Kq.T))
            m, v = gp.predict(model, Xq, standardized=True)
            worst = max(worst, _rel(m, mean), _rel(v, var))
    elapsed = time.perf_counter() - start
    detail(f"worst_rel={worst:.2e}")
    assert worst <= 1e-8
    assert elapsed < 10.0


# -- 3: gradients --------------------------------------------------------------------------------


def test_c03_finite_difference_gradients(detail):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    worst, skipped = 0.0, 0
    for spec in (archspec.tiny_mlp(), archspec.tiny_resnet()):
        for _ in range(5):
            width = spec.w0 + rng.random(spec.d) * (1 - spec.w0)
            err, skip = max_rel_error(spec, width)
            worst, skipped = max(worst, err), skipped + skip
    elapsed = time.perf_counter() - start
    detail(f"worst_rel={worst:.2e} skipped={skipped}")
    assert worst <= 1e-4
    assert skipped == 0  # every used parameter entry was checked
    assert elapsed < 30.0


# -- 4: targeted search -------------------------------------------------------------------------


def test_c04_ts2_reaches_targets_on_monotone_mock(detail):
    def argmin(lam):
        return np.full(4, 1.0 - lam / 2)

    def cost(a):
        return float(np.sum(np.asarray(a) ** 2))

    start = time.perf_counter()
    full, low = cost(np.ones(4)), cost(np.full(4, 0.5))
    rng = np.random.default_rng(0)
    results = [mobo.targeted_search(argmin, cost, t, full, 0.02, 10)
               for t in rng.uniform(low, full, 100)]
    elapsed = time.perf_counter() - start
    hits = sum(r.gap <= 0.02 and r.iterations <= 10 for r in results)
    detail(f"hits={hits}/100 mean_iters={np.mean([r.iterations for r in results]):.2f}")
    assert hits == 100
    assert elapsed < 10.0


def test_c04_search_iterations_on_real_runs(desk, detail):
    """Informational: mean bisection steps per TS2 sample on the desk runs."""
    per_seed = []
    for seed in SEEDS:
        art, _, _ = desk.get("joslim", seed)
        its = [k for entry in art.logs for k in entry["search_iters"]]
        per_seed.append(float(np.mean(its)))
    log.info("mean TS2 search iterations per seed: %s", per_seed)
    detail(f"real_mean_iters={np.mean(per_seed):.2f} (informational)")


# -- 5: non-dominated sort -----------------------------------------------------------------------


def _peel(f1, f2):
    pts = list(zip(f1, f2))
    left = set(range(len(pts)))
    fronts = []
    while left:
        front = [i for i in left
                 if not any(pareto.dominates(pts[j], pts[i]) for j in left if j != i)]
        fronts.append(sorted(front, key=lambda j: (pts[j][1], j)))
        left -= set(front)
    return fronts


def test_c05_sort_matches_quadratic_oracle(detail):
    cases = []
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(1, 201))
        if seed % 2:
            cases.append((rng.integers(0, 10, n).astype(float), rng.integers(0, 10, n).astype(float)))
        else:
            cases.append((rng.random(n), rng.random(n)))
    start = time.perf_counter()
    got = [pareto.non_dominated_sort(f1, f2) for f1, f2 in cases]
    elapsed = time.perf_counter() - start
    mismatches = sum(g != _peel(f1, f2) for g, (f1, f2) in zip(got, cases))
    detail(f"mismatches={mismatches}/50")
    assert mismatches == 0
    assert elapsed < 5.0


# -- 6: AUC ----------------------------------------------------------------------------------------


def test_c06_auc_accuracy(detail):
    start = time.perf_counter()
    lo, hi = 1.0, 5.0
    step = pareto.staircase([1.0, 2.0, 4.0], [0.5, 0.3, 0.1])
    for N in (2, 10, 50, 500):
        assert abs(pareto.auc_riemann(lambda c: 0.42, lo, hi, N).auc - 0.42) <= 1 / (2 * N)
        linear = pareto.auc_riemann(lambda c: 0.2 * c, lo, hi, N).auc
        assert abs(linear - 0.2 * (lo + hi) / 2) <= 1 / (2 * N)
        # one grid cell: the total jump of the staircase over one cell, normalized
        cell = (0.5 - 0.1) / (N - 1)
        assert abs(pareto.auc_riemann(step, lo, hi, N).auc - 0.3) <= cell
    elapsed = time.perf_counter() - start
    detail(f"{elapsed * 1e3:.1f}ms")
    assert elapsed < 1.0


# -- 7: trade-off quality on the desk task -------------------------------------------------------


def test_c07_joslim_auc_vs_baselines(desk, detail):
    auc = {m: [desk.get(m, s)[1].auc for s in SEEDS] for m in ("joslim", "slim", "bignas")}
    seconds = sum(desk.seconds[(m, s, ())] for m in auc for s in SEEDS)
    mean = {m: float(np.mean(v)) for m, v in auc.items()}
    log.info("desk AUC per seed: %s", auc)
    detail("mean AUC " + " ".join(f"{m}={v:.4f}" for m, v in mean.items()) + f" ({seconds:.0f}s)")
    assert seconds < 30 * 60
    assert mean["joslim"] <= mean["slim"]
    assert mean["joslim"] <= mean["bignas"] + 0.01


# -- 8: cost coverage ------------------------------------------------------------------------------


def test_c08_ts2_covers_costs_better_than_rs(desk, detail):
    lo = archspec.count_flops(DESK_SPEC, np.full(DESK_SPEC.d, DESK_SPEC.w0))
    hi = archspec.count_flops(DESK_SPEC, np.ones(DESK_SPEC.d))
    ent = {}
    for sampler in ("ts2", "rs"):
        ent[sampler] = [mobo.cost_entropy(desk.get("joslim", s, **_sampler(sampler))[0]
                                          .history.costs(), lo, hi, bins=10) for s in SEEDS]
    detail("entropy ts2=" + ",".join(f"{v:.3f}" for v in ent["ts2"])
           + " rs=" + ",".join(f"{v:.3f}" for v in ent["rs"]))
    assert all(t > r for t, r in zip(ent["ts2"], ent["rs"]))


def _sampler(name):
    return {} if name == "ts2" else {"sampler": name}  # ts2 is the default, keep cache keys shared


# -- 9: determinism --------------------------------------------------------------------------------


def _artifact_bytes(art, tmp_path, tag):
    art.history.to_csv(tmp_path / f"{tag}.csv")
    nn.save_checkpoint(tmp_path / f"{tag}.sjckpt", art.weights, art.spec,
                       config=art.config.to_dict(), step=art.total_steps)
    return (tmp_path / f"{tag}.csv").read_bytes(), (tmp_path / f"{tag}.sjckpt").read_bytes()


def test_c09_rerun_is_byte_identical(desk, tmp_path, detail):
    first, _, _ = desk.get("joslim", 0)
    again = drivers.joslim_train(DESK_SPEC, DESK_DATA, desk_config(0))
    csv_a, ckpt_a = _artifact_bytes(first, tmp_path, "a")
    csv_b, ckpt_b = _artifact_bytes(again, tmp_path, "b")
    detail(f"csv={len(csv_a)}B ckpt={len(ckpt_a)}B")
    assert csv_a == csv_b
    assert ckpt_a == ckpt_b


# -- 10: memory objective --------------------------------------------------------------------------


def test_c10_memory_objective_audits(desk, detail):
    art, _, points = desk.get("joslim", 0, cost_objective="memory")
    audit_history(art, DESK_DATA)
    audit_pareto(art)
    for e in art.history:
        assert e.cost == archspec.count_memory(DESK_SPEC, e.width)
    detail(f"|H|={len(art.history)} front={len(art.pareto)}")

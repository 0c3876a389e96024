import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slimjoint import pareto


def peel_oracle(f1, f2):
    """Quadratic reference: repeatedly strip the points nobody dominates."""
    pts = list(zip(f1, f2))
    left = set(range(len(pts)))
    fronts = []
    while left:
        front = [i for i in left
                 if not any(pareto.dominates(pts[j], pts[i]) for j in left if j != i)]
        fronts.append(sorted(front, key=lambda j: (pts[j][1], j)))
        left -= set(front)
    return fronts


def _instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 201))
    if seed % 3 == 0:  # coarse values force ties and duplicates
        return rng.integers(0, 8, n).astype(float), rng.integers(0, 8, n).astype(float)
    return rng.random(n), rng.random(n)


# -- non-dominated sort ---------------------------------------------------------------------


def test_four_point_example():
    f1 = [1.0, 2.0, 3.0, 2.5]
    f2 = [4.0, 2.0, 1.0, 3.0]
    assert pareto.non_dominated_sort(f1, f2) == [[2, 1, 0], [3]]


def test_identical_points_share_a_front():
    assert pareto.non_dominated_sort([1.0, 1.0, 1.0], [2.0, 2.0, 2.0]) == [[0, 1, 2]]


def test_matches_quadratic_oracle_on_random_instances():
    for seed in range(50):
        f1, f2 = _instance(seed)
        assert pareto.non_dominated_sort(f1, f2) == peel_oracle(f1, f2), seed


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=40))
def test_matches_oracle_on_small_grids(points):
    f1 = np.array([p[0] for p in points], float)
    f2 = np.array([p[1] for p in points], float)
    assert pareto.non_dominated_sort(f1, f2) == peel_oracle(f1, f2)


def test_fronts_partition_indices_and_are_mutually_non_dominated():
    f1, f2 = _instance(4)
    fronts = pareto.non_dominated_sort(f1, f2)
    assert sorted(i for fr in fronts for i in fr) == list(range(len(f1)))
    for fr in fronts:
        for i in fr:
            assert not any(pareto.dominates((f1[j], f2[j]), (f1[i], f2[i])) for j in fr)


def test_front_of_front_is_itself():
    f1, f2 = _instance(5)
    front = pareto.pareto_front(f1, f2)
    again = pareto.pareto_front(f1[front], f2[front])
    assert [front[i] for i in again] == front


def test_positive_affine_rescaling_preserves_fronts():
    f1, f2 = _instance(7)
    assert pareto.non_dominated_sort(3 * f1 + 1, 0.5 * f2 - 2) == pareto.non_dominated_sort(f1, f2)


@pytest.mark.parametrize("f1,f2", [([], []), ([1.0], [1.0, 2.0]), ([np.nan], [1.0]),
                                   ([1.0], [np.inf])])
def test_sort_rejects_bad_input(f1, f2):
    with pytest.raises(ValueError):
        pareto.non_dominated_sort(f1, f2)


# -- AUC ----------------------------------------------------------------------------------------


@pytest.mark.parametrize("N", [2, 7, 50])
def test_auc_of_constant_and_linear(N):
    lo, hi = 2.0, 6.0
    assert abs(pareto.auc_riemann(lambda c: 0.3, lo, hi, N).auc - 0.3) <= 1 / (2 * N)
    exact = (lo + hi) / 2 * 0.1  # mean of 0.1 c over [lo, hi]
    assert abs(pareto.auc_riemann(lambda c: 0.1 * c, lo, hi, N).auc - exact) <= 1 / (2 * N)


@pytest.mark.parametrize("N", [11, 50, 201])
def test_staircase_auc_matches_hand_integral(N):
    curve = pareto.staircase([1.0, 2.0, 4.0], [0.5, 0.3, 0.1])
    # on [1, 5]: 0.5 on [1,2), 0.3 on [2,4), 0.1 on [4,5]  ->  (0.5 + 0.6 + 0.1) / 4
    est = pareto.auc_riemann(curve, 1.0, 5.0, N)
    cell = (0.5 - 0.1) / (N - 1)
    assert abs(est.auc - 0.3) <= cell
    assert est.grid[0] == 1.0 and est.grid[-1] == 5.0 and len(est.samples) == N


def test_staircase_lookup_rules():
    curve = pareto.staircase([1.0, 2.0, 2.0, 4.0], [0.5, 0.4, 0.3, 0.1])
    assert curve(1.0) == 0.5
    assert curve(1.999) == 0.5
    assert curve(2.0) == 0.3  # tie at one cost resolves to the lower loss
    assert curve(100.0) == 0.1
    with pytest.raises(ValueError, match="no width"):
        curve(0.5)


def test_auc_monotone_in_the_curve():
    rng = np.random.default_rng(0)
    costs = np.sort(rng.uniform(1, 10, 12))
    costs[0] = 1.0
    losses = np.sort(rng.uniform(0, 1, 12))[::-1]
    base = pareto.auc_riemann(pareto.staircase(costs, losses), 1.0, 10.0, 50).auc
    better = pareto.auc_riemann(pareto.staircase(costs, losses - 0.05), 1.0, 10.0, 50).auc
    assert better == pytest.approx(base - 0.05)


@pytest.mark.parametrize("lo,hi,N", [(1.0, 1.0, 10), (2.0, 1.0, 10), (0.0, 1.0, 1)])
def test_auc_rejects_bad_grid(lo, hi, N):
    with pytest.raises(ValueError):
        pareto.auc_riemann(lambda c: 0.0, lo, hi, N)


def test_curve_csv_round_trip(tmp_path):
    rows = [(1.0, 0.5, 0.25, [0.3, 0.4]), (2.5, 0.1, 0.125, [1.0, 1.0])]
    pareto.write_curve_csv(tmp_path / "c.csv", rows, 2)
    cost, loss, err = pareto.read_curve_csv(tmp_path / "c.csv")
    assert cost.tolist() == [1.0, 2.5] and loss.tolist() == [0.5, 0.1]
    assert err.tolist() == [0.25, 0.125]
    (tmp_path / "bad.csv").write_text("x,y\n1,2\n")
    with pytest.raises(ValueError, match="missing"):
        pareto.read_curve_csv(tmp_path / "bad.csv")

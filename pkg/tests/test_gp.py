import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slimjoint import gp


def _matern(A, B, ls, sv):
    r = np.sqrt((((A[:, None, :] - B[None, :, :]) / ls) ** 2).sum(-1))
    return sv * (1 + math.sqrt(5) * r + 5 / 3 * r**2) * np.exp(-math.sqrt(5) * r)


def _problem(n, seed, d=3):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, size=(n, d))
    y = np.sin(3 * X).sum(1) + 0.1 * rng.normal(size=n)
    return X, y, rng.uniform(0, 1, size=(30, d))


def _rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12))


# -- oracle --------------------------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 5, 20, 50])
def test_posterior_matches_dense_solve(n):
    for seed in range(20):
        X, y, Xq = _problem(n, seed)
        model = gp.fit(X, y)
        ys = (y - model.y_mean) / model.y_scale
        K = _matern(X, X, model.lengthscales, model.signal_var) + model.noise_var * np.eye(n)
        Kq = _matern(Xq, X, model.lengthscales, model.signal_var)
        mean = Kq @ np.linalg.solve(K, ys)
        var = model.signal_var - np.einsum("ij,ji->i", Kq, np.linalg.solve(K, Kq.T))
        m, v = gp.predict(model, Xq, standardized=True)
        assert _rel(m, mean) <= 1e-8
        assert _rel(v, var) <= 1e-8


def test_destandardized_prediction_is_affine():
    X, y, Xq = _problem(10, 0)
    model = gp.fit(X, y)
    m_s, v_s = gp.predict(model, Xq, standardized=True)
    m, v = gp.predict(model, Xq)
    np.testing.assert_allclose(m, m_s * y.std() + y.mean(), rtol=1e-12)
    np.testing.assert_allclose(v, v_s * y.var(), rtol=1e-12)


def test_cholesky_reconstructs_gram():
    X, y, _ = _problem(40, 1)
    model = gp.fit(X, y)
    L = model.cholesky
    assert np.max(np.abs(L @ L.T - model.gram())) <= 1e-8


# -- behaviour ------------------------------------------------------------------------------


def test_interpolates_training_points():
    X, y, _ = _problem(15, 2)
    model = gp.fit(X, y)
    m, _ = gp.predict(model, X, standardized=True)
    assert np.max(np.abs(m - (y - y.mean()) / y.std())) <= 1e-4


def test_reverts_to_prior_far_away():
    X, y, _ = _problem(10, 3, d=1)
    model = gp.fit(X, y, bounds=(0.0, 1.0), lengthscales=0.05)
    m, v = gp.predict(model, np.array([[40.0]]), standardized=True)
    assert abs(m[0]) < 1e-9
    assert v[0] == pytest.approx(model.signal_var, rel=1e-9)


def test_kernel_at_zero_distance_is_signal_variance():
    for sv in (0.3, 1.0, 7.0):
        assert gp.matern52(np.array(0.0), sv) == sv
    x = np.array([[0.2, 0.4]])
    assert gp.kernel(x, x, np.array([0.5, 0.5]), 2.0)[0, 0] == 2.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 25))
def test_prediction_invariant_to_row_order(seed, n):
    X, y, Xq = _problem(n, seed)
    perm = np.random.default_rng(seed).permutation(n)
    a = gp.predict(gp.fit(X, y), Xq)
    b = gp.predict(gp.fit(X[perm], y[perm]), Xq)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-6, atol=1e-10)


def test_duplicate_observation_never_increases_variance():
    X, y, Xq = _problem(8, 4)
    more = gp.fit(np.vstack([X, X[:1]]), np.append(y, y[0]),
                  noise_var=1e-2)  # duplicates need noise to stay well-posed
    ref = gp.fit(X, y, noise_var=1e-2)
    _, v1 = gp.predict(more, Xq, standardized=True)
    _, v_ref = gp.predict(ref, Xq, standardized=True)
    assert np.all(v1 <= v_ref + 1e-12)


def test_constant_targets():
    X = np.random.default_rng(0).uniform(size=(6, 2))
    model = gp.fit(X, np.full(6, 3.5))
    m, v = gp.predict(model, np.array([[0.5, 0.5], [0.1, 0.9]]))
    np.testing.assert_allclose(m, 3.5)
    assert np.all(v >= 0)


def test_single_point_returns_scalars():
    model = gp.fit([[0.1, 0.2]], [1.0])
    m, v = gp.predict(model, np.array([0.1, 0.2]))
    assert isinstance(m, float) and isinstance(v, float)
    assert m == pytest.approx(1.0)


@pytest.mark.parametrize("y", [[1.0, np.nan], [np.inf, 0.0]])
def test_non_finite_targets_rejected(y):
    with pytest.raises(ValueError):
        gp.fit([[0.0], [1.0]], y)


def test_mismatched_rows_rejected():
    with pytest.raises(ValueError):
        gp.fit([[0.0], [1.0]], [1.0])


def test_bounds_map_inputs_to_unit_cube():
    rng = np.random.default_rng(5)
    X = rng.uniform(0.3, 1.0, size=(10, 2))
    y = X.sum(1)
    a = gp.fit(X, y, bounds=(0.3, 1.0))
    b = gp.fit((X - 0.3) / 0.7, y)
    Xq = rng.uniform(0.3, 1.0, size=(5, 2))
    np.testing.assert_allclose(gp.predict(a, Xq)[0], gp.predict(b, (Xq - 0.3) / 0.7)[0], rtol=1e-10)


def test_jitter_rescues_singular_gram():
    X = np.zeros((5, 2))
    model = gp.fit(X, np.arange(5.0), noise_var=0.0)
    assert model.noise_var >= gp.JITTER_LADDER[0]


# -- acquisition and hyperparameters ----------------------------------------------------------


def test_lcb_hand_value():
    # far from the data the posterior is the prior: mean 1, variance 0.04
    model = gp.fit([[0.0]], [1.0], lengthscales=1e-3, signal_var=0.04)
    assert gp.acquisition_lcb(model, np.array([1.0]), 0.1) == pytest.approx(0.9368, abs=1e-4)
    assert gp.acquisition_lcb(model, np.array([1.0]), 0.0) == pytest.approx(1.0)


def test_lcb_rejects_negative_beta():
    model = gp.fit([[0.0]], [1.0])
    with pytest.raises(ValueError):
        gp.acquisition_lcb(model, np.array([0.5]), -0.1)


def test_hyper_search_deterministic_and_improves_likelihood():
    X, y, _ = _problem(30, 6)
    a = gp.fit(X, y, hyper_opt=True, seed=3)
    b = gp.fit(X, y, hyper_opt=True, seed=3)
    assert np.array_equal(a.lengthscales, b.lengthscales)
    assert (a.signal_var, a.noise_var) == (b.signal_var, b.noise_var)
    assert a.log_marginal_likelihood >= gp.fit(X, y).log_marginal_likelihood
    assert np.all(np.isin(a.lengthscales, gp.LENGTHSCALE_GRID))

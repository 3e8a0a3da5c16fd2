import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from traffic_dtl.svr import (
    SvrConvergenceError,
    SvrModel,
    default_gamma,
    fit,
    fit_multi,
    grid_search,
    predict,
    projected_gradient_dual,
    rbf_kernel,
)


def _problem(seed, n=20, d=3):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, d))
    y = np.sin(2 * X[:, 0]) + 0.5 * X[:, 1] ** 2 + 0.1 * rng.normal(size=n)
    return X, y


def _kkt_violation(X, y, beta, C, eps, gamma):
    """Max violation from scratch: max_{up} -y_s g_s - min_{low} -y_t g_t."""
    l = len(y)
    K = rbf_kernel(X, X, gamma)
    coef = beta[:l] - beta[l:]
    Kc = K @ coef
    sgn = np.concatenate([np.ones(l), -np.ones(l)])
    G = np.concatenate([Kc + eps - y, -Kc + eps + y])
    up = ((sgn > 0) & (beta < C)) | ((sgn < 0) & (beta > 0))
    low = ((sgn > 0) & (beta > 0)) | ((sgn < 0) & (beta < C))
    yg = -sgn * G
    return yg[up].max() - yg[low].min()


@pytest.mark.parametrize("seed", range(10))
def test_objective_matches_bruteforce_qp(seed):
    X, y = _problem(seed)
    C = [0.5, 1.0, 5.0][seed % 3]
    eps = [0.0, 0.05, 0.1][seed % 3]
    gamma = default_gamma(X)
    model = fit(X, y, C, eps, gamma, tol=1e-8)
    _, ref = projected_gradient_dual(X, y, C, eps, gamma)
    assert abs(model.objective - ref) <= 1e-5 * abs(ref)


@pytest.mark.parametrize("seed", range(5))
def test_kkt_feasibility_and_monotone(seed):
    X, y = _problem(100 + seed, n=40)
    C, eps, tol = 2.0, 0.05, 1e-3
    model, beta = fit(X, y, C, eps, tol=tol, track_objective=True, return_dual=True)
    l = len(y)
    assert np.all(beta >= 0) and np.all(beta <= C)
    assert abs(beta[:l].sum() - beta[l:].sum()) < 1e-9
    assert np.all(np.abs(model.dual_coef) <= C + 1e-12)
    assert _kkt_violation(X, y, beta, C, eps, model.gamma) <= tol
    assert model.kkt_violation <= tol
    h = np.array(model.history)
    assert np.all(np.diff(h) <= 1e-12)


def test_tube_on_training_points():
    X, y = _problem(7, n=60)
    C, eps, tol = 1.0, 0.1, 1e-6
    model, beta = fit(X, y, C, eps, tol=tol, return_dual=True)
    l = len(y)
    coef = beta[:l] - beta[l:]
    resid = model.predict(X) - y
    inside = coef == 0
    free = (np.abs(coef) > 0) & (np.abs(coef) < C)
    assert np.all(np.abs(resid[inside]) <= eps + 1e-4)
    assert np.allclose(np.abs(resid[free]), eps, atol=1e-4)
    bound = np.abs(coef) >= C
    assert np.all(np.abs(resid[bound]) >= eps - 1e-4)


def test_single_point_eps_zero():
    m = fit(np.array([[0.3, -0.2]]), np.array([1.7]), C=10.0, epsilon=0.0, gamma=1.0)
    assert predict(m, np.array([0.3, -0.2])) == pytest.approx(1.7)


def test_all_targets_inside_tube():
    X = np.random.default_rng(0).normal(size=(15, 2))
    y = 3.0 + np.random.default_rng(1).uniform(-0.04, 0.04, size=15)
    m = fit(X, y, C=1.0, epsilon=0.05, gamma=0.5)
    assert len(m.dual_coef) == 0
    # any constant in [max(y)-eps, min(y)+eps] is optimal; the midpoint sits near the median
    assert y.max() - 0.05 <= m.bias <= y.min() + 0.05


def test_predict_examples():
    sv = np.array([[1.0, 2.0]])
    m = SvrModel(sv, np.array([0.7]), 0.2, gamma=1e6, C=1.0, epsilon=0.1)
    assert predict(m, np.array([1.0, 2.0])) == pytest.approx(0.9)
    assert predict(m, np.array([5.0, 2.0])) == pytest.approx(0.2)
    empty = SvrModel(np.zeros((0, 2)), np.zeros(0), -1.5, 1.0, 1.0, 0.1)
    assert np.all(empty.predict(np.ones((3, 2))) == -1.5)
    dup = SvrModel(np.array([[0.0, 0.0], [0.0, 0.0]]), np.array([0.4, -0.4]), 0.3, 1.0, 1.0, 0.1)
    assert predict(dup, np.array([0.5, 0.1])) == pytest.approx(0.3)


def test_input_checks_and_nonconvergence():
    X, y = _problem(1)
    with pytest.raises(ValueError):
        fit(X, y, C=0.0)
    with pytest.raises(ValueError):
        fit(X, y, epsilon=-1)
    with pytest.raises(ValueError):
        fit(X, y, gamma=0.0)
    with pytest.raises(SvrConvergenceError) as exc:
        fit(X, y, C=10.0, epsilon=0.0, tol=1e-12, max_iter=2)
    assert exc.value.violation > 0


def test_grid_singleton_and_order_invariance():
    X, y = _problem(3, n=40)
    Xv, yv = _problem(4, n=20)
    best, cells = grid_search(X, y, Xv, yv, [1.0], [0.05], [0.5])
    assert (best.C, best.epsilon, best.gamma) == (1.0, 0.05, 0.5) and len(cells) == 1
    grids = ([0.1, 1.0, 10.0], [0.01, 0.1], [0.3, 1.0])
    ref, _ = grid_search(X, y, Xv, yv, *grids)
    for perm in itertools.islice(itertools.permutations(grids[0]), 3):
        got, _ = grid_search(X, y, Xv, yv, list(perm), grids[1][::-1], grids[2][::-1])
        assert (got.C, got.epsilon, got.gamma) == (ref.C, ref.epsilon, ref.gamma)


def test_grid_tie_break_prefers_simpler():
    # inside-tube data: every C and any eps >= spread give the same constant fit
    X = np.random.default_rng(0).normal(size=(10, 2))
    y = np.full(10, 2.0)
    best, _ = grid_search(X, y, X, y, [10.0, 0.1, 1.0], [0.1, 0.5], [1.0])
    assert best.C == 0.1 and best.epsilon == 0.5


def test_grid_finds_planted_optimum():
    # a noiseless smooth target is fit best with large C, small eps
    rng = np.random.default_rng(5)
    X = rng.uniform(-1, 1, size=(80, 2))
    f = lambda x: np.sin(3 * x[:, 0]) * np.cos(2 * x[:, 1])  # noqa: E731
    Xv = rng.uniform(-1, 1, size=(60, 2))
    best, cells = grid_search(X, f(X), Xv, f(Xv), [0.01, 100.0], [0.001, 0.5], [2.0])
    assert (best.C, best.epsilon) == (100.0, 0.001)
    assert best.mse == min(c.mse for c in cells)


def test_fit_multi_per_output():
    rng = np.random.default_rng(2)
    X = rng.uniform(-1, 1, size=(50, 4, 2))
    Y = np.stack([X[:, -1, 0], X[:, -1, 1] ** 2], axis=1)
    model, cells = fit_multi(X[:40], Y[:40], X[40:], Y[40:], [1.0], [0.01], [0.5])
    assert len(model.models) == 2 and len(cells) == 2
    pred = model.predict(X[40:].reshape(10, -1))
    assert pred.shape == (10, 2)
    assert np.mean((pred - Y[40:]) ** 2) < np.var(Y[40:])


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 25), st.floats(0.1, 10.0), st.floats(0.0, 0.3), st.integers(0, 10_000))
def test_property_dual_feasible(n, C, eps, seed):
    X, y = _problem(seed, n=n)
    model, beta = fit(X, y, C, eps, tol=1e-4, return_dual=True)
    assert np.all(beta >= 0) and np.all(beta <= C)
    assert abs(beta[:n].sum() - beta[n:].sum()) <= 1e-9 * max(1.0, C * n)

import numpy as np
import pytest

from mivinfer.errors import ConfigError
from mivinfer.learners import LearnerSpec, fit_binary, fit_regression, irls_logistic


def toy20():
    x = np.linspace(-1.0, 1.0, 20)
    return x[:, None], (x > 0.05).astype(float)


def newton_reference(X, t, l2, iters=100):
    # plain Newton with fixed penalty, written independently of the package
    D = np.column_stack([np.ones(len(t)), X])
    P = l2 * np.eye(D.shape[1])
    P[0, 0] = 0.0
    w = np.zeros(D.shape[1])
    for _ in range(iters):
        p = 1 / (1 + np.exp(-D @ w))
        g = D.T @ (p - t) / len(t) + P @ w
        H = D.T @ (D * (p * (1 - p))[:, None]) / len(t) + P
        w = w - np.linalg.solve(H, g)
    return w


@pytest.mark.parametrize("l2", [0.5, 0.05])
def test_irls_matches_independent_newton(l2):
    X, t = toy20()
    assert np.allclose(irls_logistic(X, t, l2), newton_reference(X, t, l2), atol=1e-7)


def test_separable_fit_ordered_and_finite():
    X, t = toy20()
    w = irls_logistic(X, t, 1e-6)
    assert np.all(np.isfinite(w)) and w[1] > 0
    p = fit_binary(LearnerSpec("logistic"), X, t).predict(X)[:, 0]
    assert np.all(np.diff(p) >= 0)
    assert p[0] < 0.01 and p[-1] > 0.99


def test_constant_learner():
    X = np.random.default_rng(0).normal(size=(10, 2))
    t = np.array([1, 0, 1, 1, 0, 0, 1, 0, 1, 1], float)
    p = fit_binary(LearnerSpec("constant"), X, t).predict(X[:3])
    assert np.allclose(p, 0.6)


def test_ridge_recovers_linear_function():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50, 2))
    Y = np.column_stack([1 + 2 * X[:, 0] - X[:, 1], X[:, 1]])
    pred = fit_regression(LearnerSpec("logistic"), X, Y).predict(X)
    assert np.allclose(pred, Y, atol=1e-4)


def test_stack_weight_picks_better_member():
    rng = np.random.default_rng(2)
    X = rng.uniform(size=(400, 1))
    Y = 3 * X[:, 0] + rng.normal(0, 0.05, 400)
    spec = LearnerSpec("stack", members=(LearnerSpec("logistic"), LearnerSpec("constant")))
    m = fit_regression(spec, X, Y)
    assert m.weight > 0.95


def test_gbt_multi_target_shapes():
    X = np.random.default_rng(3).uniform(size=(60, 2))
    Y = np.column_stack([X[:, 0], X[:, 1], X.sum(1)])
    assert fit_regression(LearnerSpec("gbt", rounds=5), X, Y).predict(X[:7]).shape == (7, 3)


def test_spec_validation_and_round_trip():
    with pytest.raises(ConfigError):
        LearnerSpec("forest")
    with pytest.raises(ConfigError):
        LearnerSpec("gbt", lr=0.0)
    with pytest.raises(ConfigError):
        LearnerSpec("oracle")
    with pytest.raises(ConfigError):
        LearnerSpec.from_config({"learner": "gbt", "eta": 0.3})
    spec = LearnerSpec("gbt", rounds=50, min_leaf=20)
    assert LearnerSpec.from_config(spec.to_config()) == spec

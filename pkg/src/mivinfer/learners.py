"""Small learner set for the nuisance regressions.

``logistic``  penalised logistic regression by IRLS for binary targets,
              penalised least squares for real-valued ones (linear in X)
``gbt``       gradient-boosted shallow trees, squared loss (see ``kernels``)
``constant``  training mean
``stack``     convex combination of two member learners, weight picked on a
              seeded held-out half
``oracle``    known nuisance functions; resolved in :mod:`mivinfer.nuisance`
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .errors import ConfigError, LearnerDivergence
from .kernels import Binner, fit_trees, predict_trees

LEARNER_KINDS = ("logistic", "gbt", "constant", "oracle", "stack")


@dataclass(frozen=True)
class LearnerSpec:
    kind: str = "gbt"
    lr: float = 0.1
    rounds: int = 100
    depth: int = 1
    min_leaf: int = 5
    max_bins: int = 32
    l2: float = 1e-6
    members: tuple = ()
    seed: int = 0
    oracle: Any = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ConfigError(f"unknown learner {self.kind!r}")
        if not 0.0 < self.lr <= 1.0:
            raise ConfigError(f"learning rate must be in (0, 1], got {self.lr}")
        if self.rounds < 0 or not 1 <= self.depth <= 6:
            raise ConfigError("need rounds >= 0 and 1 <= depth <= 6")
        if self.min_leaf < 1 or self.max_bins < 2 or self.l2 < 0:
            raise ConfigError("need min_leaf >= 1, max_bins >= 2, l2 >= 0")
        if self.kind == "stack" and len(self.members) != 2:
            raise ConfigError("stack learner takes exactly two members")
        if self.kind == "oracle" and self.oracle is None:
            raise ConfigError("oracle learner needs known nuisance functions (simulated data only)")

    @classmethod
    def from_config(cls, cfg: dict | None, oracle=None) -> "LearnerSpec":
        cfg = dict(cfg or {})
        kind = cfg.pop("learner", cfg.pop("kind", "gbt"))
        members = tuple(cls.from_config(m) for m in cfg.pop("members", ()))
        known = {"lr", "rounds", "depth", "min_leaf", "max_bins", "l2", "seed"}
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown learner options {sorted(extra)}")
        return cls(kind=kind, members=members, oracle=oracle if kind == "oracle" else None, **cfg)

    def to_config(self) -> dict:
        out = {"learner": self.kind}
        if self.kind == "gbt":
            out.update(lr=self.lr, rounds=self.rounds, depth=self.depth,
                       min_leaf=self.min_leaf, max_bins=self.max_bins)
        elif self.kind == "logistic":
            out.update(l2=self.l2)
        elif self.kind == "stack":
            out.update(members=[m.to_config() for m in self.members], seed=self.seed)
        return out


def _design(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(X.shape[0]), X])


def irls_logistic(X: np.ndarray, t: np.ndarray, l2: float = 1e-6,
                  max_iter: int = 200, tol: float = 1e-10) -> np.ndarray:
    """Newton/IRLS for mean log-loss + l2/2 * ||w[1:]||^2 (intercept unpenalised).

    Returns coefficients on ``[1, X]``. Step halving keeps the objective
    monotone, so separable data converges to the finite penalised optimum.
    """
    D = _design(X)
    n, k = D.shape
    pen = np.full(k, l2)
    pen[0] = 0.0
    w = np.zeros(k)
    mbar = np.clip(t.mean(), 1e-6, 1 - 1e-6)
    w[0] = np.log(mbar / (1 - mbar))

    def objective(w):
        eta = D @ w
        return np.mean(np.logaddexp(0.0, eta) - t * eta) + 0.5 * np.sum(pen * w * w)

    f = objective(w)
    for _ in range(max_iter):
        eta = D @ w
        mu = 1.0 / (1.0 + np.exp(-eta))
        grad = D.T @ (mu - t) / n + pen * w
        W = mu * (1.0 - mu)
        H = (D * W[:, None]).T @ D / n + np.diag(pen) + 1e-12 * np.eye(k)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        s = 1.0
        while True:
            w_new = w - s * step
            f_new = objective(w_new)
            if f_new <= f + 1e-15 or s < 1e-10:
                break
            s *= 0.5
        if not np.all(np.isfinite(w_new)):
            raise LearnerDivergence("IRLS produced non-finite coefficients")
        converged = abs(f - f_new) <= tol * max(1.0, abs(f))
        w, f = w_new, f_new
        if converged and np.max(np.abs(grad)) < 1e-6:
            break
    return w


def ridge_ls(X: np.ndarray, Y: np.ndarray, l2: float = 1e-6) -> np.ndarray:
    D = _design(X)
    n, k = D.shape
    pen = np.full(k, l2 * n)
    pen[0] = 0.0
    G = D.T @ D + np.diag(pen) + 1e-12 * np.eye(k)
    return np.linalg.solve(G, D.T @ Y)


class ConstantModel:
    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=np.float64))

    def predict(self, X):
        return np.broadcast_to(self.value, (X.shape[0], self.value.size)).copy()


class LinearModel:
    def __init__(self, coef, link="identity"):
        self.coef = np.asarray(coef, dtype=np.float64)
        self.link = link

    def predict(self, X):
        eta = _design(X) @ self.coef
        if eta.ndim == 1:
            eta = eta[:, None]
        if self.link == "logit":
            return 1.0 / (1.0 + np.exp(-eta))
        return eta


class BoostedModel:
    def __init__(self, spec: LearnerSpec, X: np.ndarray, Y: np.ndarray):
        self.depth = spec.depth
        self.binner = Binner.fit(X, spec.max_bins)
        Xb = self.binner.transform(X)
        self.init = Y.mean(axis=0)
        self.trees = fit_trees(Xb, Y, self.init, self.binner.n_bins, spec.rounds,
                               spec.depth, spec.lr, spec.min_leaf)

    def predict(self, X):
        Xb = self.binner.transform(X)
        return predict_trees(Xb, self.init, *self.trees, self.depth)


class StackedModel:
    def __init__(self, models, weight):
        self.models = models
        self.weight = float(weight)

    def predict(self, X):
        a, b = (m.predict(X) for m in self.models)
        return self.weight * a + (1.0 - self.weight) * b


def _fit(spec: LearnerSpec, X: np.ndarray, Y: np.ndarray, binary: bool):
    if spec.kind == "constant" or X.shape[1] == 0 or Y.shape[0] < 2:
        return ConstantModel(Y.mean(axis=0))
    if spec.kind == "gbt":
        return BoostedModel(spec, X, Y)
    if spec.kind == "logistic":
        if binary:
            t = Y[:, 0]
            if np.all(t == t[0]):
                return ConstantModel(t[:1])
            return LinearModel(irls_logistic(X, t, spec.l2), link="logit")
        return LinearModel(ridge_ls(X, Y, spec.l2))
    if spec.kind == "stack":
        n = X.shape[0]
        rng = np.random.default_rng(spec.seed)
        perm = rng.permutation(n)
        fit_idx, hold = np.sort(perm[: n // 2]), np.sort(perm[n // 2:])
        first = [_fit(m, X[fit_idx], Y[fit_idx], binary) for m in spec.members]
        pa, pb = (m.predict(X[hold]) for m in first)
        diff = (pa - pb).ravel()
        denom = float(diff @ diff)
        w = 0.5 if denom == 0.0 else float((Y[hold] - pb).ravel() @ diff / denom)
        w = min(1.0, max(0.0, w))
        full = [_fit(m, X, Y, binary) for m in spec.members]
        return StackedModel(full, w)
    raise ConfigError(f"learner {spec.kind!r} cannot be fitted from data")


def fit_binary(spec: LearnerSpec, X: np.ndarray, t: np.ndarray):
    """Fit P(t = 1 | X). ``predict`` returns an (n, 1) array, unclamped."""
    return _fit(spec, np.asarray(X, dtype=np.float64),
                np.asarray(t, dtype=np.float64).reshape(-1, 1), binary=True)


def fit_regression(spec: LearnerSpec, X: np.ndarray, Y: np.ndarray):
    """Fit E[Y | X] for every column of ``Y`` (n, T); ``predict`` gives (n, T)."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    return _fit(spec, np.asarray(X, dtype=np.float64), Y, binary=False)

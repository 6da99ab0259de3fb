"""Nuisance functions eta = (rho, pi1, mu0, mu1, lam0, lam1) and their clipping.

    rho(x)      = P(A=1 | X=x)
    pi1(x)      = P(Z=1 | X=x)
    lam_z(x)    = P(A=1 | Z=z, X=x)
    mu_z(b, x)  = E[M(Y, b)(1-A) | Z=z, X=x]

How mu_z is prepared depends on the moment:

``affine``    Mean/CdfAt: one fit of base(Y)(1-A) per arm, then
              mu_z(b, x) = mu_z(0, x) + slope * b * (1 - lam_z(x))
              with the *clipped* lam_z, so the treated-fraction identity of
              the estimator holds exactly.
``per_grid``  one regression per grid point (all grid targets boosted in a
              single multi-target call).
``pooled``    quantile only: regress 1{Y <= t}(1-A) on a fixed t-grid and
              interpolate a monotone curve in t.
``oracle``    known functions supplied by a simulation DGP.
``none``      probabilities only (direct quantile-effect moment).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import Dataset
from .errors import BetaNotOnGrid, ConfigError, DegenerateArm
from .learners import LearnerSpec, fit_binary, fit_regression
from .moments import MomentSpec, affine_decomposition, regression_target


@dataclass(frozen=True)
class ClipConfig:
    eps_pi: float = 0.01
    eps_deltaA: float = 0.01
    clamp_prob: bool = True

    def __post_init__(self):
        if not 0.0 < self.eps_pi < 0.5:
            raise ConfigError(f"eps_pi must lie in (0, 0.5), got {self.eps_pi}")
        if not self.eps_deltaA > 0.0:
            raise ConfigError(f"eps_deltaA must be positive, got {self.eps_deltaA}")

    @classmethod
    def from_config(cls, cfg: dict | None) -> "ClipConfig":
        cfg = dict(cfg or {})
        extra = set(cfg) - {"eps_pi", "eps_deltaA", "clamp_prob"}
        if extra:
            raise ConfigError(f"unknown clip options {sorted(extra)}")
        return cls(**cfg)


@dataclass(eq=False)
class NuisanceAtPoint:
    """Clipped nuisances at one beta, for one or many covariate rows.

    ``mu0``/``mu1`` have a trailing moment dimension when d > 1.
    ``floored`` marks rows where |lam1 - lam0| was raised to ``eps_deltaA``.
    """

    rho: np.ndarray
    pi1: np.ndarray
    lam0: np.ndarray
    lam1: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    deltaA: np.ndarray
    delta: np.ndarray
    floored: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def pi_z(self, z):
        z = np.asarray(z)
        return z * self.pi1 + (1 - z) * (1.0 - self.pi1)

    def lam_z(self, z):
        z = np.asarray(z)
        return np.where(z == 1, self.lam1, self.lam0)

    def mu_z(self, z):
        z = np.asarray(z)
        if np.ndim(self.mu1) > np.ndim(z):
            z = z[..., None]
        return np.where(z == 1, self.mu1, self.mu0)

    @property
    def weak_instrument(self) -> bool:
        return bool(np.any(self.floored))


def clip_probabilities(rho, pi1, lam0, lam1, clip: ClipConfig):
    """Clamp probabilities and floor |lam1 - lam0| while keeping its sign.

    A floored pair is re-centred at its midpoint so that lam1 - lam0 equals
    +-eps_deltaA (sign of an exact zero taken as +).
    """
    rho, pi1, lam0, lam1 = (np.array(v, dtype=np.float64) for v in (rho, pi1, lam0, lam1))
    if clip.clamp_prob:
        rho = np.clip(rho, 0.0, 1.0)
        lam0 = np.clip(lam0, 0.0, 1.0)
        lam1 = np.clip(lam1, 0.0, 1.0)
    pi1 = np.clip(pi1, clip.eps_pi, 1.0 - clip.eps_pi)
    eps = clip.eps_deltaA
    dA = lam1 - lam0
    floored = np.abs(dA) < eps
    sign = np.where(dA < 0, -1.0, 1.0)
    mid = 0.5 * (lam1 + lam0)
    if clip.clamp_prob:
        mid = np.clip(mid, 0.5 * eps, 1.0 - 0.5 * eps)
    lam0 = np.where(floored, mid - sign * 0.5 * eps, lam0)
    lam1 = np.where(floored, lam0 + sign * eps, lam1)
    deltaA = np.where(floored, sign * eps, dA)
    return rho, pi1, lam0, lam1, deltaA, floored


def make_point(rho, pi1, lam0, lam1, mu0, mu1, clip: ClipConfig) -> NuisanceAtPoint:
    """Clip raw nuisance values and derive deltaA and delta."""
    rho, pi1, lam0, lam1, deltaA, floored = clip_probabilities(rho, pi1, lam0, lam1, clip)
    mu0 = np.asarray(mu0, dtype=np.float64)
    mu1 = np.asarray(mu1, dtype=np.float64)
    dA = deltaA[..., None] if mu1.ndim > deltaA.ndim else deltaA
    return NuisanceAtPoint(rho, pi1, lam0, lam1, mu0, mu1, deltaA, (mu1 - mu0) / dA, floored)


def _col(v):
    v = np.asarray(v, dtype=np.float64)
    return v[:, 0] if v.ndim == 2 and v.shape[1] == 1 else v


@dataclass(eq=False)
class NuisanceBundle:
    rho_model: object
    pi1_model: object
    lam_models: tuple
    moment: MomentSpec
    clip: ClipConfig
    strategy: str
    mu_models: tuple = ()
    grid: Optional[np.ndarray] = None
    slope: float = 0.0
    t_grid: Optional[np.ndarray] = None
    oracle: object = None

    # -- probabilities -----------------------------------------------------
    def raw_probabilities(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.oracle is not None:
            o = self.oracle
            return o.rho(X), o.pi1(X), o.lam(0, X), o.lam(1, X)
        return (_col(self.rho_model.predict(X)), _col(self.pi1_model.predict(X)),
                _col(self.lam_models[0].predict(X)), _col(self.lam_models[1].predict(X)))

    def clipped_probabilities(self, X):
        return clip_probabilities(*self.raw_probabilities(X), self.clip)

    # -- mu ------------------------------------------------------------------
    def grid_index(self, beta) -> int:
        if self.grid is None:
            raise BetaNotOnGrid("nuisances were not fitted on a grid")
        b = np.asarray(beta, dtype=np.float64).reshape(-1)
        g = self.grid.reshape(len(self.grid), -1)
        hit = np.flatnonzero(np.all(np.abs(g - b) <= 1e-12 * np.maximum(1.0, np.abs(b)), axis=1))
        if hit.size == 0:
            raise BetaNotOnGrid(f"beta={beta!r} is not a grid point", beta=beta)
        return int(hit[0])

    def mu_values(self, X, betas, lam0, lam1):
        """mu_0 and mu_1 at every beta in ``betas``: arrays (n, G) or (n, G, d)."""
        X = np.asarray(X, dtype=np.float64)
        betas = list(betas)
        d = self.moment.d
        n = X.shape[0]
        if self.strategy == "oracle":
            out = []
            for z in (0, 1):
                cols = [np.asarray(self.oracle.mu(z, b, X, self.moment), dtype=np.float64)
                        for b in betas]
                out.append(np.stack(cols, axis=1))
            return out[0], out[1]
        lams = (lam0, lam1)
        if self.strategy == "affine":
            out = []
            for z in (0, 1):
                base = _col(self.mu_models[z].predict(X))
                shift = self.slope * np.asarray(betas, dtype=np.float64)
                out.append(base[:, None] + (1.0 - lams[z])[:, None] * shift[None, :])
            return out[0], out[1]
        if self.strategy == "per_grid":
            idx = [self.grid_index(b) for b in betas]
            out = []
            for z in (0, 1):
                pred = self.mu_models[z].predict(X).reshape(n, len(self.grid), d)[:, idx]
                out.append(pred[..., 0] if d == 1 else pred)
            return out[0], out[1]
        if self.strategy == "pooled":
            q = self.moment.q
            out = []
            for z in (0, 1):
                curve = np.maximum.accumulate(self.mu_models[z].predict(X), axis=1)
                curve = np.clip(curve, 0.0, None)
                F = np.empty((n, len(betas)))
                for i in range(n):
                    F[i] = np.interp(betas, self.t_grid, curve[i], left=0.0)
                out.append((1.0 - q) * (1.0 - lams[z])[:, None] - F)
            return out[0], out[1]
        raise ConfigError(f"unknown mu strategy {self.strategy!r}")

    def at(self, X, beta) -> NuisanceAtPoint:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        rho, pi1, lam0, lam1, deltaA, floored = self.clipped_probabilities(X)
        mu0, mu1 = self.mu_values(X, [beta], lam0, lam1)
        dA = deltaA[:, None] if mu1.ndim == 3 else deltaA
        mu0, mu1 = mu0[:, 0], mu1[:, 0]
        return NuisanceAtPoint(rho, pi1, lam0, lam1, mu0, mu1, deltaA,
                               (mu1 - mu0) / dA, floored)


def eval_bundle(b: NuisanceBundle, x, beta) -> NuisanceAtPoint:
    """Clipped nuisances at covariate vector(s) ``x`` and parameter ``beta``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim <= 1
    pt = b.at(x.reshape(1, -1) if single else x, beta)
    if single:
        pt = NuisanceAtPoint(*(np.asarray(getattr(pt, f))[0] for f in
                               ("rho", "pi1", "lam0", "lam1", "mu0", "mu1", "deltaA", "delta",
                                "floored")))
    return pt


def check_arms(train: Dataset) -> None:
    for name, col in (("instrument", train.z), ("treatment", train.a)):
        present = set(np.unique(col).tolist())
        if present != {0, 1}:
            raise DegenerateArm(f"training data has {name} values {sorted(present)} only")


def fit_nuisances(train: Dataset, spec: LearnerSpec, moment: MomentSpec, grid=None,
                  clip: ClipConfig | None = None, mu_strategy: str = "auto",
                  pooled_points: int = 41) -> NuisanceBundle:
    """Fit the six nuisance functions on ``train``.

    ``grid`` lists the beta values the bundle must serve when mu_z cannot be
    shifted analytically (quantile and custom moments).
    """
    clip = clip or ClipConfig()
    grid_arr = None if grid is None else np.asarray(list(grid), dtype=np.float64)
    if spec.kind == "oracle":
        return NuisanceBundle(None, None, (None, None), moment, clip, "oracle",
                              grid=grid_arr, oracle=spec.oracle)
    check_arms(train)
    X, z, a, y = train.X, train.z, train.a, train.y
    pi1_model = fit_binary(spec, X, z)
    rho_model = fit_binary(spec, X, a)
    arms = [np.flatnonzero(z == v) for v in (0, 1)]
    lam_models = tuple(fit_binary(spec, X[r], a[r]) for r in arms)

    if mu_strategy == "none":
        return NuisanceBundle(rho_model, pi1_model, lam_models, moment, clip, "none",
                              grid=grid_arr)
    if mu_strategy == "auto":
        decomp = affine_decomposition(moment) if moment.kind != "custom" else None
        mu_strategy = "affine" if decomp is not None and decomp.exists else "per_grid"
    if mu_strategy == "affine":
        decomp = affine_decomposition(moment)
        if not decomp.exists:
            raise ConfigError(f"moment {moment.kind!r} is not affine in beta")
        target = decomp.base(y) * (1.0 - a)
        mu_models = tuple(fit_regression(spec, X[r], target[r]) for r in arms)
        return NuisanceBundle(rho_model, pi1_model, lam_models, moment, clip, "affine",
                              mu_models, grid_arr, slope=decomp.slope)
    if mu_strategy == "per_grid":
        if grid_arr is None or len(grid_arr) == 0:
            raise ConfigError(f"moment {moment.kind!r} needs a beta grid")
        targets = np.column_stack([
            np.asarray(regression_target(moment, y, a, b), dtype=np.float64).reshape(len(y), -1)
            for b in grid_arr])
        mu_models = tuple(fit_regression(spec, X[r], targets[r]) for r in arms)
        return NuisanceBundle(rho_model, pi1_model, lam_models, moment, clip, "per_grid",
                              mu_models, grid_arr)
    if mu_strategy == "pooled":
        if moment.kind != "quantile":
            raise ConfigError("pooled distributional strategy applies to quantile moments")
        t_grid = np.unique(np.quantile(y, np.linspace(0.0, 1.0, pooled_points)))
        targets = (y[:, None] <= t_grid[None, :]) * (1.0 - a)[:, None]
        mu_models = tuple(fit_regression(spec, X[r], targets[r]) for r in arms)
        return NuisanceBundle(rho_model, pi1_model, lam_models, moment, clip, "pooled",
                              mu_models, grid_arr, t_grid=t_grid)
    raise ConfigError(f"unknown mu strategy {mu_strategy!r}")


def weak_iv_diagnostic(b: NuisanceBundle, d: Dataset) -> dict:
    rho, pi1, lam0, lam1 = b.raw_probabilities(d.X)
    lam0 = np.asarray(lam0, dtype=np.float64)
    lam1 = np.asarray(lam1, dtype=np.float64)
    if b.clip.clamp_prob:
        lam0, lam1 = np.clip(lam0, 0, 1), np.clip(lam1, 0, 1)
    absd = np.abs(lam1 - lam0)
    return {
        "floored_fraction": float(np.mean(absd < b.clip.eps_deltaA)),
        "min_abs_deltaA": float(absd.min()),
        "median_abs_deltaA": float(np.median(absd)),
        "eps_deltaA": b.clip.eps_deltaA,
    }

"""Confidence intervals for h(beta, P) and test-inversion confidence sets for beta*.

Threshold conventions for the scalar test |theta_beta| <= z * sigma_beta / sqrt(n):

``normal-paper``  z = Phi^{-1}(1 - alpha), the default
``chisq``         z = Phi^{-1}(1 - alpha/2), i.e. z^2 = Q_{1-alpha}(chi^2_1)

The first gives two-sided coverage near 1 - 2*alpha; the second targets 1 - alpha.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2, norm

from .dataset import Dataset, FoldPlan, empirical_treated_fraction
from .eif import (
    CrossfitResult,
    DiscreteLaw,
    aggregate,
    h_of_beta_exact,
    pairwise_mean,
    rescore,
    run_folds,
    score_covariance,
)
from .errors import (
    ConfigError,
    DegenerateVariance,
    EmptyConfidenceSet,
    NoTreatedUnits,
    SingularSigma,
)
from .learners import LearnerSpec
from .moments import MomentSpec
from .nuisance import ClipConfig, fit_nuisances

CONVENTIONS = ("normal-paper", "chisq")


def z_threshold(alpha: float, convention: str = "normal-paper") -> float:
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if convention == "normal-paper":
        return float(norm.ppf(1.0 - alpha))
    if convention == "chisq":
        return float(norm.ppf(1.0 - alpha / 2.0))
    raise ConfigError(f"unknown convention {convention!r}; use one of {CONVENTIONS}")


@dataclass(frozen=True)
class GridSpec:
    lo: float = 0.0
    hi: float = 1.0
    step: float = 0.1
    points: Optional[tuple] = None

    def __post_init__(self):
        if self.points is not None:
            pts = np.asarray(self.points, dtype=np.float64)
            if pts.ndim != 1 or len(pts) < 3 or np.any(np.diff(pts) <= 0):
                raise ConfigError("explicit grid needs >= 3 strictly increasing points")
            return
        if not self.lo < self.hi:
            raise ConfigError(f"grid needs lo < hi, got [{self.lo}, {self.hi}]")
        if not self.step > 0:
            raise ConfigError(f"grid step must be positive, got {self.step}")
        if len(self.values()) < 3:
            raise ConfigError("grid needs at least 3 points")

    @classmethod
    def from_config(cls, cfg) -> "GridSpec":
        if isinstance(cfg, GridSpec):
            return cfg
        if isinstance(cfg, (list, tuple)):
            return cls(points=tuple(float(v) for v in cfg))
        cfg = dict(cfg)
        if "points" in cfg:
            return cls(points=tuple(float(v) for v in cfg["points"]))
        return cls(float(cfg["lo"]), float(cfg["hi"]), float(cfg["step"]))

    def values(self) -> np.ndarray:
        if self.points is not None:
            return np.asarray(self.points, dtype=np.float64)
        m = int(np.floor((self.hi - self.lo) / self.step + 1e-9)) + 1
        # rounding keeps decimal steps exact enough to hit grid points by value
        return np.round(self.lo + self.step * np.arange(m), 12)

    def to_config(self) -> dict:
        if self.points is not None:
            return {"points": list(self.points)}
        return {"lo": self.lo, "hi": self.hi, "step": self.step}


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ConfigError(f"interval with lo > hi: [{self.lo}, {self.hi}]")

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi

    @property
    def width(self) -> float:
        return self.hi - self.lo


def ci_h(r: CrossfitResult, w=None, alpha: float = 0.05,
         convention: str = "normal-paper") -> Interval:
    """w'theta_hat +- z * sqrt(w' Sigma_hat w / n)."""
    d = len(r.theta_hat)
    w = np.ones(d) if w is None else np.asarray(w, dtype=np.float64).reshape(d)
    var = float(w @ r.Sigma_hat @ w)
    if not var > 0.0:
        raise DegenerateVariance(f"w' Sigma w = {var!r} at beta={r.beta!r}", beta=r.beta)
    c = float(w @ r.theta_hat)
    half = z_threshold(alpha, convention) * np.sqrt(var / r.n)
    return Interval(c - half, c + half)


# ---------------------------------------------------------------------------
# confidence sets


def _runs(mask: np.ndarray) -> list:
    """Maximal runs of True as (start, stop) index pairs, stop inclusive."""
    out, start = [], None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        if not m and start is not None:
            out.append((start, i - 1))
            start = None
    if start is not None:
        out.append((start, len(mask) - 1))
    return out


@dataclass(frozen=True, eq=False)
class ConfidenceSet:
    """Accepted grid points for beta*.

    ``kind`` is "interval" when the accepted points form one contiguous run of
    the grid, "gridset" when they do not, and "empty" when none is accepted.
    """

    kind: str
    alpha: float
    grid: np.ndarray
    accepted_mask: np.ndarray
    theta: np.ndarray
    sigma: np.ndarray
    stat: np.ndarray
    threshold: np.ndarray
    n: int
    convention: str = "normal-paper"
    functional: str = ""
    label: str = "efficient influence function"
    warnings: tuple = ()
    extra: dict = field(default_factory=dict)

    @property
    def accepted(self) -> np.ndarray:
        return self.grid[self.accepted_mask]

    @property
    def contiguous(self) -> bool:
        return len(_runs(self.accepted_mask)) <= 1

    @property
    def interval(self) -> Optional[Interval]:
        """[min accepted, max accepted], or None when nothing is accepted."""
        acc = self.accepted
        return Interval(float(acc.min()), float(acc.max())) if acc.size else None

    def pieces(self) -> list:
        return [Interval(float(self.grid[a]), float(self.grid[b]))
                for a, b in _runs(self.accepted_mask)]

    def contains(self, beta: float) -> bool:
        return any(p.contains(beta) for p in self.pieces())

    @property
    def width(self) -> float:
        return float(sum(p.width for p in self.pieces()))

    def require_nonempty(self) -> "ConfidenceSet":
        if self.kind == "empty":
            raise EmptyConfidenceSet("no grid point accepted", alpha=self.alpha)
        return self

    def per_beta(self) -> list:
        rows = []
        for g in range(len(self.grid)):
            rows.append({"beta": float(self.grid[g]),
                         "theta": _plain(self.theta[g]), "sigma": _plain(self.sigma[g]),
                         "stat": float(self.stat[g]), "threshold": float(self.threshold[g]),
                         "accepted": bool(self.accepted_mask[g])})
        return rows

    def to_dict(self) -> dict:
        iv = self.interval
        out = {
            "functional": self.functional,
            "alpha": self.alpha,
            "convention": self.convention,
            "method": self.label,
            "kind": self.kind,
            "contiguous": self.contiguous,
            "n": self.n,
            "grid": [float(g) for g in self.grid],
            "accepted": [float(g) for g in self.accepted],
            "interval": None if iv is None else [iv.lo, iv.hi],
            "pieces": [[p.lo, p.hi] for p in self.pieces()],
            "point_estimate": point_estimate(self),
            "per_beta": self.per_beta(),
            "warnings": list(self.warnings),
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def per_beta_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["beta", "theta", "sigma", "stat", "threshold", "accepted"])
        for row in self.per_beta():
            th, sg = row["theta"], row["sigma"]
            th = th if isinstance(th, float) else ";".join(repr(v) for v in np.ravel(th))
            sg = sg if isinstance(sg, float) else ";".join(repr(v) for v in np.ravel(sg))
            w.writerow([repr(row["beta"]), th if isinstance(th, str) else repr(th),
                        sg if isinstance(sg, str) else repr(sg), repr(row["stat"]),
                        repr(row["threshold"]), int(row["accepted"])])
        return buf.getvalue()


def _plain(v):
    v = np.asarray(v, dtype=np.float64)
    return float(v) if v.size == 1 else v.tolist()


def accept_set(grid, theta, thresholds) -> np.ndarray:
    """Mask of grid points with |theta| <= threshold."""
    return np.abs(np.asarray(theta, dtype=np.float64)) <= np.asarray(thresholds, dtype=np.float64)


def _kind(mask) -> str:
    if not mask.any():
        return "empty"
    return "interval" if len(_runs(mask)) == 1 else "gridset"


@dataclass(frozen=True, eq=False)
class GridDiagnostics:
    """Cross-fitted theta and Sigma at every grid point; reusable across alpha."""

    grid: np.ndarray
    theta: np.ndarray      # (G, d)
    Sigma: np.ndarray      # (G, d, d)
    n: int
    treated_fraction: float
    n_floored: int = 0
    functional: str = ""
    label: str = "efficient influence function"

    @classmethod
    def from_results(cls, results: Sequence[CrossfitResult], functional: str = "") -> "GridDiagnostics":
        grid = np.asarray([np.ravel(r.beta)[0] for r in results], dtype=np.float64)
        return cls(grid, np.stack([r.theta_hat for r in results]),
                   np.stack([r.Sigma_hat for r in results]), results[0].n,
                   results[0].treated_fraction, results[0].n_floored, functional)

    def _warnings(self) -> tuple:
        return (f"weak instrument: |lam1 - lam0| floored on {self.n_floored} rows",) \
            if self.n_floored else ()

    def confidence_set(self, alpha: float, convention: str = "normal-paper") -> ConfidenceSet:
        if self.theta.shape[1] != 1:
            return self.confidence_set_multi(alpha)
        z = z_threshold(alpha, convention)
        theta = self.theta[:, 0]
        sigma = np.sqrt(np.maximum(self.Sigma[:, 0, 0], 0.0))
        thr = z * sigma / np.sqrt(self.n)
        mask = accept_set(self.grid, theta, thr)
        with np.errstate(divide="ignore", invalid="ignore"):
            stat = np.where(sigma > 0, np.abs(theta) * np.sqrt(self.n) / sigma,
                            np.where(theta == 0, 0.0, np.inf))
        return ConfidenceSet(_kind(mask), alpha, self.grid, mask, theta, sigma, stat, thr,
                             self.n, convention, self.functional, self.label, self._warnings())

    def confidence_set_multi(self, alpha: float) -> ConfidenceSet:
        d = self.theta.shape[1]
        q = float(chi2.ppf(1.0 - alpha, d))
        stat = np.empty(len(self.grid))
        for g in range(len(self.grid)):
            S = self.Sigma[g]
            if np.linalg.matrix_rank(S) < d:
                raise SingularSigma(f"Sigma is singular at beta={self.grid[g]!r}",
                                    beta=float(self.grid[g]))
            t = self.theta[g]
            stat[g] = self.n * float(t @ np.linalg.solve(S, t))
        mask = stat <= q
        sigma = np.sqrt(np.maximum(np.diagonal(self.Sigma, axis1=1, axis2=2), 0.0))
        return ConfidenceSet(_kind(mask), alpha, self.grid, mask, self.theta, sigma, stat,
                             np.full(len(self.grid), q), self.n, "chisq", self.functional,
                             self.label, self._warnings())


def grid_diagnostics(d: Dataset, plan: FoldPlan, learner: LearnerSpec, moment: MomentSpec,
                     grid, clip: ClipConfig | None = None, workers: int = 1,
                     mu_strategy: str = "auto") -> GridDiagnostics:
    """Fit nuisances once per fold and evaluate the cross-fitted score on the whole grid."""
    betas = list(GridSpec.from_config(grid).values())
    folds = run_folds(d, plan, learner, moment, betas, clip, mu_strategy, workers)
    return GridDiagnostics.from_results(aggregate(folds, betas, d.n), _name(moment))


def _name(moment: MomentSpec) -> str:
    if moment.kind == "quantile":
        return f"quantile(q={moment.q})"
    if moment.kind == "cdf":
        return f"cdf(y0={moment.y0})"
    return moment.kind


def invert_functional(d: Dataset, plan: FoldPlan, learner: LearnerSpec, moment: MomentSpec,
                      grid, alpha: float, clip: ClipConfig | None = None,
                      convention: str = "normal-paper", workers: int = 1,
                      mu_strategy: str = "auto", refine: int = 0) -> ConfidenceSet:
    """Grid test inversion for beta*.

    ``refine`` > 0 bisects each endpoint bracket that many times, reusing the
    fitted nuisances (affine or oracle mu only). Refined points are reported
    under ``extra["refined_interval"]``; the grid-based set is unchanged.
    """
    grid = GridSpec.from_config(grid)
    if moment.d > 1:
        diag = grid_diagnostics(d, plan, learner, moment, grid, clip, workers, mu_strategy)
        return diag.confidence_set_multi(alpha)
    betas = list(grid.values())
    folds = run_folds(d, plan, learner, moment, betas, clip, mu_strategy, workers,
                      keep_bundles=refine > 0)
    diag = GridDiagnostics.from_results(aggregate(folds, betas, d.n), _name(moment))
    cs = diag.confidence_set(alpha, convention)
    if refine > 0 and cs.kind != "empty":
        cs.extra["refined_interval"] = _refine(d, folds, moment, cs, refine, convention)
    return cs


def _refine(d: Dataset, folds: list, moment: MomentSpec, cs: ConfidenceSet, steps: int,
            convention: str) -> list:
    z = z_threshold(cs.alpha, convention)

    def accepts(b):
        r = aggregate(rescore(d, folds, moment, [b]), [b], d.n)[0]
        return abs(r.theta) <= z * r.sigma / np.sqrt(d.n)

    idx = np.flatnonzero(cs.accepted_mask)
    lo_i, hi_i = idx[0], idx[-1]
    ends = []
    for inside, outside in ((lo_i, lo_i - 1), (hi_i, hi_i + 1)):
        if outside < 0 or outside >= len(cs.grid):
            ends.append(float(cs.grid[inside]))
            continue
        a, b = float(cs.grid[inside]), float(cs.grid[outside])
        for _ in range(steps):
            m = 0.5 * (a + b)
            if accepts(m):
                a = m
            else:
                b = m
        ends.append(a)
    return ends


def invert_functional_multi(d: Dataset, plan: FoldPlan, learner: LearnerSpec,
                            moment: MomentSpec, grid, alpha: float,
                            clip: ClipConfig | None = None, workers: int = 1,
                            mu_strategy: str = "auto") -> ConfidenceSet:
    diag = grid_diagnostics(d, plan, learner, moment, grid, clip, workers, mu_strategy)
    return diag.confidence_set_multi(alpha)


def point_estimate(cs: ConfidenceSet) -> float:
    """Grid point with the smallest test statistic; ties go toward the grid midpoint."""
    stat = np.asarray(cs.stat, dtype=np.float64)
    if stat.size == 0:
        raise ConfigError("no diagnostics to take a point estimate from")
    best = np.flatnonzero(stat == stat.min())
    mid = 0.5 * (cs.grid[0] + cs.grid[-1])
    order = sorted(best, key=lambda i: (abs(cs.grid[i] - mid), cs.grid[i]))
    return float(cs.grid[order[0]])


# ---------------------------------------------------------------------------
# ATT


@dataclass(frozen=True)
class AttResult:
    att: float
    se: float
    interval: Interval
    alpha: float
    h0: float
    treated_mean: float
    treated_fraction: float
    beta0: float
    n: int
    convention: str = "normal-paper"

    def to_dict(self) -> dict:
        return {"functional": "att", "att": self.att, "se": self.se,
                "interval": [self.interval.lo, self.interval.hi], "alpha": self.alpha,
                "h0": self.h0, "treated_mean": self.treated_mean,
                "treated_fraction": self.treated_fraction,
                "counterfactual_mean": self.beta0, "n": self.n, "convention": self.convention}


def att_estimate(d: Dataset, plan: FoldPlan, learner: LearnerSpec,
                 clip: ClipConfig | None = None, alpha: float = 0.05,
                 convention: str = "normal-paper", workers: int = 1) -> AttResult:
    """ATT = E_n[Y | A=1] + h_hat(0) / P_hat(A=1).

    P_hat is the fold average of treated fractions, the same slope the mean
    moment's cross-fitted theta(beta) has, so the point estimate coincides with
    the root of theta(beta). The standard error comes from the influence
    function (Y A + psi(0) - ATT * A) / P_hat, averaged over folds like Sigma_hat.
    """
    empirical_treated_fraction(d)
    moment = MomentSpec.mean()
    folds = run_folds(d, plan, learner, moment, [0.0], clip, "auto", workers)
    r = aggregate(folds, [0.0], d.n)[0]
    p = r.treated_fraction
    if p == 0.0:
        raise NoTreatedUnits("no treated units in any fold")
    treated_mean = float(np.sum(d.y * d.a) / np.sum(d.a))
    beta0 = -r.theta / p
    att = treated_mean - beta0
    covs = []
    for f in folds:
        yk, ak = d.y[f.test_idx], d.a[f.test_idx].astype(np.float64)
        infl = (yk * ak + f.psi[:, 0, 0] - att * ak) / p
        covs.append(score_covariance(infl[:, None], pairwise_mean(infl[:, None])))
    var = float(sum(c[0, 0] for c in covs) / len(covs))
    se = float(np.sqrt(max(var, 0.0) / d.n))
    half = z_threshold(alpha, convention) * se
    return AttResult(att, se, Interval(att - half, att + half), alpha, r.theta, treated_mean,
                     p, beta0, d.n, convention)


def att_exact(law: DiscreteLaw) -> dict:
    """Identified ATT (via h(0)) next to the counterfactual-enumeration ATT."""
    p = law.treated_fraction()
    w = law.prob * law.a
    treated_mean = float(w @ law.y / w.sum())
    identified = treated_mean + h_of_beta_exact(law, MomentSpec.mean(), 0.0) / p
    counterfactual = float(w @ (law.y1 - law.y0) / w.sum())
    return {"identified": identified, "counterfactual": counterfactual}


# ---------------------------------------------------------------------------
# direct quantile effect on the treated


def qtt_summands(z, a, y, rho, pi1, lam0, lam1, deltaA, gamma: float, beta: float, q: float):
    """(1{Y <= gamma + beta(1-A)} - q) * ((2Z-1)/pi_Z * rho/deltaA)^(1-A)."""
    z = np.asarray(z)
    a = np.asarray(a, dtype=np.float64)
    pz = np.where(z == 1, pi1, 1.0 - pi1)
    w = (2.0 * z - 1.0) / pz * rho / deltaA
    ind = (np.asarray(y, dtype=np.float64) <= gamma + beta * (1.0 - a)).astype(np.float64) - q
    return np.where(a == 1, ind, ind * w)


def treated_quantile(y, a, q: float) -> float:
    yt = np.asarray(y, dtype=np.float64)[np.asarray(a) == 1]
    if yt.size == 0:
        raise NoTreatedUnits("no treated units to take a quantile of")
    return float(np.quantile(yt, q, method="inverted_cdf"))


def qtt_moment_exact(law: DiscreteLaw, q: float, beta: float, gamma: Optional[float] = None) -> float:
    """Enumerated mean of the direct moment at true nuisances (gamma defaults to the truth)."""
    t = law.true_nuisances(MomentSpec.mean(), 0.0)
    if gamma is None:
        gamma = qtt_truth(law, q)["gamma"]
    nu = t.point(law.x_index)
    s = qtt_summands(law.z, law.a, law.y, nu.rho, nu.pi1, nu.lam0, nu.lam1, nu.deltaA,
                     gamma, beta, q)
    return float(law.expect(s))


def _law_quantile(values, weights, q: float) -> float:
    order = np.argsort(values, kind="stable")
    v, w = np.asarray(values)[order], np.asarray(weights)[order]
    cdf = np.cumsum(w) / w.sum()
    return float(v[np.searchsorted(cdf, q - 1e-12)])


def qtt_truth(law: DiscreteLaw, q: float) -> dict:
    """Treated q-quantiles of Y1 and Y0 by enumeration; beta* is their difference."""
    w = law.prob * law.a
    g1 = _law_quantile(law.y1, w, q)
    g0 = _law_quantile(law.y0, w, q)
    return {"gamma": g1, "q0": g0, "beta": g0 - g1}


def qtt_diagnostics(d: Dataset, plan: FoldPlan, learner: LearnerSpec,
                    clip: ClipConfig | None = None, q: float = 0.5, grid=None) -> GridDiagnostics:
    """Cross-fitted means and fold variances of the direct quantile-effect moment.

    gamma is the treated q-quantile of Y on each training complement. Only the
    probability nuisances are fitted.
    """
    if not 0.0 < q < 1.0:
        raise ConfigError(f"q must lie in (0, 1), got {q}")
    empirical_treated_fraction(d)
    clip = clip or ClipConfig()
    betas = GridSpec.from_config(grid).values()
    thetas, covs = [], []
    floored = 0
    for k in range(plan.K):
        train_idx, test_idx = plan.train_test(k)
        train, test = d.subset(train_idx), d.subset(test_idx)
        gamma = treated_quantile(train.y, train.a, q)
        if np.all(d.a == 1):
            # every weight has exponent 0, so the probability nuisances are unused
            one = np.ones(len(test))
            rho, pi1, lam0, lam1, deltaA, fl = one, 0.5 * one, 0 * one, one, one, one < 0
        else:
            b = fit_nuisances(train, learner, MomentSpec.mean(), None, clip, mu_strategy="none")
            rho, pi1, lam0, lam1, deltaA, fl = b.clipped_probabilities(test.X)
        floored += int(fl.sum())
        s = np.stack([qtt_summands(test.z, test.a, test.y, rho, pi1, lam0, lam1, deltaA,
                                   gamma, bb, q) for bb in betas], axis=1)[..., None]
        th = pairwise_mean(s)
        thetas.append(th)
        covs.append(score_covariance(s, th))
    K = plan.K
    return GridDiagnostics(betas, sum(thetas) / K, sum(covs) / K, d.n, float(np.mean(d.a)),
                           floored, f"qtt(q={q})", "first-order plug-in")


def qtt_direct_moment(d: Dataset, plan: FoldPlan, learner: LearnerSpec,
                      clip: ClipConfig | None = None, q: float = 0.5, grid=None,
                      alpha: float = 0.05, convention: str = "normal-paper") -> ConfidenceSet:
    """Test inversion of the direct quantile-effect moment (first-order plug-in).

    The test uses the fold variance of the summands and ignores the variance
    from estimating the nuisances and gamma.
    """
    cs = qtt_diagnostics(d, plan, learner, clip, q, grid).confidence_set(alpha, convention)
    if np.all(d.a == 1):
        cs = ConfidenceSet(**{**cs.__dict__, "warnings": cs.warnings + (
            "treated-only data: the moment reduces to the treated quantile",)})
    return cs

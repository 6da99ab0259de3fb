"""Identified functional h(beta, P), its efficient influence function, and the
cross-fitted one-step estimator.

For a fixed beta

    h(beta, P) = E[ rho(X) * (mu_1 - mu_0)(beta, X) / (lam_1 - lam_0)(X) ]

and E[M(Y0, beta) | A=1] = -h(beta, P) / P(A=1). The uncentred score is

    psi = delta * A + rho / deltaA * (2Z-1) / pi_Z
          * (M(Y, beta)(1-A) - mu_Z - (A - lam_Z) * delta)

with delta = (mu_1 - mu_0) / deltaA; the influence function is psi - h.

Everything taking a :class:`DiscreteLaw` is an exact enumeration over atoms.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .dataset import Dataset, FoldPlan
from .errors import (
    ConfigError,
    EmptyFold,
    WeakInstrumentWarning,
    ZeroDeltaA,
)
from .learners import LearnerSpec
from .moments import MomentSpec, evaluate_m, regression_target
from .nuisance import ClipConfig, NuisanceAtPoint, NuisanceBundle, fit_nuisances


# ---------------------------------------------------------------------------
# exact laws


@dataclass(frozen=True)
class XNuisances:
    """Nuisance sextuple tabulated on the x-atoms of a discrete law, at one beta."""

    rho: np.ndarray
    pi1: np.ndarray
    lam0: np.ndarray
    lam1: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray

    @property
    def deltaA(self):
        return self.lam1 - self.lam0

    @property
    def delta(self):
        return (self.mu1 - self.mu0) / self.deltaA

    def point(self, x_index) -> NuisanceAtPoint:
        """Unclipped nuisances at each row whose x-atom is ``x_index``."""
        g = lambda v: np.asarray(v)[x_index]
        rho, pi1, lam0, lam1, mu0, mu1 = map(g, (self.rho, self.pi1, self.lam0,
                                                  self.lam1, self.mu0, self.mu1))
        dA = lam1 - lam0
        return NuisanceAtPoint(rho, pi1, lam0, lam1, mu0, mu1, dA, (mu1 - mu0) / dA,
                               np.zeros(len(rho), dtype=bool))

    def replace(self, **kw) -> "XNuisances":
        return replace(self, **{k: np.asarray(v, dtype=np.float64) for k, v in kw.items()})


@dataclass(frozen=True, eq=False)
class DiscreteLaw:
    """Finite joint law of (X, U, Z, A, Y0, Y1) given as an atom table.

    ``x_index`` points each atom at a row of ``x_atoms``. The observed outcome
    follows consistency: Y = A * Y1 + (1 - A) * Y0.
    """

    x_atoms: np.ndarray
    x_index: np.ndarray
    u: np.ndarray
    z: np.ndarray
    a: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    prob: np.ndarray
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.prob, dtype=np.float64)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ConfigError(f"atom probabilities must be >= 0 and sum to 1 (sum={p.sum()!r})")
        object.__setattr__(self, "prob", p)
        xa = np.asarray(self.x_atoms, dtype=np.float64)
        if xa.ndim == 1:
            xa = xa.reshape(-1, 1)
        object.__setattr__(self, "x_atoms", xa)
        for name in ("x_index", "z", "a"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))

    @property
    def y(self) -> np.ndarray:
        return np.where(self.a == 1, self.y1, self.y0)

    @property
    def X(self) -> np.ndarray:
        return self.x_atoms[self.x_index]

    @property
    def n_x(self) -> int:
        return len(self.x_atoms)

    def expect(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        return np.tensordot(self.prob, v, axes=(0, 0))

    def _by_x(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        out = np.zeros((self.n_x,) + v.shape[1:])
        np.add.at(out, self.x_index, self.prob.reshape((-1,) + (1,) * (v.ndim - 1)) * v)
        return out

    def p_x(self) -> np.ndarray:
        return self._by_x(np.ones(len(self.prob)))

    def treated_fraction(self) -> float:
        return float(self.expect(self.a))

    def true_nuisances(self, moment: MomentSpec, beta) -> XNuisances:
        px = self.p_x()
        pz1 = self._by_x(self.z)
        pz0 = px - pz1
        if np.any(pz1 <= 0) or np.any(pz0 <= 0):
            raise ConfigError("every x-atom needs both instrument arms with positive probability")
        mt = np.asarray(regression_target(moment, self.y, self.a, beta), dtype=np.float64)
        zc = self.z.reshape((-1,) + (1,) * (mt.ndim - 1))
        mu1 = self._by_x(mt * zc)
        mu0 = self._by_x(mt * (1 - zc))
        shape = (-1,) + (1,) * (mt.ndim - 1)
        return XNuisances(
            rho=self._by_x(self.a) / px,
            pi1=pz1 / px,
            lam0=self._by_x(self.a * (1 - self.z)) / pz0,
            lam1=self._by_x(self.a * self.z) / pz1,
            mu0=mu0 / pz0.reshape(shape),
            mu1=mu1 / pz1.reshape(shape),
        )

    def treated_moment(self, moment: MomentSpec, beta):
        """E[M(Y0, beta) | A=1] by counterfactual enumeration."""
        m = np.asarray(evaluate_m(moment, self.y0, beta), dtype=np.float64)
        w = self.prob * self.a
        return np.tensordot(w, m, axes=(0, 0)) / w.sum()

    def oracle(self) -> "LawOracle":
        return LawOracle(self)


class LawOracle:
    """Known nuisance functions of a :class:`DiscreteLaw`, evaluated by x lookup."""

    def __init__(self, law: DiscreteLaw):
        self.law = law
        self._base = law.true_nuisances(MomentSpec.mean(), 0.0)
        self._mu_cache = {}

    def index(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        atoms = self.law.x_atoms
        if atoms.shape[1] == 0 or len(atoms) == 1:
            return np.zeros(X.shape[0], dtype=np.int64)
        eq = np.all(X[:, None, :] == atoms[None, :, :], axis=2)
        if not np.all(eq.any(axis=1)):
            raise ConfigError("covariate value outside the law's x-atoms")
        return np.argmax(eq, axis=1)

    def rho(self, X):
        return self._base.rho[self.index(X)]

    def pi1(self, X):
        return self._base.pi1[self.index(X)]

    def lam(self, z, X):
        return (self._base.lam1 if z == 1 else self._base.lam0)[self.index(X)]

    def mu(self, z, beta, X, moment):
        key = (moment, tuple(np.ravel(beta).tolist()), z)
        if key not in self._mu_cache:
            t = self.law.true_nuisances(moment, beta)
            self._mu_cache[key] = t.mu1 if z == 1 else t.mu0
        return self._mu_cache[key][self.index(X)]


def h_of_beta_exact(law: DiscreteLaw, moment: MomentSpec, beta):
    t = law.true_nuisances(moment, beta)
    if np.any(np.abs(t.deltaA) < 1e-14):
        k = int(np.flatnonzero(np.abs(t.deltaA) < 1e-14)[0])
        raise ZeroDeltaA("lam1 == lam0 at an x-atom", x_atom=k)
    dA = t.deltaA.reshape((-1,) + (1,) * (t.mu1.ndim - 1))
    rho = t.rho.reshape(dA.shape)
    val = np.tensordot(law.p_x(), rho * (t.mu1 - t.mu0) / dA, axes=(0, 0))
    return float(val) if np.ndim(val) == 0 else val


# ---------------------------------------------------------------------------
# scores


def eif_scores(z, a, y, nu: NuisanceAtPoint, beta, moment: MomentSpec):
    """Uncentred score psi for each row (shape (n,) or (n, d))."""
    z = np.asarray(z)
    a = np.asarray(a, dtype=np.float64)
    mt = np.asarray(regression_target(moment, y, a, beta), dtype=np.float64)
    return _psi(z, a, mt, nu.rho, nu.pi1, nu.lam0, nu.lam1, nu.deltaA, nu.mu0, nu.mu1)


def _psi(z, a, mt, rho, pi1, lam0, lam1, deltaA, mu0, mu1):
    """Vectorised score; ``mt``, ``mu0``, ``mu1`` may carry extra trailing axes."""
    z = np.asarray(z)
    extra = np.ndim(mt) - np.ndim(z)

    def e(v):
        v = np.asarray(v, dtype=np.float64)
        return v.reshape(v.shape + (1,) * extra)

    pz = np.where(z == 1, pi1, 1.0 - pi1)
    lamz = np.where(z == 1, lam1, lam0)
    w = e(rho / deltaA * (2.0 * z - 1.0) / pz)
    zz = e(z)
    dA = e(deltaA)
    delta = (mu1 - mu0) / dA
    muz = np.where(zz == 1, mu1, mu0)
    ae = e(a)
    return delta * ae + w * (mt - muz - (ae - e(lamz)) * delta)


def eif_evaluate(o, nu: NuisanceAtPoint, beta, h_center, moment: MomentSpec):
    """Influence function value(s) psi - h_center for an Observation or Dataset."""
    psi = eif_scores(o.z, o.a, o.y, nu, beta, moment)
    out = psi - np.asarray(h_center, dtype=np.float64)
    return float(out) if np.ndim(out) == 0 else out


def pairwise_mean(values) -> np.ndarray:
    """Mean over axis 0 via numpy's pairwise summation on a contiguous last axis."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] == 0:
        raise EmptyFold("cannot average over an empty fold")
    return np.ascontiguousarray(np.moveaxis(v, 0, -1)).mean(axis=-1)


def score_covariance(psi, center) -> np.ndarray:
    """E_fold[(psi - c)(psi - c)^T] as a (..., d, d) array; psi is (n, ..., d)."""
    c = np.asarray(psi, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    return pairwise_mean(c[..., :, None] * c[..., None, :])


def estimate_h_fold(fold: Dataset, b: NuisanceBundle, beta, moment: MomentSpec):
    if len(fold) == 0:
        raise EmptyFold("empty fold")
    psi = eif_scores(fold.z, fold.a, fold.y, b.at(fold.X, beta), beta, moment)
    m = pairwise_mean(psi)
    return float(m) if np.ndim(m) == 0 else m


def variance_fold(fold: Dataset, b: NuisanceBundle, beta, moment: MomentSpec, center=None):
    """Fold second moment of the score around ``center`` (default: the fold mean)."""
    if len(fold) == 0:
        raise EmptyFold("empty fold")
    psi = eif_scores(fold.z, fold.a, fold.y, b.at(fold.X, beta), beta, moment)
    psi = psi.reshape(len(fold), -1)
    c = pairwise_mean(psi) if center is None else np.asarray(center, dtype=np.float64).reshape(-1)
    s = score_covariance(psi, c)
    return float(s[0, 0]) if s.shape == (1, 1) else s


# ---------------------------------------------------------------------------
# cross-fitting


@dataclass(frozen=True)
class FoldEstimate:
    theta_k: np.ndarray
    sigma2_k: np.ndarray
    fold_index: int
    n_k: int
    treated_fraction_k: float
    n_floored: int = 0


@dataclass(frozen=True)
class CrossfitResult:
    theta_hat: np.ndarray
    Sigma_hat: np.ndarray
    per_fold: tuple
    beta: object
    n: int

    @property
    def theta(self) -> float:
        return float(self.theta_hat[0])

    @property
    def sigma(self) -> float:
        return float(np.sqrt(max(self.Sigma_hat[0, 0], 0.0)))

    @property
    def treated_fraction(self) -> float:
        """Fold average of the treated fraction (the overall fraction when folds are equal)."""
        return float(np.mean([f.treated_fraction_k for f in self.per_fold]))

    @property
    def n_floored(self) -> int:
        return int(sum(f.n_floored for f in self.per_fold))

    @property
    def weak_instrument(self) -> bool:
        return self.n_floored > 0

    def to_dict(self) -> dict:
        beta = self.beta.tolist() if isinstance(self.beta, np.ndarray) else self.beta
        return {
            "beta": beta,
            "n": self.n,
            "theta": self.theta_hat.tolist(),
            "Sigma": self.Sigma_hat.tolist(),
            "clipping": {"floored_deltaA": self.n_floored},
            "per_fold": [
                {"fold": f.fold_index, "n_k": f.n_k, "theta_k": f.theta_k.tolist(),
                 "sigma2_k": f.sigma2_k.tolist(), "floored_deltaA": f.n_floored}
                for f in self.per_fold
            ],
        }


@dataclass(frozen=True)
class FoldScores:
    """Scores of one held-out fold at every requested beta: psi is (n_k, G, d)."""

    k: int
    test_idx: np.ndarray
    psi: np.ndarray
    n_floored: int
    treated_fraction: float
    bundle: Optional[NuisanceBundle] = None


def fold_scores(d: Dataset, plan: FoldPlan, k: int, learner: LearnerSpec,
                moment: MomentSpec, betas: Sequence, clip: ClipConfig,
                mu_strategy: str = "auto", keep_bundle: bool = False) -> FoldScores:
    train_idx, test_idx = plan.train_test(k)
    if test_idx.size == 0:
        raise EmptyFold(f"fold {k} is empty", fold=k)
    bundle = fit_nuisances(d.subset(train_idx), learner, moment, betas, clip, mu_strategy)
    test = d.subset(test_idx)
    rho, pi1, lam0, lam1, deltaA, floored = bundle.clipped_probabilities(test.X)
    mu0, mu1 = bundle.mu_values(test.X, betas, lam0, lam1)
    if mu1.ndim == 2:
        mu0, mu1 = mu0[..., None], mu1[..., None]
    mt = np.stack([np.asarray(regression_target(moment, test.y, test.a, b), dtype=np.float64)
                   .reshape(len(test), -1) for b in betas], axis=1)
    psi = _psi(test.z, test.a, mt, rho, pi1, lam0, lam1, deltaA, mu0, mu1)
    return FoldScores(k, test_idx, psi, int(floored.sum()), float(np.mean(test.a)),
                      bundle if keep_bundle else None)


def run_folds(d: Dataset, plan: FoldPlan, learner: LearnerSpec, moment: MomentSpec,
              betas: Sequence, clip: ClipConfig | None = None, mu_strategy: str = "auto",
              workers: int = 1, keep_bundles: bool = False) -> list:
    """Fit on each fold complement (possibly in threads) and score the fold."""
    clip = clip or ClipConfig()
    if plan.n != d.n:
        raise ConfigError(f"fold plan covers {plan.n} rows, dataset has {d.n}")
    job = lambda k: fold_scores(d, plan, k, learner, moment, betas, clip, mu_strategy,
                                keep_bundles)
    if workers > 1 and plan.K > 1:
        with ThreadPoolExecutor(max_workers=min(workers, plan.K)) as ex:
            out = list(ex.map(job, range(plan.K)))
    else:
        out = [job(k) for k in range(plan.K)]
    n_floored = sum(f.n_floored for f in out)
    if n_floored:
        warnings.warn(f"|lam1 - lam0| floored at {clip.eps_deltaA} for {n_floored} "
                      f"evaluation rows", WeakInstrumentWarning, stacklevel=2)
    return out


def rescore(d: Dataset, folds: list, moment: MomentSpec, betas: Sequence) -> list:
    """Scores at new betas from already fitted fold bundles (affine or oracle mu only)."""
    out = []
    for f in folds:
        b = f.bundle
        if b is None or b.strategy not in ("affine", "oracle"):
            raise ConfigError("rescoring needs retained bundles with affine or oracle mu")
        test = d.subset(f.test_idx)
        rho, pi1, lam0, lam1, deltaA, floored = b.clipped_probabilities(test.X)
        mu0, mu1 = b.mu_values(test.X, betas, lam0, lam1)
        if mu1.ndim == 2:
            mu0, mu1 = mu0[..., None], mu1[..., None]
        mt = np.stack([np.asarray(regression_target(moment, test.y, test.a, x), dtype=np.float64)
                       .reshape(len(test), -1) for x in betas], axis=1)
        psi = _psi(test.z, test.a, mt, rho, pi1, lam0, lam1, deltaA, mu0, mu1)
        out.append(replace(f, psi=psi))
    return out


def aggregate(folds: list, betas: Sequence, n: int) -> list:
    """Per-beta CrossfitResult: fold means and fold-centred covariances averaged over K."""
    results = []
    thetas = [pairwise_mean(f.psi) for f in folds]                  # (G, d) each
    covs = [score_covariance(f.psi, t) for f, t in zip(folds, thetas)]  # (G, d, d)
    K = len(folds)
    for g, b in enumerate(betas):
        per = tuple(FoldEstimate(thetas[k][g], covs[k][g], folds[k].k, len(folds[k].test_idx),
                                 folds[k].treated_fraction, folds[k].n_floored)
                    for k in range(K))
        theta = sum(p.theta_k for p in per) / K
        Sigma = sum(p.sigma2_k for p in per) / K
        results.append(CrossfitResult(theta, Sigma, per, b, n))
    return results


def crossfit_grid(d: Dataset, plan: FoldPlan, learner: LearnerSpec, moment: MomentSpec,
                  betas: Sequence, clip: ClipConfig | None = None, mu_strategy: str = "auto",
                  workers: int = 1) -> list:
    betas = list(betas)
    folds = run_folds(d, plan, learner, moment, betas, clip, mu_strategy, workers)
    return aggregate(folds, betas, d.n)


def crossfit_estimate(d: Dataset, plan: FoldPlan, learner: LearnerSpec, moment: MomentSpec,
                      beta, clip: ClipConfig | None = None, mu_strategy: str = "auto",
                      workers: int = 1) -> CrossfitResult:
    return crossfit_grid(d, plan, learner, moment, [beta], clip, mu_strategy, workers)[0]


# ---------------------------------------------------------------------------
# remainder and multiple robustness (enumeration only)


def expected_score(law: DiscreteLaw, eta: XNuisances, moment: MomentSpec, beta):
    """E_P[psi(O; eta)] for nuisances ``eta`` that need not belong to ``law``."""
    nu = eta.point(law.x_index)
    return law.expect(eif_scores(law.z, law.a, law.y, nu, beta, moment))


def remainder_exact(eta_bar: XNuisances, law: DiscreteLaw, moment: MomentSpec, beta) -> dict:
    """Second-order remainder R(Pbar, P), by definition and in product form.

    h(beta, Pbar) is tabulated on the x-marginal of ``law``; it cancels in the
    definition, so any choice gives the same value.
    """
    t = law.true_nuisances(moment, beta)
    px = law.p_x()
    h_bar = float(np.sum(px * eta_bar.rho * eta_bar.delta))
    h_true = h_of_beta_exact(law, moment, beta)
    definitional = h_bar - h_true + float(expected_score(law, eta_bar, moment, beta)) - h_bar

    b, dbar, d = eta_bar, eta_bar.delta, t.delta
    first = (dbar - d) * (b.rho / b.deltaA * (b.deltaA - t.deltaA) - (b.rho - t.rho))
    second = b.rho / b.deltaA * (b.pi1 - t.pi1) * (
        ((b.mu1 - t.mu1) - dbar * (b.lam1 - t.lam1)) / b.pi1
        + ((b.mu0 - t.mu0) - dbar * (b.lam0 - t.lam0)) / (1.0 - b.pi1))
    product = float(np.sum(px * (first + second)))
    return {"definitional": definitional, "product": product,
            "abs_diff": abs(definitional - product)}


def perturbation_configs(t: XNuisances, eps: float = 0.05, seed: int = 0) -> dict:
    """Nuisance sets matching each correct-specification pattern, plus one violation."""
    rng = np.random.default_rng(seed)
    nx = len(t.rho)

    def e():
        return eps * rng.choice([-1.0, 1.0], size=nx) * rng.uniform(0.5, 1.0, size=nx)

    d = t.delta
    # 1: delta and pi1 correct
    lam0, lam1 = t.lam0 + e(), t.lam1 + e()
    mu0 = t.mu0 + e()
    c1 = t.replace(rho=t.rho + e(), lam0=lam0, lam1=lam1, mu0=mu0, mu1=mu0 + d * (lam1 - lam0))
    # 2: delta, lam0 and mu0 correct
    lam1 = t.lam1 + e()
    c2 = t.replace(rho=t.rho + e(), pi1=t.pi1 + e(), lam1=lam1, mu1=t.mu0 + d * (lam1 - t.lam0))
    # 3: deltaA, pi1 and rho correct
    shift = e()
    c3 = t.replace(lam0=t.lam0 + shift, lam1=t.lam1 + shift, mu0=t.mu0 + e(), mu1=t.mu1 + e())
    # violation: delta and pi1 both wrong, everything else correct
    viol = t.replace(pi1=t.pi1 + eps, mu1=t.mu1 + eps)
    return {"config1": c1, "config2": c2, "config3": c3, "violation": viol}


def robustness_suite(law: DiscreteLaw, moment: MomentSpec, beta, eps: float = 0.05,
                     seed: int = 0) -> dict:
    """Bias E_P[psi(eta_bar)] - h(beta, P) under each perturbation pattern."""
    t = law.true_nuisances(moment, beta)
    h = h_of_beta_exact(law, moment, beta)
    return {name: float(expected_score(law, eta, moment, beta)) - h
            for name, eta in perturbation_configs(t, eps, seed).items()}

"""Enumeration-oracle self checks on the reference discrete laws.

Each check reports its worst residual against a tolerance. ``corrupt_sign``
flips the sign in the identification check and exists to prove the suite can
fail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .eif import (
    XNuisances,
    eif_scores,
    h_of_beta_exact,
    remainder_exact,
    robustness_suite,
)
from .inference import qtt_moment_exact, qtt_truth
from .moments import MomentSpec
from .sim import exact_law, reference_laws


@dataclass(frozen=True)
class Check:
    name: str
    residual: float
    tol: float
    lower: bool = True   # residual must be <= tol; False means >= tol

    @property
    def passed(self) -> bool:
        ok = self.residual <= self.tol if self.lower else self.residual >= self.tol
        return bool(ok and np.isfinite(self.residual))

    def line(self) -> str:
        op = "<=" if self.lower else ">="
        return (f"{'PASS' if self.passed else 'FAIL'}  {self.name:<34} "
                f"{self.residual:.3e} {op} {self.tol:.0e}")


def random_betas(law, moment: MomentSpec, rng, size: int = 20) -> np.ndarray:
    """Betas spread over the interesting range of each moment family."""
    if moment.kind == "cdf":
        return rng.uniform(0.0, 1.0, size)
    lo, hi = float(law.y0.min()), float(law.y0.max())
    return rng.uniform(lo - 0.5, hi + 0.5, size)


def families() -> list:
    return [MomentSpec.mean(), MomentSpec.quantile(0.5), MomentSpec.cdf_at(1.5)]


def identification_residual(law, moment, beta, sign: float = 1.0) -> float:
    h = h_of_beta_exact(law, moment, beta)
    return abs(float(law.treated_moment(moment, beta)) + sign * h / law.treated_fraction())


def eif_mean_residual(law, moment, beta) -> float:
    t = law.true_nuisances(moment, beta)
    psi = eif_scores(law.z, law.a, law.y, t.point(law.x_index), beta, moment)
    return abs(float(law.expect(psi - h_of_beta_exact(law, moment, beta))))


def random_perturbation(t: XNuisances, rng, scale: float = 0.03) -> XNuisances:
    e = lambda v: v + rng.normal(scale=scale, size=np.shape(v))
    return t.replace(rho=e(t.rho), pi1=e(t.pi1), lam0=e(t.lam0), lam1=e(t.lam1),
                     mu0=e(t.mu0), mu1=e(t.mu1))


def run_selftest(corrupt_sign: bool = False, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    laws = {k: exact_law(v) for k, v in reference_laws().items()}
    ident, eif_res, rem, robust, viol, qtt = 0.0, 0.0, 0.0, 0.0, np.inf, 0.0
    sign = -1.0 if corrupt_sign else 1.0
    for law in laws.values():
        for m in families():
            for b in random_betas(law, m, rng):
                ident = max(ident, identification_residual(law, m, b, sign))
                eif_res = max(eif_res, eif_mean_residual(law, m, b))
        for m in families():
            b = float(random_betas(law, m, rng, 1)[0])
            for _ in range(4):
                t = law.true_nuisances(m, b)
                rem = max(rem, remainder_exact(random_perturbation(t, rng), law, m, b)["abs_diff"])
            rep = robustness_suite(law, m, b)
            robust = max(robust, *(abs(rep[k]) for k in ("config1", "config2", "config3")))
        rep = robustness_suite(law, MomentSpec.mean(), 0.0)
        viol = min(viol, abs(rep["violation"]))
        tr = qtt_truth(law, 0.5)
        qtt = max(qtt, abs(qtt_moment_exact(law, 0.5, tr["beta"])))
    return [
        Check("identification (treated moment)", ident, 1e-10),
        Check("influence function mean zero", eif_res, 1e-12),
        Check("remainder product form", rem, 1e-8),
        Check("robustness configurations", robust, 1e-12),
        Check("robustness violation detected", viol, 1e-3, lower=False),
        Check("direct quantile moment at truth", qtt, 1e-10),
    ]

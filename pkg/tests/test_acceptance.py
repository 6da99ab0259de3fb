"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they also appear in the captured output of ``pytest -v -rA``.
"""

import json
import time

import numpy as np
import pytest
from scipy import stats

from mivinfer.cli import main
from mivinfer.dataset import Dataset, make_folds
from mivinfer.eif import crossfit_grid, eif_scores, h_of_beta_exact, remainder_exact, robustness_suite
from mivinfer.inference import (
    GridSpec,
    att_estimate,
    invert_functional,
    point_estimate,
    qtt_moment_exact,
    qtt_truth,
)
from mivinfer.learners import LearnerSpec
from mivinfer.moments import MomentSpec
from mivinfer.sim import (
    CoverageConfig,
    DgpSpec,
    coverage_experiment,
    exact_law,
    fine_lattice_oracle,
    generate,
    reference_laws,
    standardized_estimates,
    strong_instrument_oracle,
)

FAMILIES = [MomentSpec.mean(), MomentSpec.quantile(0.5), MomentSpec.cdf_at(1.5)]
LAWS = ("default", "skewed", "covariate", "lattice")
ALPHAS = (0.025, 0.05, 0.075, 0.1, 0.125, 0.15, 0.175, 0.2)
STACK = {"learner": "stack", "members": [{"learner": "logistic"},
                                          {"learner": "gbt", "min_leaf": 20}]}


@pytest.fixture
def verdict(capsys):
    def report(tag, ok, detail):
        with capsys.disabled():
            print(f"\n[{tag}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return report


@pytest.fixture(scope="module")
def law_tables():
    return {k: exact_law(v) for k, v in reference_laws().items()}


def test_c1_identification_identity(law_tables, verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for name in LAWS:
        law = law_tables[name]
        p = law.treated_fraction()
        for m in FAMILIES:
            betas = rng.uniform(0, 1, 20) if m.kind == "cdf" else rng.uniform(-2, 3, 20)
            for b in betas:
                r = abs(float(law.treated_moment(m, b)) + h_of_beta_exact(law, m, b) / p)
                worst = max(worst, r)
    dt = time.perf_counter() - t0
    verdict("C1", worst <= 1e-10 and dt < 1.0,
            f"max |E[M|A=1] + h/P(A=1)| = {worst:.2e} (<= 1e-10), {dt:.2f}s (< 1s)")


def test_c2_eif_mean_zero(law_tables, verdict):
    rng = np.random.default_rng(102)
    worst = 0.0
    for name in LAWS:
        law = law_tables[name]
        for m in FAMILIES:
            for b in (rng.uniform(0, 1, 5) if m.kind == "cdf" else rng.uniform(-1, 3, 5)):
                t = law.true_nuisances(m, b)
                psi = eif_scores(law.z, law.a, law.y, t.point(law.x_index), b, m)
                worst = max(worst, abs(float(law.expect(psi)) - h_of_beta_exact(law, m, b)))
    verdict("C2", worst <= 1e-12, f"max |sum p(o) centred EIF| = {worst:.2e} (<= 1e-12)")


def test_c3_remainder_factorization(law_tables, verdict):
    rng = np.random.default_rng(103)
    worst = 0.0
    for i in range(50):
        law = law_tables[LAWS[i % 4]]
        m = FAMILIES[i % 3]
        b = 0.6
        t = law.true_nuisances(m, b)
        e = lambda v: v + rng.uniform(-0.05, 0.05, np.shape(v))
        bar = t.replace(rho=e(t.rho), pi1=e(t.pi1), lam0=e(t.lam0), lam1=e(t.lam1),
                        mu0=e(t.mu0), mu1=e(t.mu1))
        worst = max(worst, remainder_exact(bar, law, m, b)["abs_diff"])
    strong = exact_law(DgpSpec("discrete_oracle", discrete=strong_instrument_oracle()))
    spreads = []
    for m, b in ((MomentSpec.mean(), 0.5), (MomentSpec.quantile(0.5), 1.5)):
        t = strong.true_nuisances(m, b)
        r = np.array([remainder_exact(t.replace(lam1=t.lam1 + eps, pi1=t.pi1 + eps), strong, m, b)
                      ["definitional"] / eps ** 2 for eps in (0.04, 0.02, 0.01)])
        spreads.append(float(np.max(np.abs(r / r[-1] - 1))))
    ok = worst <= 1e-8 and max(spreads) <= 0.20
    verdict("C3", ok, f"max |R_def - R_prod| = {worst:.2e} (<= 1e-8); "
                      f"R/eps^2 spread {max(spreads):.1%} (<= 20%)")


def test_c4_multiple_robustness(law_tables, verdict):
    worst = 0.0
    for name in ("default", "skewed", "covariate"):
        for m in FAMILIES:
            rep = robustness_suite(law_tables[name], m, 0.5, eps=0.05)
            worst = max(worst, *(abs(rep[c]) for c in ("config1", "config2", "config3")))
    viol = abs(robustness_suite(law_tables["default"], MomentSpec.mean(), 0.5)["violation"])
    verdict("C4", worst <= 1e-12 and viol > 1e-3,
            f"max |bias| correct = {worst:.2e} (<= 1e-12); violation |bias| = {viol:.2e} (> 1e-3)")


def test_c5_affine_identity(verdict):
    rng = np.random.default_rng(105)
    n = 500
    arbitrary = Dataset(rng.normal(size=(n, 2)), rng.integers(0, 2, n), rng.integers(0, 2, n),
                        rng.standard_t(3, n))
    cont = generate(DgpSpec("paper_continuous", n=800, seed=105)).data
    learner = LearnerSpec("gbt", rounds=40)
    worst = 0.0
    for d in (arbitrary, cont):
        res = crossfit_grid(d, make_folds(d.n, 2, 5), learner, MomentSpec.mean(),
                            [0.0, -1.7, 0.4, 2.9])
        for r in res[1:]:
            worst = max(worst, abs(r.theta - res[0].theta - r.beta * r.treated_fraction))
    plan = make_folds(cont.n, 2, 6)
    step = 0.01
    att = att_estimate(cont, plan, learner)
    cs = invert_functional(cont, plan, learner, MomentSpec.mean(), GridSpec(-1.0, 4.0, step),
                           0.05)
    # beta0 is the counterfactual treated mean; the inversion's point estimate is the grid root
    gap = abs(att.beta0 - point_estimate(cs))
    verdict("C5", worst <= 1e-12 and gap <= step,
            f"max affine residual = {worst:.2e} (<= 1e-12); |att beta0 - grid root| = "
            f"{gap:.4f} (<= {step})")


@pytest.fixture(scope="module")
def coverage_report():
    cfg = CoverageConfig(dgp=DgpSpec("paper_continuous"), functional="median",
                         n_list=(400, 1000), alpha_list=ALPHAS, reps=500, K=2,
                         learner=LearnerSpec.from_config(STACK), grid=GridSpec(0.0, 2.5, 0.005),
                         seed=2026, convention="chisq", mu_strategy="pooled")
    return coverage_experiment(cfg, workers=1)


@pytest.mark.parametrize("n,tol", [(1000, 0.03), (400, 0.04)])
def test_c6_coverage(coverage_report, n, tol, verdict):
    rows = [r for r in coverage_report.rows if r["n"] == n]
    devs = {r["alpha"]: r["coverage"] - (1 - r["alpha"]) for r in rows}
    worst = max(devs, key=lambda a: abs(devs[a]))
    table = " ".join(f"{a}:{r['coverage']:.3f}" for a, r in zip(ALPHAS, rows))
    verdict(f"C6 n={n}", all(abs(v) <= tol for v in devs.values()),
            f"coverage {table}; worst deviation {devs[worst]:+.3f} at alpha={worst} "
            f"(tolerance {tol}); runtime of both sizes {coverage_report.runtime:.0f}s")


def test_c7_asymptotic_normality(verdict):
    spec = DgpSpec("discrete_oracle")
    ks = []
    for m, b in ((MomentSpec.mean(), 0.5), (MomentSpec.quantile(0.5), 1.0)):
        t = standardized_estimates(spec, m, b, n=2000, reps=500, K=2, seed=107)
        ks.append(float(stats.kstest(t, "norm").statistic))
    verdict("C7", max(ks) < 0.08, f"KS statistics {ks[0]:.4f} (mean), {ks[1]:.4f} (median) (< 0.08)")


def test_c8_determinism(tmp_path, verdict):
    cfg = {"dgp": {"kind": "paper_continuous"}, "functional": "median", "n_list": [200, 300],
           "alpha_list": [0.05, 0.1], "reps": 8, "learner": {"learner": "gbt", "rounds": 20},
           "grid": {"lo": 0.0, "hi": 2.5, "step": 0.02}, "seed": 9, "truth": 1.19506}
    sim = generate(DgpSpec("paper_continuous", n=400, seed=108)).data
    sim.to_csv(tmp_path / "d.csv")
    acfg = {"data": str(tmp_path / "d.csv"), "schema": {"covariates": "x"},
            "functional": {"functional": "quantile", "q": 0.5},
            "grid": {"lo": 0.0, "hi": 2.5, "step": 0.02}, "learner": {"learner": "gbt", "rounds": 20},
            "seed": 3, "K": 3}
    (tmp_path / "cov.json").write_text(json.dumps(cfg))
    (tmp_path / "an.json").write_text(json.dumps(acfg))
    blobs = {}
    for w in ("1", "4", "8"):
        out = tmp_path / f"w{w}"
        assert main(["coverage", "--config", str(tmp_path / "cov.json"), "--out", str(out / "c"),
                     "--workers", w]) == 0
        assert main(["analyze", "--config", str(tmp_path / "an.json"), "--out", str(out / "a"),
                     "--workers", w]) == 0
        blobs[w] = {p.relative_to(out).as_posix(): p.read_bytes()
                    for p in sorted(out.rglob("*")) if p.is_file()}
    same = blobs["1"] == blobs["4"] == blobs["8"]
    verdict("C8", same and len(blobs["1"]) >= 5,
            f"{len(blobs['1'])} output files byte-identical across 1, 4, 8 workers: {same}")


def test_c9_qtt_direct_moment(verdict):
    spec = DgpSpec("discrete_oracle", discrete=fine_lattice_oracle(101))
    law = exact_law(spec)
    t = qtt_truth(law, 0.5)
    resid = abs(qtt_moment_exact(law, 0.5, t["beta"]))
    cfg = CoverageConfig(dgp=spec, functional="qtt", q=0.5, n_list=(2000,), alpha_list=(0.1,),
                         reps=200, learner=LearnerSpec("gbt"), grid=GridSpec(-2.5, 0.5, 0.01),
                         seed=2027, convention="chisq")
    cov = coverage_experiment(cfg, workers=1).coverage(2000, 0.1)
    verdict("C9", resid <= 1e-10 and cov >= 0.85,
            f"enumerated moment at beta*={t['beta']:g}: {resid:.2e} (<= 1e-10); "
            f"coverage at alpha=0.1 over 200 reps = {cov:.3f} (>= 0.85)")

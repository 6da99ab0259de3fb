import numpy as np
import pytest

from mivinfer.dataset import Dataset, make_folds
from mivinfer.eif import (
    DiscreteLaw,
    XNuisances,
    crossfit_estimate,
    crossfit_grid,
    eif_evaluate,
    eif_scores,
    estimate_h_fold,
    h_of_beta_exact,
    pairwise_mean,
    remainder_exact,
    robustness_suite,
    score_covariance,
    variance_fold,
)
from mivinfer.errors import EmptyFold, ZeroDeltaA
from mivinfer.learners import LearnerSpec
from mivinfer.moments import MomentSpec
from mivinfer.nuisance import ClipConfig, fit_nuisances, make_point
from mivinfer.sim import (
    DgpSpec,
    ContinuousOracle,
    exact_law,
    generate,
    strong_instrument_oracle,
    true_score_variance,
)

MEAN = MomentSpec.mean()
FAMILIES = [MomentSpec.mean(), MomentSpec.quantile(0.5), MomentSpec.cdf_at(1.5)]
NU = dict(rho=0.5, pi1=0.5, lam0=0.4, lam1=0.8, mu0=0.5, mu1=1.0)


class Obs:
    def __init__(self, z, a, y):
        self.z, self.a, self.y = np.asarray(z), np.asarray(a), np.asarray(y, float)


def nu_point(**kw):
    v = {**NU, **kw}
    return make_point(v["rho"], v["pi1"], v["lam0"], v["lam1"], v["mu0"], v["mu1"], ClipConfig())


def two_atom_law():
    # one x, P(Z=1)=.5, lam1=.8, lam0=.4, E[Y(1-A)|Z=1]=.1, E[Y(1-A)|Z=0]=.3
    return DiscreteLaw(np.zeros((1, 0)), [0] * 4, [0] * 4, [1, 1, 0, 0], [1, 0, 1, 0],
                       [0.5, 0.5, 0.5, 0.5], [1.0] * 4, [0.4, 0.1, 0.2, 0.3])


class BundleOf:
    """Bundle stand-in returning one fixed NuisanceAtPoint for every row."""

    def __init__(self, pt):
        self.pt = pt

    def at(self, X, beta):
        n = X.shape[0]
        f = lambda v: np.full(n, float(v))
        p = self.pt
        return make_point(f(p.rho), f(p.pi1), f(p.lam0), f(p.lam1), f(p.mu0), f(p.mu1),
                          ClipConfig())


# -- scores ------------------------------------------------------------------

def test_eif_worked_values():
    nu = nu_point()
    assert nu.delta == pytest.approx(1.25)
    assert eif_evaluate(Obs(1, 0, 2.0), nu, 0.0, 0.0, MEAN) == pytest.approx(5.0, abs=1e-12)
    assert eif_evaluate(Obs(0, 1, 3.0), nu, 0.0, 0.0, MEAN) == pytest.approx(4.375, abs=1e-12)


def test_eif_residual_free_row():
    nu = nu_point(lam1=1.0, mu1=0.0)
    val = eif_evaluate(Obs(1, 1, 7.0), nu, 0.0, 0.3, MEAN)
    assert val == pytest.approx(float(nu.delta) - 0.3, abs=1e-14)


def test_fold_estimates():
    one = Dataset(np.zeros((1, 1)), [1], [0], [2.0])
    assert estimate_h_fold(one, BundleOf(nu_point()), 0.0, MEAN) == pytest.approx(5.0)
    # all rows A=1, Z=1 with residual-free nuisances: mean of delta
    rows = Dataset(np.zeros((3, 1)), [1, 1, 1], [1, 1, 1], [1.0, 4.0, 9.0])
    nu = nu_point(lam1=1.0, mu1=0.0)
    assert estimate_h_fold(rows, BundleOf(nu), 0.0, MEAN) == pytest.approx(float(nu.delta))
    with pytest.raises(EmptyFold):
        pairwise_mean(np.empty((0, 1)))


def test_variance_fold_examples():
    same = Dataset(np.zeros((4, 1)), [1] * 4, [0] * 4, [2.0] * 4)
    assert variance_fold(same, BundleOf(nu_point()), 0.0, MEAN) == 0.0
    assert float(score_covariance(np.array([[4.0], [6.0]]), [5.0])[0, 0]) == 1.0
    # explicit centre: (5-4.375)^2/2 + 0
    two = Dataset(np.zeros((2, 1)), [1, 0], [0, 1], [2.0, 3.0])
    assert variance_fold(two, BundleOf(nu_point()), 0.0, MEAN, center=5.0) == \
        pytest.approx(0.5 * 0.625 ** 2)


def test_pairwise_mean_order_independent_of_layout():
    v = np.random.default_rng(0).normal(size=(1001, 3))
    col = pairwise_mean(v)
    assert np.array_equal(col, np.array([pairwise_mean(v[:, j]) for j in range(3)]))


# -- identification ----------------------------------------------------------

def test_two_atom_h():
    assert h_of_beta_exact(two_atom_law(), MEAN, 0.0) == pytest.approx(-0.3, abs=1e-14)


def test_irrelevant_instrument_raises():
    law = DiscreteLaw(np.zeros((1, 0)), [0] * 4, [0] * 4, [1, 1, 0, 0], [1, 0, 1, 0],
                      [0.0] * 4, [1.0] * 4, [0.25] * 4)
    with pytest.raises(ZeroDeltaA):
        h_of_beta_exact(law, MEAN, 0.0)


@pytest.mark.parametrize("name", ["default", "skewed", "covariate", "lattice"])
def test_identification_identity(laws, name):
    law = laws[name]
    rng = np.random.default_rng(5)
    p = law.treated_fraction()
    for moment in FAMILIES:
        for beta in rng.uniform(-2, 3, 20):
            if moment.kind == "cdf":
                beta = rng.uniform(0, 1)
            lhs = -h_of_beta_exact(law, moment, beta) / p
            assert lhs == pytest.approx(float(law.treated_moment(moment, beta)), abs=1e-12)


@pytest.mark.parametrize("name", ["default", "skewed", "covariate"])
def test_centred_eif_mean_zero(laws, name):
    law = laws[name]
    for moment in FAMILIES:
        beta = 0.4
        t = law.true_nuisances(moment, beta)
        psi = eif_scores(law.z, law.a, law.y, t.point(law.x_index), beta, moment)
        assert law.expect(psi) - h_of_beta_exact(law, moment, beta) == pytest.approx(0, abs=1e-12)


# -- cross-fitting -----------------------------------------------------------

def test_oracle_monte_carlo_matches_enumeration(default_law):
    n = 1_000_000
    d = generate(DgpSpec("discrete_oracle", n=n, seed=31)).data
    b = fit_nuisances(None, LearnerSpec("oracle", oracle=default_law.oracle()), MEAN)
    psi = eif_scores(d.z, d.a, d.y, b.at(d.X, 0.5), 0.5, MEAN)
    h = h_of_beta_exact(default_law, MEAN, 0.5)
    assert abs(psi.mean() - h) <= 4 * psi.std() / np.sqrt(n)


def test_sigma2_close_to_true_variance():
    spec = DgpSpec("paper_continuous")
    m = MomentSpec.quantile(0.5)
    target = true_score_variance(spec, m, 1.2, mc_n=300_000, seed=1)
    assert target == pytest.approx(0.375, rel=0.01)
    L = LearnerSpec("oracle", oracle=ContinuousOracle())
    s2 = [crossfit_estimate(generate(spec, n=2000, seed=s).data, make_folds(2000, 2, s),
                            L, m, 1.2).Sigma_hat[0, 0] for s in range(5)]
    assert np.median(s2) == pytest.approx(target, rel=0.10)


def test_k2_oracle_equals_full_sample_mean(default_law):
    d = generate(DgpSpec("discrete_oracle", n=3000, seed=2)).data
    L = LearnerSpec("oracle", oracle=default_law.oracle())
    res = crossfit_estimate(d, make_folds(d.n, 2, 0), L, MEAN, 0.7)
    b = fit_nuisances(None, L, MEAN)
    full = eif_scores(d.z, d.a, d.y, b.at(d.X, 0.7), 0.7, MEAN).mean()
    assert res.theta == pytest.approx(full, abs=1e-12)
    assert res.Sigma_hat[0, 0] >= 0 and res.n == d.n


@pytest.mark.parametrize("moment,sign", [(MomentSpec.mean(), 1.0), (MomentSpec.cdf_at(1.0), 1.0)])
def test_affine_identity(continuous_sample, moment, sign):
    d = continuous_sample.data
    plan = make_folds(d.n, 2, 3)
    spec = LearnerSpec("gbt", rounds=30)
    betas = [0.0, 0.3, 0.9] if moment.kind == "cdf" else [0.0, 1.0, -2.5]
    res = crossfit_grid(d, plan, spec, moment, betas)
    for r in res[1:]:
        diff = r.theta - res[0].theta
        assert diff == pytest.approx(sign * r.beta * r.treated_fraction, abs=1e-12)


def test_constant_learner_weak_flag():
    X = np.zeros((40, 1))
    z = np.tile([0, 1], 20)
    a = np.tile([0, 0, 1, 1], 10)
    d = Dataset(X, z, a, np.arange(40.0))
    # a is unrelated to z, so the fitted arms differ by far less than the floor
    res = crossfit_estimate(d, make_folds(40, 2, 0), LearnerSpec("constant"), MEAN, 0.0,
                            clip=ClipConfig(eps_deltaA=0.3))
    assert res.weak_instrument and res.n_floored == 40


def test_crossfit_invariant_to_workers(continuous_sample):
    plan = make_folds(continuous_sample.data.n, 3, 1)
    spec = LearnerSpec("gbt", rounds=20)
    a = crossfit_estimate(continuous_sample.data, plan, spec, MEAN, 0.4, workers=1)
    b = crossfit_estimate(continuous_sample.data, plan, spec, MEAN, 0.4, workers=3)
    assert np.array_equal(a.theta_hat, b.theta_hat) and np.array_equal(a.Sigma_hat, b.Sigma_hat)


def test_result_serialises(continuous_sample):
    r = crossfit_estimate(continuous_sample.data, make_folds(continuous_sample.data.n, 2, 0),
                          LearnerSpec("constant"), MEAN, 0.0)
    out = r.to_dict()
    assert len(out["per_fold"]) == 2 and "floored_deltaA" in out["clipping"]


# -- remainder and robustness -----------------------------------------------

def test_remainder_zero_at_truth(default_law):
    t = default_law.true_nuisances(MEAN, 0.5)
    r = remainder_exact(t, default_law, MEAN, 0.5)
    assert abs(r["definitional"]) < 1e-12 and abs(r["product"]) < 1e-12


def test_remainder_mu1_only(default_law):
    t = default_law.true_nuisances(MEAN, 0.5)
    r = remainder_exact(t.replace(mu1=t.mu1 + 0.05), default_law, MEAN, 0.5)
    assert abs(r["definitional"]) < 1e-12 and r["abs_diff"] < 1e-12


@pytest.mark.parametrize("name", ["default", "skewed", "covariate", "lattice"])
def test_remainder_forms_agree(laws, name):
    law = laws[name]
    rng = np.random.default_rng(8)
    for moment in FAMILIES:
        beta = 0.6
        t = law.true_nuisances(moment, beta)
        for _ in range(5):
            e = lambda v: v + rng.uniform(-0.04, 0.04, np.shape(v))
            bar = t.replace(rho=e(t.rho), pi1=e(t.pi1), lam0=e(t.lam0), lam1=e(t.lam1),
                            mu0=e(t.mu0), mu1=e(t.mu1))
            assert remainder_exact(bar, law, moment, beta)["abs_diff"] < 1e-8


def remainder_ratios(law, moment, beta):
    t = law.true_nuisances(moment, beta)
    out = []
    for eps in (0.04, 0.02, 0.01):
        bar = t.replace(lam1=t.lam1 + eps, pi1=t.pi1 + eps)
        out.append(remainder_exact(bar, law, moment, beta)["definitional"] / eps ** 2)
    return np.array(out)


@pytest.mark.parametrize("moment,beta", [(MomentSpec.mean(), 0.5), (MomentSpec.quantile(0.5), 1.5)])
def test_remainder_second_order(moment, beta):
    law = exact_law(DgpSpec("discrete_oracle", discrete=strong_instrument_oracle()))
    r = remainder_ratios(law, moment, beta)
    assert np.all(np.abs(r / r[-1] - 1) <= 0.20)


def test_robustness_suite(laws):
    for name in ("default", "skewed", "covariate"):
        for moment in FAMILIES:
            rep = robustness_suite(laws[name], moment, 0.5)
            for c in ("config1", "config2", "config3"):
                assert abs(rep[c]) < 1e-12, (name, moment, c)
    rep = robustness_suite(laws["default"], MEAN, 0.5)
    assert abs(rep["violation"]) > 1e-3

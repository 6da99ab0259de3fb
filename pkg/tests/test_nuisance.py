import numpy as np
import pytest

from mivinfer.dataset import Dataset
from mivinfer.errors import BetaNotOnGrid, ConfigError, DegenerateArm
from mivinfer.learners import LearnerSpec
from mivinfer.moments import MomentSpec
from mivinfer.nuisance import (
    ClipConfig,
    clip_probabilities,
    eval_bundle,
    fit_nuisances,
    make_point,
    weak_iv_diagnostic,
)
from mivinfer.sim import DgpSpec, ContinuousOracle, generate


class FlatOracle:
    """lam1 - lam0 = gap everywhere; mu from a fixed affine form."""

    def __init__(self, gap):
        self.gap = gap

    def rho(self, X):
        return np.full(len(X), 0.5)

    def pi1(self, X):
        return np.full(len(X), 0.5)

    def lam(self, z, X):
        return np.full(len(X), 0.3 + self.gap * z)

    def mu(self, z, beta, X, moment):
        return (1 - self.lam(z, X)) * (z + 1.0 - beta)


def oracle_spec(o):
    return LearnerSpec("oracle", oracle=o)


def test_eval_arithmetic():
    pt = make_point(0.5, 0.5, 0.4, 0.8, 0.1, 0.5, ClipConfig())
    assert pt.deltaA == pytest.approx(0.4)
    assert pt.delta == pytest.approx(1.0)
    assert not pt.weak_instrument


def test_floor_applies_and_flags():
    pt = make_point(0.5, 0.5, 0.5, 0.5, 0.1, 0.3, ClipConfig(eps_deltaA=0.01))
    assert pt.deltaA == pytest.approx(0.01)
    assert pt.lam1 - pt.lam0 == pytest.approx(0.01)
    assert pt.weak_instrument
    neg = make_point(0.5, 0.5, 0.503, 0.5, 0.0, 0.0, ClipConfig(eps_deltaA=0.01))
    assert neg.deltaA == pytest.approx(-0.01)


def test_equal_mu_gives_zero_delta():
    pt = make_point(0.5, 0.5, 0.2, 0.9, 0.3, 0.3, ClipConfig())
    assert pt.delta == 0.0


def test_clip_invariants():
    rng = np.random.default_rng(0)
    raw = [rng.uniform(-0.3, 1.3, 500) for _ in range(4)]
    clip = ClipConfig(eps_pi=0.05, eps_deltaA=0.02)
    rho, pi1, lam0, lam1, dA, _ = clip_probabilities(*raw, clip)
    for v in (rho, lam0, lam1):
        assert np.all((v >= 0) & (v <= 1))
    assert np.all((pi1 >= 0.05) & (pi1 <= 0.95))
    assert np.all(np.abs(dA) >= 0.02 - 1e-15)
    assert np.allclose(dA, lam1 - lam0)


def test_pi_z():
    pt = make_point(0.5, 0.3, 0.2, 0.9, 0.0, 0.0, ClipConfig())
    assert pt.pi_z(1) == pytest.approx(0.3) and pt.pi_z(0) == pytest.approx(0.7)


def test_clip_config_validation():
    with pytest.raises(ConfigError):
        ClipConfig(eps_pi=0.5)
    with pytest.raises(ConfigError):
        ClipConfig(eps_deltaA=0.0)


def test_oracle_bundle_passes_through():
    o = ContinuousOracle()
    X = np.random.default_rng(1).uniform(size=(50, 2))
    b = fit_nuisances(None, oracle_spec(o), MomentSpec.quantile(0.5), grid=[1.2])
    pt = eval_bundle(b, X, 1.2)
    assert np.allclose(pt.lam1, o.lam(1, X)) and np.allclose(pt.lam0, o.lam(0, X))
    assert np.allclose(pt.pi1, o.pi1(X)) and np.allclose(pt.rho, o.rho(X))
    m = MomentSpec.quantile(0.5)
    assert np.allclose(pt.mu1, o.mu(1, 1.2, X, m))


def test_oracle_affine_shift_identity():
    o = ContinuousOracle()
    X = np.random.default_rng(2).uniform(size=(30, 2))
    b = fit_nuisances(None, oracle_spec(o), MomentSpec.mean())
    p0, pb = eval_bundle(b, X, 0.0), eval_bundle(b, X, 0.7)
    for z, lam in ((0, p0.lam0), (1, p0.lam1)):
        assert np.allclose(pb.mu_z(z), p0.mu_z(z) - 0.7 * (1 - lam), atol=1e-12)


def test_constant_learner_bundle():
    s = generate(DgpSpec("paper_continuous", n=300, seed=3))
    d = s.data
    b = fit_nuisances(d, LearnerSpec("constant"), MomentSpec.mean())
    pt = eval_bundle(b, d.X[:4], 0.0)
    assert np.allclose(pt.rho, d.a.mean())
    assert np.allclose(pt.pi1, d.z.mean())
    assert np.allclose(pt.lam1, d.a[d.z == 1].mean())
    target0 = (d.y * (1 - d.a))[d.z == 0].mean()
    assert np.allclose(pt.mu0, target0)


def test_affine_bundle_matches_per_grid_for_linear_learner():
    # the affine shift is exact for the mean moment when learners are linear in the target
    s = generate(DgpSpec("paper_continuous", n=400, seed=4))
    grid = [0.0, 0.5, 1.25]
    aff = fit_nuisances(s.data, LearnerSpec("constant"), MomentSpec.mean(), mu_strategy="affine")
    pg = fit_nuisances(s.data, LearnerSpec("constant"), MomentSpec.mean(), grid=grid,
                       mu_strategy="per_grid")
    X = s.data.X[:5]
    for beta in grid:
        a, p = eval_bundle(aff, X, beta), eval_bundle(pg, X, beta)
        assert np.allclose(a.mu0, p.mu0) and np.allclose(a.mu1, p.mu1)


def test_beta_off_grid_rejected():
    s = generate(DgpSpec("paper_continuous", n=200, seed=5))
    b = fit_nuisances(s.data, LearnerSpec("constant"), MomentSpec.quantile(0.5), grid=[1.0, 2.0])
    eval_bundle(b, s.data.X[:2], 2.0)
    with pytest.raises(BetaNotOnGrid):
        eval_bundle(b, s.data.X[:2], 1.5)


def test_pooled_strategy_monotone_in_beta():
    s = generate(DgpSpec("paper_continuous", n=600, seed=6))
    grid = np.linspace(0, 3, 13)
    b = fit_nuisances(s.data, LearnerSpec("gbt", rounds=20), MomentSpec.quantile(0.5),
                      grid=grid, mu_strategy="pooled")
    mu0, mu1 = b.mu_values(s.data.X[:20], grid, np.full(20, 0.3), np.full(20, 0.6))
    assert np.all(np.diff(mu0, axis=1) <= 1e-12) and np.all(np.diff(mu1, axis=1) <= 1e-12)


def test_degenerate_arm():
    X = np.zeros((4, 1))
    d = Dataset(X, [1, 1, 1, 1], [0, 1, 0, 1], [1.0, 2.0, 3.0, 4.0])
    with pytest.raises(DegenerateArm):
        fit_nuisances(d, LearnerSpec("constant"), MomentSpec.mean())


def test_fit_is_deterministic():
    s = generate(DgpSpec("paper_continuous", n=300, seed=7))
    spec = LearnerSpec("stack", members=(LearnerSpec("logistic"), LearnerSpec("gbt", rounds=20)))
    a = eval_bundle(fit_nuisances(s.data, spec, MomentSpec.mean()), s.data.X, 0.4)
    b = eval_bundle(fit_nuisances(s.data, spec, MomentSpec.mean()), s.data.X, 0.4)
    assert np.array_equal(a.delta, b.delta) and np.array_equal(a.rho, b.rho)


def test_weak_iv_diagnostic_examples():
    d = generate(DgpSpec("paper_continuous", n=1000, seed=8)).data
    strong = fit_nuisances(None, oracle_spec(FlatOracle(0.4)), MomentSpec.mean())
    assert weak_iv_diagnostic(strong, d)["floored_fraction"] == 0.0
    flat = fit_nuisances(None, oracle_spec(FlatOracle(0.0)), MomentSpec.mean())
    assert weak_iv_diagnostic(flat, d)["floored_fraction"] == 1.0
    exact = fit_nuisances(None, oracle_spec(ContinuousOracle()), MomentSpec.mean(),
                          clip=ClipConfig(eps_deltaA=1e-3))
    rep = weak_iv_diagnostic(exact, d)
    assert rep["floored_fraction"] == 0.0 and rep["min_abs_deltaA"] > 1e-3

"""Data-generating processes, ground truth, and coverage experiments.

Three DGP families:

``paper_continuous``  X ~ U[0,1]^2, U ~ U[0,1], logistic Z | X, multiplicative
                      A | Z, X, U with the probability clamped at 1, Gaussian
                      counterfactual outcomes
``discrete_oracle``   finite atom table satisfying the multiplicative model
                      exactly; carries every enumeration check
``glim``              latent-index treatment models (multiplicative, additive,
                      monotonicity) for contrast experiments
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .dataset import Dataset, make_folds
from .eif import DiscreteLaw, LawOracle, aggregate, h_of_beta_exact, run_folds
from .errors import ConfigError, InvalidGlim, MivError
from .inference import GridSpec, grid_diagnostics, qtt_diagnostics, qtt_truth
from .learners import LearnerSpec
from .moments import MomentSpec, evaluate_m
from .nuisance import ClipConfig

DGP_KINDS = ("paper_continuous", "discrete_oracle", "glim")
GLIM_MODELS = ("multiplicative", "additive", "monotonicity")


# ---------------------------------------------------------------------------
# specs


def _per_x(value, nx: int, inner: int, name: str) -> np.ndarray:
    """Broadcast a shared or per-x table to shape (nx, inner)."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(inner, float(arr))
    if arr.ndim == 1:
        if arr.shape[0] != inner:
            raise ConfigError(f"{name} needs {inner} entries, got {arr.shape[0]}")
        arr = np.tile(arr, (nx, 1))
    if arr.shape != (nx, inner):
        raise ConfigError(f"{name} must have shape ({nx}, {inner}), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class DiscreteOracle:
    """Finite multiplicative-IV law.

    P(A=1 | Z=z, U=u, X=x) = g1(z, x) * g2(u, x), with U independent of Z given X.
    Outcomes: Y0 = b0 + bu*U + bx*X + E and Y1 = Y0 + tau + tau_u*U, where E is
    an independent noise atom. ``x_values=()`` means no covariates. Tables may be
    shared across x (flat) or given per x (nested).
    """

    x_values: tuple = ()
    x_prob: tuple = ()
    u_values: tuple = (0.0, 1.0)
    u_prob: tuple = (0.5, 0.5)
    pz: object = 0.5
    g1: tuple = (1.0, 0.5)
    g2: tuple = (0.8, 0.4)
    b0: float = 1.0
    bu: float = 1.0
    bx: float = 0.0
    tau: float = 1.0
    tau_u: float = 0.0
    e_values: tuple = (0.0,)
    e_prob: tuple = (1.0,)

    @property
    def nx(self) -> int:
        return max(1, len(self.x_values))

    def tables(self) -> dict:
        nx, nu = self.nx, len(self.u_values)
        px = np.asarray(self.x_prob if self.x_values else (1.0,), dtype=np.float64)
        if len(px) != nx:
            raise ConfigError("x_prob must match x_values")
        t = {
            "px": px,
            "pu": _per_x(self.u_prob, nx, nu, "u_prob"),
            "pz": np.broadcast_to(np.asarray(self.pz, dtype=np.float64), (nx,)).copy(),
            "g1": _per_x(self.g1, nx, 2, "g1"),
            "g2": _per_x(self.g2, nx, nu, "g2"),
            "pe": np.asarray(self.e_prob, dtype=np.float64),
        }
        for name in ("px", "pe"):
            if abs(t[name].sum() - 1.0) > 1e-12 or np.any(t[name] < 0):
                raise ConfigError(f"{name} must be a probability vector")
        if np.any(np.abs(t["pu"].sum(axis=1) - 1.0) > 1e-12) or np.any(t["pu"] < 0):
            raise ConfigError("u_prob rows must be probability vectors")
        if np.any(t["pz"] <= 0) or np.any(t["pz"] >= 1):
            raise ConfigError("pz must lie strictly inside (0, 1)")
        prod = t["g1"][:, :, None] * t["g2"][:, None, :]
        if np.any(prod < 0) or np.any(prod > 1):
            raise InvalidGlim("g1(z, x) * g2(u, x) must lie in [0, 1]")
        return t


@dataclass(frozen=True)
class GlimSpec:
    """Latent-index treatment model with U ~ U[0,1], one irrelevant covariate.

    multiplicative: P(A=1 | z, u) = g(z) * u
    additive:       P(A=1 | z, u) = (g(z) + u) / 2
    monotonicity:   A = 1{U <= g(z)}
    """

    model: str = "multiplicative"
    g: tuple = (0.5, 1.0)
    pz: float = 0.5
    tau: float = 1.0

    def __post_init__(self):
        if self.model not in GLIM_MODELS:
            raise ConfigError(f"unknown GLIM model {self.model!r}")
        g = np.asarray(self.g, dtype=np.float64)
        if g.shape != (2,):
            raise ConfigError("g takes one value per instrument arm")
        if self.model == "multiplicative" and (np.any(g < 0) or np.any(g > 1)):
            raise InvalidGlim("g(z) * u leaves [0, 1] for some u in [0, 1]", g=self.g)
        if self.model == "additive" and (np.any(g < 0) or np.any(g > 1)):
            raise InvalidGlim("(g(z) + u) / 2 leaves [0, 1] for some u in [0, 1]", g=self.g)


@dataclass(frozen=True)
class DgpSpec:
    kind: str = "paper_continuous"
    n: int = 1000
    seed: int = 0
    clamp: bool = True
    discrete: Optional[DiscreteOracle] = None
    glim: Optional[GlimSpec] = None

    def __post_init__(self):
        if self.kind not in DGP_KINDS:
            raise ConfigError(f"unknown DGP kind {self.kind!r}")
        if self.n < 1:
            raise ConfigError("n must be positive")
        if self.kind == "discrete_oracle" and self.discrete is None:
            object.__setattr__(self, "discrete", DiscreteOracle())
        if self.kind == "glim" and self.glim is None:
            object.__setattr__(self, "glim", GlimSpec())
        if self.kind == "discrete_oracle":
            self.discrete.tables()
        if self.kind == "paper_continuous" and not self.clamp:
            raise ConfigError("the continuous DGP's treatment probability exceeds 1 "
                              "without clamping")

    @classmethod
    def from_config(cls, cfg: dict) -> "DgpSpec":
        cfg = dict(cfg)
        kind = cfg.pop("kind", "paper_continuous")
        disc = cfg.pop("discrete", None)
        glim = cfg.pop("glim", None)
        extra = set(cfg) - {"n", "seed", "clamp"}
        if extra:
            raise ConfigError(f"unknown dgp options {sorted(extra)}")
        return cls(kind=kind,
                   discrete=None if disc is None else DiscreteOracle(**_tuplify(disc)),
                   glim=None if glim is None else GlimSpec(**_tuplify(glim)), **cfg)

    def to_config(self) -> dict:
        out = {"kind": self.kind, "n": self.n, "seed": self.seed}
        if self.kind == "discrete_oracle":
            out["discrete"] = asdict(self.discrete)
        if self.kind == "glim":
            out["glim"] = asdict(self.glim)
        return out


def _tuplify(d: dict) -> dict:
    def t(v):
        return tuple(t(x) for x in v) if isinstance(v, (list, tuple)) else v
    return {k: t(v) for k, v in d.items()}


def fine_lattice_oracle(points: int = 101, width: float = 1.0) -> DiscreteOracle:
    """Default law with uniform outcome noise on ``points`` lattice values.

    Y1 = Y0 + 1, so every treated quantile effect equals 1 and the direct
    quantile moment's root is beta* = -1.
    """
    e = tuple(np.round(np.linspace(-width / 2, width / 2, points), 12).tolist())
    return DiscreteOracle(e_values=e, e_prob=tuple([1.0 / points] * points))


def random_discrete_oracle(seed: int) -> DiscreteOracle:
    """A random valid law with two x-atoms, three u-values and lattice noise."""
    rng = np.random.default_rng(seed)
    nu = 3
    g1 = np.empty((2, 2))
    g1[:, 0] = rng.uniform(0.6, 1.0, size=2)
    g1[:, 1] = g1[:, 0] * rng.uniform(0.3, 0.6, size=2)   # keeps the instrument strong
    pu = rng.dirichlet(np.ones(nu) * 3, size=2)
    return DiscreteOracle(
        x_values=(0.0, 1.0),
        x_prob=tuple(rng.dirichlet([4.0, 4.0]).tolist()),
        u_values=(0.0, 0.5, 1.0),
        u_prob=tuple(map(tuple, pu.tolist())),
        pz=tuple(rng.uniform(0.3, 0.7, size=2).tolist()),
        g1=tuple(map(tuple, g1.tolist())),
        g2=tuple(map(tuple, rng.uniform(0.2, 1.0, size=(2, nu)).tolist())),
        b0=float(rng.normal()), bu=float(rng.uniform(0.5, 2.0)), bx=float(rng.normal()),
        tau=float(rng.normal()), tau_u=float(rng.normal(scale=0.5)),
        e_values=(-0.5, 0.0, 0.5), e_prob=(0.25, 0.5, 0.25),
    )


# ---------------------------------------------------------------------------
# exact law and oracle nuisances


def exact_law(spec) -> DiscreteLaw:
    """Full atom table of a discrete-oracle spec; observed Y by consistency."""
    disc = spec.discrete if isinstance(spec, DgpSpec) else spec
    if isinstance(spec, DgpSpec) and spec.kind != "discrete_oracle":
        raise ConfigError("exact_law needs a discrete_oracle spec")
    t = disc.tables()
    uv = np.asarray(disc.u_values, dtype=np.float64)
    ev = np.asarray(disc.e_values, dtype=np.float64)
    xv = np.asarray(disc.x_values if disc.x_values else (0.0,), dtype=np.float64)
    rows = []
    for ix in range(disc.nx):
        for iu in range(len(uv)):
            for z in (0, 1):
                pzv = t["pz"][ix] if z == 1 else 1.0 - t["pz"][ix]
                pa = t["g1"][ix, z] * t["g2"][ix, iu]
                for a in (0, 1):
                    pav = pa if a == 1 else 1.0 - pa
                    for ie in range(len(ev)):
                        y0 = disc.b0 + disc.bu * uv[iu] + disc.bx * xv[ix] + ev[ie]
                        y1 = y0 + disc.tau + disc.tau_u * uv[iu]
                        p = t["px"][ix] * t["pu"][ix, iu] * pzv * pav * t["pe"][ie]
                        rows.append((ix, uv[iu], z, a, y0, y1, p))
    r = np.asarray(rows, dtype=np.float64)
    prob = r[:, 6] / r[:, 6].sum()
    weak = bool(np.any(t["g1"][:, 1] == t["g1"][:, 0]))
    x_atoms = xv.reshape(-1, 1) if disc.x_values else np.zeros((1, 0))
    return DiscreteLaw(x_atoms, r[:, 0].astype(np.int64), r[:, 1], r[:, 2], r[:, 3],
                       r[:, 4], r[:, 5], prob,
                       flags={"multiplicative": True, "u_indep_z": True,
                              "weak_instrument": weak})


# Gauss-Legendre rule on [0, 1] for the continuous oracle
_GL_X, _GL_W = np.polynomial.legendre.leggauss(40)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


class ContinuousOracle:
    """Exact nuisances of the clamped continuous DGP, by quadrature over U.

    With c = s(x) z - x1 - x2/2, P(A=1 | z, x, u) = min(1, exp(c - u/3)). The
    kink sits at u = 3c, so each integral is split there.
    """

    @staticmethod
    def _c(z, X):
        x1, x2 = X[:, 0], X[:, 1]
        return (1 + x1 + x2 + 0.5 * x1 * x2) / 2 * z - x1 - 0.5 * x2

    def pi1(self, X):
        X = np.asarray(X, dtype=np.float64)
        return expit(-1 + 0.5 * X[:, 0] + X[:, 1])

    def lam(self, z, X):
        c = self._c(z, np.asarray(X, dtype=np.float64))
        a = np.clip(3 * c, 0.0, 1.0)
        return a + 3 * np.exp(c) * (np.exp(-a / 3) - np.exp(-1.0 / 3))

    def rho(self, X):
        p = self.pi1(X)
        return p * self.lam(1, X) + (1 - p) * self.lam(0, X)

    def _nodes(self, z, X):
        """Quadrature nodes u (n, 2Q) and weights, split at the kink."""
        c = self._c(z, X)
        a = np.clip(3 * c, 0.0, 1.0)[:, None]
        u = np.concatenate([a * _GL_X, a + (1 - a) * _GL_X], axis=1)
        w = np.concatenate([a * _GL_W, (1 - a) * _GL_W], axis=1)
        p = np.minimum(1.0, np.exp(c[:, None] - u / 3))
        return u, w, p

    def mu(self, z, beta, X, moment: MomentSpec):
        X = np.asarray(X, dtype=np.float64)
        u, w, p = self._nodes(z, X)
        m = (X[:, 0] + X[:, 1])[:, None] * np.exp((u + 0.5) / 5)
        if moment.kind == "mean":
            em = m - beta
        elif moment.kind == "quantile":
            em = norm.sf(beta - m) - moment.q
        elif moment.kind == "cdf":
            em = norm.cdf(moment.y0 - m) - beta
        else:
            raise ConfigError("continuous oracle supports built-in moments only")
        return np.sum(w * (1 - p) * em, axis=1)


def oracle_nuisances(spec: DgpSpec):
    if spec.kind == "discrete_oracle":
        return LawOracle(exact_law(spec))
    if spec.kind == "paper_continuous":
        return ContinuousOracle()
    raise ConfigError("no oracle nuisances for GLIM generators")


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True, eq=False)
class Simulated:
    data: Dataset
    u: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    clamp_rate: float = 0.0

    @property
    def latent(self) -> dict:
        return {"u": self.u, "y0": self.y0, "y1": self.y1}


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed))


def generate(spec: DgpSpec, n: Optional[int] = None, seed=None) -> Simulated:
    """Draw n rows; latent U and both counterfactuals are returned for oracle use."""
    n = spec.n if n is None else n
    rng = _rng(spec.seed if seed is None else seed)
    if spec.kind == "paper_continuous":
        return _gen_continuous(n, rng)
    if spec.kind == "discrete_oracle":
        return _gen_discrete(spec.discrete, n, rng)
    return _gen_glim(spec.glim, n, rng)


def _gen_continuous(n, rng) -> Simulated:
    X = rng.uniform(size=(n, 2))
    U = rng.uniform(size=n)
    x1, x2 = X[:, 0], X[:, 1]
    z = (rng.uniform(size=n) < expit(-1 + 0.5 * x1 + x2)).astype(np.int8)
    raw = np.exp((1 + x1 + x2 + 0.5 * x1 * x2) / 2 * z - x1 - 0.5 * x2 - U / 3)
    a = (rng.uniform(size=n) < np.minimum(raw, 1.0)).astype(np.int8)
    m1 = (x1 + x1 ** 2 / 3 + x2 + x1 * x2 + z) * np.exp(U / 3)
    y1 = m1 + rng.standard_normal(n)
    y0 = (x1 + x2) * np.exp((U + 0.5) / 5) + rng.standard_normal(n)
    y = np.where(a == 1, y1, y0)
    return Simulated(Dataset(X, z, a, y, ("x1", "x2")), U, y0, y1, float(np.mean(raw > 1.0)))


def _gen_discrete(disc: DiscreteOracle, n, rng) -> Simulated:
    law = exact_law(disc)
    idx = rng.choice(len(law.prob), size=n, p=law.prob)
    X = law.X[idx]
    return Simulated(Dataset(X, law.z[idx], law.a[idx], law.y[idx]), law.u[idx],
                     law.y0[idx], law.y1[idx])


def _gen_glim(g: GlimSpec, n, rng) -> Simulated:
    X = rng.uniform(size=(n, 1))
    U = rng.uniform(size=n)
    z = (rng.uniform(size=n) < g.pz).astype(np.int8)
    gz = np.asarray(g.g, dtype=np.float64)[z]
    eps = rng.uniform(size=n)
    if g.model == "multiplicative":
        a = eps < gz * U
    elif g.model == "additive":
        a = eps < (gz + U) / 2
    else:
        a = U <= gz
    a = a.astype(np.int8)
    y0 = U + rng.standard_normal(n)
    y1 = y0 + g.tau
    return Simulated(Dataset(X, z, a, np.where(a == 1, y1, y0)), U, y0, y1)


# ---------------------------------------------------------------------------
# ground truth


@dataclass(frozen=True)
class Truth:
    beta: float
    mc_se: float = 0.0
    method: str = "enumeration"
    mc_n: int = 0


def _functional_key(functional):
    if isinstance(functional, MomentSpec):
        return functional
    if isinstance(functional, str) and functional in ("qtt", "att"):
        return functional
    return MomentSpec.from_config(functional if isinstance(functional, dict)
                                  else {"functional": functional})


def oracle_truth(spec: DgpSpec, functional, mc_n: int = 5_000_000, seed: int = 20240229,
                 q: float = 0.5) -> Truth:
    """beta* for the treated counterfactual law: exact for discrete laws, else Monte Carlo."""
    f = _functional_key(functional)
    if spec.kind == "discrete_oracle":
        law = exact_law(spec)
        if f == "qtt":
            return Truth(qtt_truth(law, q)["beta"])
        if f == "att":
            w = law.prob * law.a
            return Truth(float(w @ (law.y1 - law.y0) / w.sum()))
        return Truth(_solve_discrete(law, f))
    return _mc_truth(spec, f, mc_n, seed, q)


def _solve_discrete(law: DiscreteLaw, m: MomentSpec) -> float:
    w = law.prob * law.a
    w = w / w.sum()
    if m.kind == "mean":
        return float(w @ law.y0)
    if m.kind == "cdf":
        return float(w @ (law.y0 <= m.y0))
    if m.kind == "quantile":
        # largest support point with P(Y0 >= b | A=1) >= q
        vals = np.unique(law.y0[w > 0])
        tail = np.array([w @ (law.y0 >= v) for v in vals])
        return float(vals[np.flatnonzero(tail >= m.q - 1e-12)[-1]])
    raise ConfigError("no closed-form truth for custom moments")


def _mc_truth(spec: DgpSpec, f, mc_n: int, seed: int, q: float) -> Truth:
    chunks, rng_seed = [], np.random.SeedSequence(seed)
    treated_y0, treated_y1 = [], []
    size = 1_000_000
    for i, child in enumerate(rng_seed.spawn((mc_n + size - 1) // size)):
        m = min(size, mc_n - i * size)
        s = generate(spec, n=m, seed=child)
        t = s.data.a == 1
        treated_y0.append(s.y0[t])
        treated_y1.append(s.y1[t])
    y0 = np.concatenate(treated_y0)
    y1 = np.concatenate(treated_y1)
    nt = len(y0)
    if f == "att":
        d = y1 - y0
        return Truth(float(d.mean()), float(d.std(ddof=1) / np.sqrt(nt)), "monte-carlo", mc_n)
    if f == "qtt":
        b = float(np.quantile(y0, q) - np.quantile(y1, q))
        return Truth(b, float("nan"), "monte-carlo", mc_n)
    if f.kind == "mean":
        return Truth(float(y0.mean()), float(y0.std(ddof=1) / np.sqrt(nt)), "monte-carlo", mc_n)
    if f.kind == "cdf":
        p = float(np.mean(y0 <= f.y0))
        return Truth(p, float(np.sqrt(p * (1 - p) / nt)), "monte-carlo", mc_n)
    if f.kind == "quantile":
        level = 1.0 - f.q   # P(Y0 >= b) = q  <=>  b is the (1-q) quantile
        b = float(np.quantile(y0, level))
        h = 1.06 * y0.std() * nt ** (-0.2)
        dens = np.mean(np.abs(y0 - b) <= h) / (2 * h)
        return Truth(b, float(np.sqrt(level * (1 - level) / nt) / dens), "monte-carlo", mc_n)
    raise ConfigError("no Monte Carlo truth for custom moments")


# ---------------------------------------------------------------------------
# coverage


@dataclass(frozen=True)
class CoverageConfig:
    dgp: DgpSpec = field(default_factory=DgpSpec)
    functional: object = "median"
    q: float = 0.5
    n_list: tuple = (1000,)
    alpha_list: tuple = (0.05,)
    reps: int = 100
    K: int = 2
    learner: LearnerSpec = field(default_factory=lambda: LearnerSpec("gbt"))
    grid: GridSpec = field(default_factory=lambda: GridSpec(-1.0, 3.0, 0.02))
    clip: ClipConfig = field(default_factory=ClipConfig)
    seed: int = 0
    convention: str = "chisq"
    mu_strategy: str = "auto"
    truth: Optional[float] = None
    mc_n: int = 5_000_000

    def __post_init__(self):
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.K < 2 or any(self.K > n for n in self.n_list):
            raise ConfigError(f"need 2 <= K <= n, got K={self.K}")
        if not self.alpha_list or any(not 0 < a < 1 for a in self.alpha_list):
            raise ConfigError("alpha values must lie in (0, 1)")
        object.__setattr__(self, "alpha_list", tuple(float(a) for a in self.alpha_list))
        object.__setattr__(self, "n_list", tuple(int(n) for n in self.n_list))

    @classmethod
    def from_config(cls, cfg: dict) -> "CoverageConfig":
        cfg = dict(cfg)
        dgp = DgpSpec.from_config(cfg.pop("dgp", {}))
        learner_cfg = cfg.pop("learner", {"learner": "gbt"})
        if isinstance(learner_cfg, str):
            learner_cfg = {"learner": learner_cfg}
        oracle = oracle_nuisances(dgp) if learner_cfg.get("learner") == "oracle" else None
        learner = LearnerSpec.from_config(learner_cfg, oracle)
        grid = GridSpec.from_config(cfg.pop("grid", {"lo": -1.0, "hi": 3.0, "step": 0.02}))
        clip = ClipConfig.from_config(cfg.pop("clip", None))
        for key in ("n_list", "alpha_list"):
            if key in cfg:
                cfg[key] = tuple(cfg[key])
        known = {f for f in cls.__dataclass_fields__} - {"dgp", "learner", "grid", "clip"}
        extra = set(cfg) - known
        if extra:
            raise ConfigError(f"unknown coverage options {sorted(extra)}")
        return cls(dgp=dgp, learner=learner, grid=grid, clip=clip, **cfg)

    def moment(self):
        f = self.functional
        if f == "qtt":
            return "qtt"
        if isinstance(f, MomentSpec):
            return f
        if isinstance(f, dict):
            return MomentSpec.from_config(f)
        return MomentSpec.from_config({"functional": f, "q": self.q})

    def to_config(self) -> dict:
        m = self.moment()
        return {
            "dgp": self.dgp.to_config(),
            "functional": "qtt" if m == "qtt" else m.to_config(),
            "n_list": list(self.n_list), "alpha_list": list(self.alpha_list),
            "reps": self.reps, "K": self.K, "learner": self.learner.to_config(),
            "grid": self.grid.to_config(), "seed": self.seed, "convention": self.convention,
            "mu_strategy": self.mu_strategy,
        }


def replicate_seed(master: int, n: int, i: int) -> np.random.SeedSequence:
    """Counter-derived seed for replicate ``i`` at sample size ``n``."""
    return np.random.SeedSequence([int(master), int(n), int(i)])


def _replicate(args):
    cfg, n, i, beta_star = args
    ss = replicate_seed(cfg.seed, n, i)
    data_seed, fold_seed = ss.spawn(2)
    try:
        sim = generate(cfg.dgp, n=n, seed=data_seed)
        plan = make_folds(n, cfg.K, int(fold_seed.generate_state(1)[0]))
        m = cfg.moment()
        if m == "qtt":
            diag = qtt_diagnostics(sim.data, plan, cfg.learner, cfg.clip, cfg.q, cfg.grid)
        else:
            diag = grid_diagnostics(sim.data, plan, cfg.learner, m, cfg.grid, cfg.clip,
                                    1, cfg.mu_strategy)
    except MivError as e:
        return [{"n": n, "rep": i, "alpha": a, "covered": 0, "empty": 0, "gridset": 0,
                 "width": float("nan"),
                 "lo": float("nan"), "hi": float("nan"), "error": type(e).__name__}
                for a in cfg.alpha_list]
    out = []
    for a in cfg.alpha_list:
        cs = diag.confidence_set(a, cfg.convention)
        iv = cs.interval
        # the reported set is the hull [min accepted, max accepted]
        out.append({"n": n, "rep": i, "alpha": a,
                    "covered": int(iv is not None and iv.contains(beta_star)),
                    "empty": int(cs.kind == "empty"), "width": iv.width if iv else float("nan"),
                    "gridset": int(cs.kind == "gridset"),
                    "lo": iv.lo if iv else float("nan"), "hi": iv.hi if iv else float("nan"),
                    "error": ""})
    return out


@dataclass(frozen=True, eq=False)
class CoverageReport:
    rows: list
    replicates: list
    beta_star: float
    beta_star_se: float
    config: dict
    runtime: float = 0.0

    def coverage(self, n: int, alpha: float) -> float:
        for r in self.rows:
            if r["n"] == n and r["alpha"] == alpha:
                return r["coverage"]
        raise KeyError((n, alpha))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["n", "alpha", "reps", "coverage", "mc_se", "mean_width", "empties"]
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["n"], repr(r["alpha"]), r["reps"], repr(r["coverage"]),
                        repr(r["mc_se"]), repr(r["mean_width"]), r["empties"]])
        return buf.getvalue()

    def replicates_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["n", "rep", "alpha", "covered", "empty", "gridset", "width", "lo", "hi", "error"]
        w.writerow(cols)
        for r in self.replicates:
            w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in cols])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"beta_star": self.beta_star, "beta_star_mc_se": self.beta_star_se,
                "rows": self.rows, "config": self.config,
                "failures": [r for r in self.replicates if r["error"]]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=True)


def _summarise(records: list, cfg: CoverageConfig) -> list:
    rows = []
    for n in cfg.n_list:
        for a in cfg.alpha_list:
            rs = [r for r in records if r["n"] == n and r["alpha"] == a]
            cov = sum(r["covered"] for r in rs) / len(rs)
            widths = [r["width"] for r in rs if not r["error"] and not r["empty"]]
            rows.append({"n": n, "alpha": a, "reps": len(rs), "coverage": cov,
                         "mc_se": float(np.sqrt(cov * (1 - cov) / len(rs))),
                         "mean_width": float(np.mean(widths)) if widths else float("nan"),
                         "empties": sum(r["empty"] for r in rs),
                         "gridsets": sum(r["gridset"] for r in rs),
                         "failures": sum(1 for r in rs if r["error"])})
    return rows


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("MIVINFER_WORKERS", "1")))
    except ValueError:
        raise ConfigError("MIVINFER_WORKERS must be an integer") from None


def coverage_experiment(cfg: CoverageConfig, workers: Optional[int] = None,
                        progress=None) -> CoverageReport:
    """Replicate generate -> invert -> check coverage for every (n, alpha).

    Replicate seeds come from (master seed, n, index), so output does not depend
    on the worker count or the order replicates finish in.
    """
    t0 = time.perf_counter()
    workers = default_workers() if workers is None else workers
    if cfg.truth is not None:
        truth = Truth(float(cfg.truth), 0.0, "given")
    else:
        truth = oracle_truth(cfg.dgp, cfg.moment(), cfg.mc_n, q=cfg.q)
    jobs = [(cfg, n, i, truth.beta) for n in cfg.n_list for i in range(cfg.reps)]
    records = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for j, res in enumerate(ex.map(_replicate, jobs, chunksize=4)):
                records.extend(res)
                if progress:
                    progress(j + 1, len(jobs))
    else:
        for j, job in enumerate(jobs):
            records.extend(_replicate(job))
            if progress:
                progress(j + 1, len(jobs))
    return CoverageReport(_summarise(records, cfg), records, truth.beta, truth.mc_se,
                          cfg.to_config(), time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# sampling distribution of the standardised estimator


def standardized_estimates(spec: DgpSpec, moment: MomentSpec, beta: float, n: int,
                           reps: int, K: int = 2, seed: int = 0,
                           learner: Optional[LearnerSpec] = None) -> np.ndarray:
    """sqrt(n) (theta_hat - h) / sigma_hat over ``reps`` fresh samples (oracle by default)."""
    if learner is None:
        learner = LearnerSpec("oracle", oracle=oracle_nuisances(spec))
    h = h_of_beta_exact(exact_law(spec), moment, beta)
    out = np.empty(reps)
    for i in range(reps):
        data_seed, fold_seed = replicate_seed(seed, n, i).spawn(2)
        sim = generate(spec, n=n, seed=data_seed)
        plan = make_folds(n, K, int(fold_seed.generate_state(1)[0]))
        folds = run_folds(sim.data, plan, learner, moment, [beta])
        r = aggregate(folds, [beta], n)[0]
        out[i] = np.sqrt(n) * (r.theta - h) / r.sigma
    return out


def true_score_variance(spec: DgpSpec, moment: MomentSpec, beta: float,
                        mc_n: int = 2_000_000, seed: int = 7) -> float:
    """Var_P of the influence function under oracle nuisances (exact or Monte Carlo)."""
    from .eif import eif_scores
    if spec.kind == "discrete_oracle":
        law = exact_law(spec)
        t = law.true_nuisances(moment, beta)
        psi = eif_scores(law.z, law.a, law.y, t.point(law.x_index), beta, moment)
        h = law.expect(psi)
        return float(law.expect((psi - h) ** 2))
    orc = oracle_nuisances(spec)
    sim = generate(spec, n=mc_n, seed=seed)
    d = sim.data
    lam0, lam1 = orc.lam(0, d.X), orc.lam(1, d.X)
    from .nuisance import NuisanceAtPoint
    mu0, mu1 = orc.mu(0, beta, d.X, moment), orc.mu(1, beta, d.X, moment)
    dA = lam1 - lam0
    nu = NuisanceAtPoint(orc.rho(d.X), orc.pi1(d.X), lam0, lam1, mu0, mu1, dA, (mu1 - mu0) / dA)
    psi = eif_scores(d.z, d.a, d.y, nu, beta, moment)
    return float(np.var(psi))


def reference_laws() -> dict:
    """Default discrete law plus three variants used by the enumeration checks."""
    return {
        "default": DiscreteOracle(),
        "skewed": DiscreteOracle(u_prob=(0.3, 0.7), pz=0.4, g1=(0.9, 0.3), g2=(0.7, 0.5),
                                 tau_u=0.5, e_values=(-0.25, 0.0, 0.25),
                                 e_prob=(0.2, 0.5, 0.3)),
        "covariate": random_discrete_oracle(1),
        "lattice": fine_lattice_oracle(11),
    }


def strong_instrument_oracle() -> DiscreteOracle:
    """Default law with |lam1 - lam0| = 0.6, for finite-perturbation checks."""
    return DiscreteOracle(g1=(0.2, 1.0), g2=(0.9, 0.6))

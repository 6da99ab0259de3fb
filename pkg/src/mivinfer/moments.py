"""Moment functions M(y, beta) whose treated-counterfactual mean defines the target.

Built-ins are scalar (d = 1):

* ``mean``      M = y - beta                 (beta* = E[Y0 | A=1])
* ``quantile``  M = 1{y >= beta} - q         (beta* solves P(Y0 >= beta | A=1) = q)
* ``cdf``       M = 1{y <= y0} - beta        (beta* = P(Y0 <= y0 | A=1))

Note that ``quantile`` with level q targets the point with upper-tail mass q,
which is the median at q = 0.5. Custom moments take a callable returning
shape (..., d) and must declare a bound on |M|.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, NotDecomposable, UnboundedCustomMoment

KINDS = ("mean", "quantile", "cdf", "custom")


@dataclass(frozen=True)
class MomentSpec:
    kind: str
    q: float = 0.5
    y0: float = 0.0
    func: Optional[Callable] = None
    d: int = 1
    bound: float = np.inf

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown moment kind {self.kind!r}")
        if self.kind == "quantile" and not 0.0 < self.q < 1.0:
            raise ConfigError(f"quantile level must lie in (0, 1), got {self.q}")
        if self.kind == "custom":
            if self.func is None:
                raise ConfigError("custom moment needs a callable")
            if not np.isfinite(self.bound):
                raise ConfigError("custom moment must declare a finite bound")
        elif self.d != 1:
            raise ConfigError("built-in moments are scalar (d = 1)")

    @classmethod
    def mean(cls) -> "MomentSpec":
        return cls("mean")

    @classmethod
    def quantile(cls, q: float = 0.5) -> "MomentSpec":
        return cls("quantile", q=q)

    @classmethod
    def cdf_at(cls, y0: float) -> "MomentSpec":
        return cls("cdf", y0=y0)

    @classmethod
    def custom(cls, func: Callable, d: int = 1, bound: float = 1.0) -> "MomentSpec":
        return cls("custom", func=func, d=d, bound=bound)

    @classmethod
    def from_config(cls, cfg: dict) -> "MomentSpec":
        name = cfg.get("functional", "mean")
        if name in ("mean", "att"):
            return cls.mean()
        if name in ("quantile", "median", "qtt"):
            return cls.quantile(float(cfg.get("q", 0.5)))
        if name == "cdf":
            if "y0" not in cfg:
                raise ConfigError("functional 'cdf' needs 'y0'")
            return cls.cdf_at(float(cfg["y0"]))
        raise ConfigError(f"unknown functional {name!r}")

    def to_config(self) -> dict:
        if self.kind == "quantile":
            return {"functional": "quantile", "q": self.q}
        if self.kind == "cdf":
            return {"functional": "cdf", "y0": self.y0}
        return {"functional": self.kind}


def evaluate_m(spec: MomentSpec, y, beta):
    """M(y, beta). Scalar ``y`` gives a float for built-ins; arrays broadcast."""
    y = np.asarray(y, dtype=np.float64)
    if spec.kind == "mean":
        out = y - beta
    elif spec.kind == "quantile":
        out = (y >= beta).astype(np.float64) - spec.q
    elif spec.kind == "cdf":
        out = (y <= spec.y0).astype(np.float64) - beta
    else:
        out = np.asarray(spec.func(y, beta), dtype=np.float64)
        if np.any(np.abs(out) > spec.bound):
            raise UnboundedCustomMoment(
                f"|M| = {np.max(np.abs(out)):.6g} exceeds declared bound {spec.bound}")
    return out[()] if out.ndim == 0 else out


def regression_target(spec: MomentSpec, y, a, beta):
    """M(y, beta) * (1 - a): the response regressed on X within each instrument arm."""
    m = evaluate_m(spec, y, beta)
    w = 1.0 - np.asarray(a, dtype=np.float64)
    if spec.d > 1 or np.ndim(m) > np.ndim(w):
        w = w[..., None]
    out = m * w
    return out[()] if np.ndim(out) == 0 else out


def as_columns(spec: MomentSpec, values) -> np.ndarray:
    """Reshape moment output to (n, d)."""
    v = np.asarray(values, dtype=np.float64)
    return v.reshape(-1, spec.d)


@dataclass(frozen=True)
class AffineDecomposition:
    """M(y, beta)(1-a) = base(y)(1-a) + slope * beta * (1-a), when ``exists``."""

    exists: bool
    slope: float = 0.0
    base: Optional[Callable] = None

    def shift(self, beta) -> float:
        return self.slope * beta


def affine_decomposition(spec: MomentSpec) -> AffineDecomposition:
    if spec.kind == "mean":
        return AffineDecomposition(True, -1.0, lambda y: np.asarray(y, dtype=np.float64))
    if spec.kind == "cdf":
        y0 = spec.y0
        return AffineDecomposition(True, -1.0, lambda y: (np.asarray(y) <= y0).astype(np.float64))
    if spec.kind == "quantile":
        return AffineDecomposition(False)
    raise NotDecomposable("custom moments have no declared affine decomposition")

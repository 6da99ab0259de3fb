"""Batch command-line front end.

    mivinfer analyze  --config c.json [--alpha 0.1] [--out dir] [--data file.csv]
    mivinfer simulate --config c.json [--out dir] [--seed s]
    mivinfer coverage --config c.json [--out dir] [--workers k]
    mivinfer selftest

A JSON config holds every setting; flags override it. Exit codes: 0 ok,
2 configuration error, 3 data error, 4 numerical failure. Errors are written
to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .dataset import Schema, load_csv, make_folds
from .errors import ConfigError, MivError
from .inference import (
    CONVENTIONS,
    GridSpec,
    att_estimate,
    invert_functional,
    qtt_direct_moment,
)
from .learners import LearnerSpec
from .moments import MomentSpec
from .nuisance import ClipConfig
from .selftest import run_selftest
from .sim import CoverageConfig, DgpSpec, coverage_experiment, default_workers, generate


@dataclass
class RunConfig:
    """Settings for ``analyze``; every field may come from JSON or a flag."""

    data: Optional[str] = None
    schema: dict = field(default_factory=dict)
    functional: dict = field(default_factory=lambda: {"functional": "mean"})
    grid: Optional[dict] = None
    K: int = 2
    alpha: float = 0.05
    learner: dict = field(default_factory=lambda: {"learner": "gbt"})
    clip: dict = field(default_factory=dict)
    seed: int = 0
    convention: str = "normal-paper"
    refine: int = 0
    mu_strategy: str = "auto"
    out: str = "out"

    @classmethod
    def from_dict(cls, cfg: dict) -> "RunConfig":
        cfg = dict(cfg)
        cfg.pop("command", None)
        if isinstance(cfg.get("functional"), str):
            cfg["functional"] = {"functional": cfg["functional"]}
        if isinstance(cfg.get("learner"), str):
            cfg["learner"] = {"learner": cfg["learner"]}
        extra = set(cfg) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        rc = cls(**cfg)
        rc.validate()
        return rc

    def validate(self) -> None:
        if self.data is None:
            raise ConfigError("no input data: set 'data' in the config or pass --data")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.K < 2:
            raise ConfigError(f"K must be at least 2, got {self.K}")
        if self.convention not in CONVENTIONS:
            raise ConfigError(f"unknown convention {self.convention!r}")
        name = self.functional.get("functional", "mean")
        if name not in ("att", "qtt") and self.grid is None:
            raise ConfigError(f"functional {name!r} needs a 'grid'")
        if name == "qtt" and self.grid is None:
            raise ConfigError("functional 'qtt' needs a 'grid'")
        ClipConfig.from_config(self.clip)
        LearnerSpec.from_config(self.learner)
        if self.grid is not None:
            GridSpec.from_config(self.grid)


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from None


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def _back_transform(iv):
    return None if iv is None else [math.expm1(iv[0]), math.expm1(iv[1])]


def analyze(rc: RunConfig, workers: int = 1) -> dict:
    """Run the configured analysis; returns the report and the per-beta CSV text."""
    schema = Schema.from_dict(rc.schema)
    d = load_csv(rc.data, schema)
    plan = make_folds(d.n, rc.K, rc.seed)
    learner = LearnerSpec.from_config(rc.learner)
    clip = ClipConfig.from_config(rc.clip)
    name = rc.functional.get("functional", "mean")
    caught = []
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        per_beta = ""
        if name == "att":
            res = att_estimate(d, plan, learner, clip, rc.alpha, rc.convention, workers)
            report = res.to_dict()
            if rc.grid is not None:
                cs = invert_functional(d, plan, learner, MomentSpec.mean(), rc.grid, rc.alpha,
                                       clip, rc.convention, workers)
                report["counterfactual_mean_set"] = cs.to_dict()
                per_beta = cs.per_beta_csv()
        elif name == "qtt":
            q = float(rc.functional.get("q", 0.5))
            cs = qtt_direct_moment(d, plan, learner, clip, q, rc.grid, rc.alpha, rc.convention)
            report, per_beta = cs.to_dict(), cs.per_beta_csv()
        else:
            moment = MomentSpec.from_config(rc.functional)
            cs = invert_functional(d, plan, learner, moment, rc.grid, rc.alpha, clip,
                                   rc.convention, workers, rc.mu_strategy, rc.refine)
            report, per_beta = cs.to_dict(), cs.per_beta_csv()
            if schema.transform == "log1p" and moment.kind in ("mean", "quantile"):
                report["interval_original_scale"] = _back_transform(report["interval"])
        caught = [str(x.message) for x in w]
    report["transform"] = schema.transform
    report["n"] = d.n
    report["K"] = rc.K
    report["seed"] = rc.seed
    report["learner"] = learner.to_config()
    report["runtime_warnings"] = sorted(set(caught))
    return {"report": report, "per_beta_csv": per_beta}


def cmd_analyze(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    for key in ("alpha", "seed", "data", "out", "convention"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    rc = RunConfig.from_dict(cfg)
    out = analyze(rc, args.workers or default_workers())
    outdir = Path(rc.out)
    _write(outdir / "report.json", _dumps(out["report"]))
    if out["per_beta_csv"]:
        _write(outdir / "per_beta.csv", out["per_beta_csv"])
    iv = out["report"].get("interval")
    print(f"wrote {outdir / 'report.json'}; interval = {iv}")
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    dgp_cfg = dict(cfg.get("dgp", cfg))
    if args.seed is not None:
        dgp_cfg["seed"] = args.seed
    spec = DgpSpec.from_config(dgp_cfg)
    sim = generate(spec)
    outdir = Path(args.out or cfg.get("out", "out"))
    outdir.mkdir(parents=True, exist_ok=True)
    sim.data.to_csv(outdir / "data.csv")
    lines = ["u,y0,y1"] + [f"{u!r},{a!r},{b!r}" for u, a, b in
                           zip(sim.u.tolist(), sim.y0.tolist(), sim.y1.tolist())]
    _write(outdir / "latent.csv", "\n".join(lines) + "\n")
    _write(outdir / "simulate.json", _dumps({"dgp": spec.to_config(),
                                             "clamp_rate": sim.clamp_rate}))
    print(f"wrote {spec.n} rows to {outdir / 'data.csv'} (clamp rate {sim.clamp_rate:.4f})")
    return 0


def cmd_coverage(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    out = args.out or cfg.pop("out", "out")
    cfg.pop("out", None)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.alpha is not None:
        cfg["alpha_list"] = [args.alpha]
    cc = CoverageConfig.from_config(cfg)
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = coverage_experiment(cc, workers=args.workers or default_workers())
    outdir = Path(out)
    _write(outdir / "coverage.csv", rep.to_csv())
    _write(outdir / "coverage.json", rep.to_json() + "\n")
    _write(outdir / "replicates.csv", rep.replicates_csv())
    print(rep.to_csv(), end="")
    print(f"runtime {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 0


def cmd_selftest(args) -> int:
    t0 = time.perf_counter()
    checks = run_selftest(corrupt_sign=args.corrupt_sign)
    for c in checks:
        print(c.line())
    ok = all(c.passed for c in checks)
    print(f"{'all checks passed' if ok else 'SELFTEST FAILED'} "
          f"({time.perf_counter() - t0:.2f}s)")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mivinfer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mivinfer {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, alpha=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help="default: $MIVINFER_WORKERS or 1")
        if alpha:
            sp.add_argument("--alpha", type=float)

    a = sub.add_parser("analyze", help="confidence set for a functional from a CSV")
    common(a)
    a.add_argument("--data", help="input CSV (overrides config)")
    a.add_argument("--convention", choices=CONVENTIONS)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="draw a dataset from a DGP")
    common(s, alpha=False)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("coverage", help="coverage experiment")
    common(c)
    c.set_defaults(func=cmd_coverage)

    t = sub.add_parser("selftest", help="enumeration-oracle checks")
    t.add_argument("--corrupt-sign", action="store_true", help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MivError as e:
        print(json.dumps(e.to_dict(), sort_keys=True), file=sys.stderr)
        return e.exit_code

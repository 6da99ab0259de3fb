"""Observed-data container, CSV ingestion and fold partitions for cross-fitting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    InvalidFoldCount,
    MissingColumn,
    NegativeOutcomeForLog1p,
    NonBinaryColumn,
    NonFiniteValue,
    NoTreatedUnits,
)


@dataclass(frozen=True)
class Observation:
    x: np.ndarray
    z: int
    a: int
    y: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented table of observations O = (X, Z, A, Y).

    ``X`` is (n, p) and may have p = 0. ``z`` and ``a`` are int8 arrays of
    0/1 values, ``y`` is float64.
    """

    X: np.ndarray
    z: np.ndarray
    a: np.ndarray
    y: np.ndarray
    covariate_names: tuple = ()

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else X.reshape(len(self.y), 0)
        object.__setattr__(self, "X", np.ascontiguousarray(X))
        object.__setattr__(self, "z", np.asarray(self.z, dtype=np.int8))
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.int8))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))
        n = len(self.y)
        if n < 1:
            raise ConfigError("a dataset needs at least one row")
        if not (len(self.z) == len(self.a) == self.X.shape[0] == n):
            raise ConfigError("column lengths differ")
        for name in ("z", "a"):
            col = getattr(self, name)
            bad = np.flatnonzero((col != 0) & (col != 1))
            if bad.size:
                raise NonBinaryColumn(f"column {name!r} is not binary", row=int(bad[0]))
        for name, col in (("y", self.y), ("X", self.X)):
            bad = ~np.isfinite(col)
            if bad.any():
                row = int(np.flatnonzero(bad.reshape(n, -1).any(axis=1))[0])
                raise NonFiniteValue(f"non-finite value in {name}", row=row)
        if not self.covariate_names:
            names = tuple(f"x{j + 1}" for j in range(self.X.shape[1]))
            object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield Observation(self.X[i], int(self.z[i]), int(self.a[i]), float(self.y[i]))

    @property
    def rows(self) -> list[Observation]:
        return list(self)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.z[idx], self.a[idx], self.y[idx], self.covariate_names)

    def to_csv(self, path, outcome="y", treatment="a", instrument="z") -> None:
        header = [outcome, treatment, instrument, *self.covariate_names]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(self.n):
                w.writerow([repr(float(self.y[i])), int(self.a[i]), int(self.z[i]),
                            *(repr(float(v)) for v in self.X[i])])


@dataclass(frozen=True)
class Schema:
    outcome: str = "y"
    treatment: str = "a"
    instrument: str = "z"
    covariates: tuple = ()
    covariate_prefix: str | None = None
    transform: str = "none"

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        cov = d.get("covariates", ())
        prefix = d.get("covariate_prefix")
        if isinstance(cov, str):
            prefix, cov = cov, ()
        transform = d.get("transform", "none") or "none"
        if transform not in ("none", "log1p"):
            raise ConfigError(f"unknown transform {transform!r}")
        return cls(
            outcome=d.get("outcome", "y"),
            treatment=d.get("treatment", "a"),
            instrument=d.get("instrument", "z"),
            covariates=tuple(cov),
            covariate_prefix=prefix,
            transform=transform,
        )


def load_csv(path, schema: Schema | dict | None = None, transform: str | None = None) -> Dataset:
    """Read a headered UTF-8 CSV into a :class:`Dataset`.

    Columns are located by name. Covariates are the explicit ``covariates``
    list, or every column starting with ``covariate_prefix``. With
    ``transform="log1p"`` the outcome becomes log(1 + y).
    """
    if schema is None:
        schema = Schema()
    elif isinstance(schema, dict):
        schema = Schema.from_dict(schema)
    transform = transform or schema.transform
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}", path=str(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumn("empty CSV (no header row)") from None
        body = [row for row in reader if row]

    if schema.covariates:
        cov = list(schema.covariates)
    elif schema.covariate_prefix:
        cov = [h for h in header if h.startswith(schema.covariate_prefix)]
    else:
        cov = []
    needed = [schema.outcome, schema.treatment, schema.instrument, *cov]
    for name in needed:
        if name not in header:
            raise MissingColumn(f"column {name!r} not found", column=name, path=str(path))
    pos = {h: i for i, h in enumerate(header)}

    n = len(body)
    if n == 0:
        raise ConfigError("CSV has a header but no rows", path=str(path))
    cols = {}
    for name in needed:
        j = pos[name]
        vals = np.empty(n)
        for i, row in enumerate(body):
            # data rows are 1-based after the header line
            try:
                cell = row[j].strip()
                vals[i] = float(cell) if cell != "" else math.nan
            except (ValueError, IndexError):
                raise NonFiniteValue(f"unparseable value in column {name!r}",
                                     row=i + 1, column=name) from None
            if not math.isfinite(vals[i]):
                raise NonFiniteValue(f"missing or non-finite value in column {name!r}",
                                     row=i + 1, column=name)
        cols[name] = vals
    for name in (schema.treatment, schema.instrument):
        bad = np.flatnonzero((cols[name] != 0) & (cols[name] != 1))
        if bad.size:
            raise NonBinaryColumn(f"column {name!r} must be 0/1", row=int(bad[0]) + 1, column=name)

    y = cols[schema.outcome]
    if transform == "log1p":
        bad = np.flatnonzero(y < 0)
        if bad.size:
            raise NegativeOutcomeForLog1p(f"negative outcome {y[bad[0]]!r}", row=int(bad[0]) + 1)
        y = np.log1p(y)
    X = np.column_stack([cols[c] for c in cov]) if cov else np.empty((n, 0))
    return Dataset(X, cols[schema.instrument], cols[schema.treatment], y, tuple(cov))


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Partition of ``range(n)`` into K balanced folds."""

    K: int
    assignment: np.ndarray
    seed: int
    folds: tuple = field(repr=False, default=())

    @property
    def n(self) -> int:
        return len(self.assignment)

    def train_test(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        test = self.folds[k]
        return np.flatnonzero(self.assignment != k), test


def make_folds(n: int, K: int, seed: int) -> FoldPlan:
    """Seeded shuffle of ``range(n)`` cut into K contiguous blocks.

    Sizes differ by at most one; the first ``n % K`` folds get the extra row.
    """
    if not (2 <= K <= n):
        raise InvalidFoldCount(f"need 2 <= K <= n, got K={K}, n={n}", K=K, n=n)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))
    perm = rng.permutation(n)
    sizes = np.full(K, n // K)
    sizes[: n % K] += 1
    assignment = np.empty(n, dtype=np.int64)
    folds = []
    start = 0
    for k, s in enumerate(sizes):
        block = np.sort(perm[start:start + s])
        assignment[block] = k
        folds.append(block)
        start += s
    return FoldPlan(K, assignment, int(seed), tuple(folds))


def empirical_treated_fraction(d: Dataset) -> float:
    frac = float(np.mean(d.a))
    if frac == 0.0:
        raise NoTreatedUnits("no treated units (all A = 0)")
    return frac


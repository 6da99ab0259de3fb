"""Hot numeric kernels: histogram-based gradient boosting of shallow trees.

Every boosted model here uses squared loss, a mean initialisation and
complete binary trees of fixed depth grown level by level on pre-binned
features. A node that finds no admissible split sends every row left, so its
right subtree is never reached.

Two implementations produce the same numbers (same summation order):
``_fit_numba``/``_predict_numba`` compiled with numba, and
``_fit_numpy``/``_predict_numpy`` written with ``np.bincount``. ``fit_trees``
and ``predict_trees`` dispatch on :data:`mivinfer._backend.USE_NUMBA`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._backend import USE_NUMBA, jit


@dataclass(frozen=True)
class Binner:
    """Per-feature quantile cut points learned from training covariates."""

    edges: tuple
    n_bins: int

    @classmethod
    def fit(cls, X: np.ndarray, max_bins: int = 32) -> "Binner":
        X = np.asarray(X, dtype=np.float64)
        levels = np.linspace(0.0, 1.0, max_bins + 1)[1:-1]
        edges = []
        for j in range(X.shape[1]):
            cuts = np.unique(np.quantile(X[:, j], levels)) if X.shape[0] else np.empty(0)
            edges.append(cuts)
        n_bins = 1 + max((len(e) for e in edges), default=0)
        return cls(tuple(edges), n_bins)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(X.shape, dtype=np.int32)
        for j, e in enumerate(self.edges):
            out[:, j] = np.searchsorted(e, X[:, j], side="right")
        return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# numba


@jit
def _fit_numba(Xb, Y, init, n_bins, rounds, depth, lr, min_leaf):
    n, p = Xb.shape
    T = Y.shape[1]
    n_int = (1 << depth) - 1
    n_leaf = 1 << depth
    feat = np.full((T, rounds, max(n_int, 1)), -1, dtype=np.int32)
    thr = np.zeros((T, rounds, max(n_int, 1)), dtype=np.int32)
    leaf = np.zeros((T, rounds, n_leaf), dtype=np.float64)
    F = np.empty(n)
    res = np.empty(n)
    node = np.empty(n, dtype=np.int64)
    hsum = np.empty((n_leaf, p, n_bins))
    hcnt = np.empty((n_leaf, p, n_bins), dtype=np.int64)
    lsum = np.empty(n_leaf)
    lcnt = np.empty(n_leaf, dtype=np.int64)
    for t in range(T):
        for i in range(n):
            F[i] = init[t]
        for r in range(rounds):
            for i in range(n):
                res[i] = Y[i, t] - F[i]
                node[i] = 0
            for lev in range(depth):
                nn = 1 << lev
                base = nn - 1
                for j in range(nn):
                    for f in range(p):
                        for b in range(n_bins):
                            hsum[j, f, b] = 0.0
                            hcnt[j, f, b] = 0
                for i in range(n):
                    j = node[i]
                    for f in range(p):
                        b = Xb[i, f]
                        hsum[j, f, b] += res[i]
                        hcnt[j, f, b] += 1
                for j in range(nn):
                    tot = 0.0
                    cnt = 0
                    for b in range(n_bins):
                        tot += hsum[j, 0, b]
                        cnt += hcnt[j, 0, b]
                    best = 0.0
                    bf = -1
                    bb = 0
                    if cnt >= 2 * min_leaf:
                        parent = tot * tot / cnt
                        for f in range(p):
                            sl = 0.0
                            cl = 0
                            for b in range(n_bins - 1):
                                sl += hsum[j, f, b]
                                cl += hcnt[j, f, b]
                                cr = cnt - cl
                                if cl < min_leaf or cr < min_leaf:
                                    continue
                                sr = tot - sl
                                gain = sl * sl / cl + sr * sr / cr - parent
                                if gain > best:
                                    best = gain
                                    bf = f
                                    bb = b
                    feat[t, r, base + j] = bf
                    thr[t, r, base + j] = bb
                for i in range(n):
                    g = base + node[i]
                    f = feat[t, r, g]
                    right = 0
                    if f >= 0 and Xb[i, f] > thr[t, r, g]:
                        right = 1
                    node[i] = 2 * node[i] + right
            for j in range(n_leaf):
                lsum[j] = 0.0
                lcnt[j] = 0
            for i in range(n):
                lsum[node[i]] += res[i]
                lcnt[node[i]] += 1
            for j in range(n_leaf):
                if lcnt[j] > 0:
                    leaf[t, r, j] = lr * (lsum[j] / lcnt[j])
            for i in range(n):
                F[i] += leaf[t, r, node[i]]
    return feat, thr, leaf


@jit
def _predict_numba(Xb, init, feat, thr, leaf, depth):
    n = Xb.shape[0]
    T, rounds = leaf.shape[0], leaf.shape[1]
    out = np.empty((n, T))
    for t in range(T):
        for i in range(n):
            acc = init[t]
            for r in range(rounds):
                j = 0
                for lev in range(depth):
                    g = (1 << lev) - 1 + j
                    f = feat[t, r, g]
                    right = 0
                    if f >= 0 and Xb[i, f] > thr[t, r, g]:
                        right = 1
                    j = 2 * j + right
                acc += leaf[t, r, j]
            out[i, t] = acc
    return out


# ---------------------------------------------------------------------------
# numpy fallback


def _fit_numpy(Xb, Y, init, n_bins, rounds, depth, lr, min_leaf):
    n, p = Xb.shape
    T = Y.shape[1]
    n_int = (1 << depth) - 1
    n_leaf = 1 << depth
    feat = np.full((T, rounds, max(n_int, 1)), -1, dtype=np.int32)
    thr = np.zeros((T, rounds, max(n_int, 1)), dtype=np.int32)
    leaf = np.zeros((T, rounds, n_leaf), dtype=np.float64)
    rows = np.arange(n)
    fcol = np.arange(p)
    for t in range(T):
        F = np.full(n, init[t])
        for r in range(rounds):
            res = Y[:, t] - F
            node = np.zeros(n, dtype=np.int64)
            for lev in range(depth):
                nn = 1 << lev
                base = nn - 1
                # row-major (i, f) order matches the compiled accumulation
                idx = ((node[:, None] * p + fcol[None, :]) * n_bins + Xb).ravel()
                size = nn * p * n_bins
                hsum = np.bincount(idx, weights=np.repeat(res, p), minlength=size)
                hcnt = np.bincount(idx, minlength=size)
                hsum = hsum.reshape(nn, p, n_bins)
                hcnt = hcnt.reshape(nn, p, n_bins)
                for j in range(nn):
                    tot = 0.0
                    for b in range(n_bins):
                        tot += hsum[j, 0, b]
                    cnt = int(hcnt[j, 0].sum())
                    bf, bb = -1, 0
                    if cnt >= 2 * min_leaf and n_bins > 1:
                        parent = tot * tot / cnt
                        sl = np.cumsum(hsum[j, :, :-1], axis=1)
                        cl = np.cumsum(hcnt[j, :, :-1], axis=1)
                        cr = cnt - cl
                        ok = (cl >= min_leaf) & (cr >= min_leaf)
                        with np.errstate(divide="ignore", invalid="ignore"):
                            gain = sl * sl / cl + (tot - sl) ** 2 / cr - parent
                        gain = np.where(ok, gain, 0.0)
                        k = int(np.argmax(gain))
                        if gain.flat[k] > 0.0:
                            bf, bb = divmod(k, n_bins - 1)
                    feat[t, r, base + j] = bf
                    thr[t, r, base + j] = bb
                g = base + node
                f = feat[t, r, g]
                right = (f >= 0) & (Xb[rows, np.maximum(f, 0)] > thr[t, r, g])
                node = 2 * node + right
            lsum = np.bincount(node, weights=res, minlength=n_leaf)
            lcnt = np.bincount(node, minlength=n_leaf)
            nz = lcnt > 0
            leaf[t, r, nz] = lr * (lsum[nz] / lcnt[nz])
            F = F + leaf[t, r, node]
    return feat, thr, leaf


def _predict_numpy(Xb, init, feat, thr, leaf, depth):
    n = Xb.shape[0]
    T, rounds = leaf.shape[0], leaf.shape[1]
    out = np.empty((n, T))
    rows = np.arange(n)
    for t in range(T):
        acc = np.full(n, init[t])
        for r in range(rounds):
            j = np.zeros(n, dtype=np.int64)
            for lev in range(depth):
                g = (1 << lev) - 1 + j
                f = feat[t, r, g]
                right = (f >= 0) & (Xb[rows, np.maximum(f, 0)] > thr[t, r, g])
                j = 2 * j + right
            acc = acc + leaf[t, r, j]
        out[:, t] = acc
    return out


# ---------------------------------------------------------------------------


def fit_trees(Xb, Y, init, n_bins, rounds, depth, lr, min_leaf, *, use_numba=None):
    """Boost ``rounds`` depth-``depth`` trees for every column of ``Y``.

    ``Xb`` is the (n, p) int32 bin matrix from :class:`Binner`, ``Y`` is (n, T)
    and ``init`` (T,) holds the starting constants. Returns ``(feat, thr, leaf)``
    arrays indexed by (target, round, node).
    """
    if use_numba is None:
        use_numba = USE_NUMBA
    Xb = np.ascontiguousarray(Xb, dtype=np.int32)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    init = np.ascontiguousarray(init, dtype=np.float64)
    impl = _fit_numba if use_numba else _fit_numpy
    return impl(Xb, Y, init, int(n_bins), int(rounds), int(depth), float(lr), int(min_leaf))


def predict_trees(Xb, init, feat, thr, leaf, depth, *, use_numba=None):
    if use_numba is None:
        use_numba = USE_NUMBA
    Xb = np.ascontiguousarray(Xb, dtype=np.int32)
    init = np.ascontiguousarray(init, dtype=np.float64)
    impl = _predict_numba if use_numba else _predict_numpy
    return impl(Xb, init, feat, thr, leaf, int(depth))

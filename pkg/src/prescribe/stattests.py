"""Permutation two-sample tests used to compare generated and observed outcomes.

Every p-value is ``(1 + #{permuted statistic at least as extreme}) / (1 + n_perm)``,
so it never reaches zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Callable

import numpy as np
import pandas as pd

_TOL = 1e-12


class EmptySample(ValueError):
    pass


@dataclass(frozen=True)
class TwoSampleResult:
    statistic: float
    p_value: float
    n_permutations: int
    test_name: str


def _scalars(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptySample("both samples must be nonempty")
    return a, b


def _vectors(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if len(a) == 0 or len(b) == 0:
        raise EmptySample("both samples must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def _label_draws(n_a: int, n: int, n_perm: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean ``(n_perm, n)`` matrix, True where a pooled point is assigned to the first sample."""
    base = np.zeros(n, dtype=bool)
    base[:n_a] = True
    return rng.permuted(np.broadcast_to(base, (n_perm, n)), axis=1)


def _p_value(perm: np.ndarray, observed: float, tail: str = "greater") -> float:
    tol = _TOL * max(1.0, abs(observed))
    if tail == "greater":
        hits = np.count_nonzero(perm >= observed - tol)
    else:
        hits = np.count_nonzero(perm <= observed + tol)
    return (1.0 + hits) / (1.0 + len(perm))


def _chunks(n_perm: int, n: int, budget: int = 4_000_000):
    step = max(1, budget // max(n, 1))
    for lo in range(0, n_perm, step):
        yield min(step, n_perm - lo)


def _sorted_pool(a, b):
    z = np.concatenate([a, b])
    order = np.argsort(z, kind="stable")
    zs = z[order]
    last = np.flatnonzero(np.r_[zs[1:] != zs[:-1], True])
    return zs, order, last


def _cdf_gaps(is_a: np.ndarray, n_a: int, n_b: int, last: np.ndarray) -> np.ndarray:
    ca = np.cumsum(is_a, axis=-1)[..., last] / n_a
    cb = (last + 1 - np.cumsum(is_a, axis=-1)[..., last]) / n_b
    return ca - cb


def ks_test(a, b, n_perm: int = 1000, seed: int | None = 0) -> TwoSampleResult:
    """Kolmogorov-Smirnov distance ``sup |F_a - F_b|`` with a permutation p-value."""
    a, b = _scalars(a, b)
    n_a, n_b = len(a), len(b)
    zs, order, last = _sorted_pool(a, b)
    is_a = order < n_a
    obs = float(np.max(np.abs(_cdf_gaps(is_a, n_a, n_b, last))))
    rng = np.random.default_rng(seed)
    perm = []
    for m in _chunks(n_perm, n_a + n_b):
        lab = _label_draws(n_a, n_a + n_b, m, rng)
        perm.append(np.max(np.abs(_cdf_gaps(lab, n_a, n_b, last)), axis=1))
    perm = np.concatenate(perm) if perm else np.empty(0)
    return TwoSampleResult(obs, _p_value(perm, obs), n_perm, "ks")


def _energy_from_cdf(gaps: np.ndarray, widths: np.ndarray) -> np.ndarray:
    return 2.0 * np.sum(gaps[..., :-1] ** 2 * widths, axis=-1)


def energy_distance(a, b) -> float:
    """Sample energy distance ``2E|A-B| - E|A-A'| - E|B-B'|`` (V-statistic)."""
    a, b = _scalars(a, b)
    zs, order, last = _sorted_pool(a, b)
    widths = np.diff(zs[last])
    return float(_energy_from_cdf(_cdf_gaps(order < len(a), len(a), len(b), last), widths))


def energy_test(a, b, n_perm: int = 1000, seed: int | None = 0) -> TwoSampleResult:
    """Energy distance between two scalar samples.

    In one dimension the V-statistic equals ``2 * integral (F_a - F_b)^2``,
    which is evaluated on the pooled order statistics.
    """
    a, b = _scalars(a, b)
    n_a, n_b = len(a), len(b)
    zs, order, last = _sorted_pool(a, b)
    widths = np.diff(zs[last])
    obs = float(_energy_from_cdf(_cdf_gaps(order < n_a, n_a, n_b, last), widths))
    rng = np.random.default_rng(seed)
    perm = []
    for m in _chunks(n_perm, n_a + n_b):
        lab = _label_draws(n_a, n_a + n_b, m, rng)
        perm.append(_energy_from_cdf(_cdf_gaps(lab, n_a, n_b, last), widths))
    perm = np.concatenate(perm) if perm else np.empty(0)
    return TwoSampleResult(obs, _p_value(perm, obs), n_perm, "energy")


def _quantile_coupling(n_a: int, n_b: int):
    u = np.union1d(np.arange(1, n_a + 1) / n_a, np.arange(1, n_b + 1) / n_b)
    u = np.unique(np.round(u, 15))
    lo = np.r_[0.0, u[:-1]]
    mid = (lo + u) / 2.0
    ia = np.minimum((mid * n_a).astype(np.int64), n_a - 1)
    ib = np.minimum((mid * n_b).astype(np.int64), n_b - 1)
    return ia, ib, u - lo


def wasserstein_distance(a, b, order: int = 1) -> float:
    """One-dimensional ``W_p`` through the sorted quantile coupling."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    a, b = _scalars(a, b)
    ia, ib, w = _quantile_coupling(len(a), len(b))
    d = np.abs(np.sort(a)[ia] - np.sort(b)[ib]) ** order
    return float(np.sum(w * d) ** (1.0 / order))


def wasserstein_test(a, b, order: int = 1, n_perm: int = 1000, seed: int | None = 0) -> TwoSampleResult:
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    a, b = _scalars(a, b)
    n_a, n_b = len(a), len(b)
    ia, ib, w = _quantile_coupling(n_a, n_b)
    obs = float(np.sum(w * np.abs(np.sort(a)[ia] - np.sort(b)[ib]) ** order) ** (1.0 / order))
    z = np.concatenate([a, b])
    rng = np.random.default_rng(seed)
    perm = []
    for m in _chunks(n_perm, n_a + n_b):
        idx = rng.permuted(np.broadcast_to(np.arange(n_a + n_b), (m, n_a + n_b)), axis=1)
        za = np.sort(z[idx[:, :n_a]], axis=1)
        zb = np.sort(z[idx[:, n_a:]], axis=1)
        perm.append(np.sum(w * np.abs(za[:, ia] - zb[:, ib]) ** order, axis=1) ** (1.0 / order))
    perm = np.concatenate(perm) if perm else np.empty(0)
    return TwoSampleResult(obs, _p_value(perm, obs), n_perm, f"wasserstein{order}")


def _tie_ranks(n: int, rng: np.random.Generator) -> np.ndarray:
    # a seeded, label-independent ordering of pooled points used to break distance ties
    return rng.permutation(n)


def nearest_neighbors(Z: np.ndarray, k: int, ranks: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Indices of the ``k`` nearest pooled points of each point, self excluded, ties by rank."""
    n = len(Z)
    by_rank = np.argsort(ranks)
    Zr = Z[by_rank]
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, chunk):
        rows = np.arange(lo, min(n, lo + chunk))
        d = np.sqrt(((Z[rows, None, :] - Zr[None, :, :]) ** 2).sum(axis=-1))
        d[np.arange(len(rows)), ranks[rows]] = np.inf
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        out[rows] = by_rank[nn]
    return out


def knn_test(a, b, k: int = 5, n_perm: int = 1000, seed: int | None = 0) -> TwoSampleResult:
    """Fraction of k-nearest-neighbour relations joining points of the same sample."""
    a, b = _vectors(a, b)
    n = len(a) + len(b)
    if not 1 <= k < n:
        raise ValueError(f"k must lie in [1, {n - 1}], got {k}")
    Z = np.vstack([a, b])
    rng = np.random.default_rng(seed)
    nbrs = nearest_neighbors(Z, k, _tie_ranks(n, rng))
    lab = np.arange(n) < len(a)
    obs = float(np.mean(lab[nbrs] == lab[:, None]))
    perm = []
    for m in _chunks(n_perm, n * k):
        L = _label_draws(len(a), n, m, rng)
        perm.append(np.mean(L[:, nbrs] == L[:, :, None], axis=(1, 2)))
    perm = np.concatenate(perm) if perm else np.empty(0)
    return TwoSampleResult(obs, _p_value(perm, obs), n_perm, "knn")


def minimum_spanning_tree(Z: np.ndarray, ranks: np.ndarray) -> np.ndarray:
    """Euclidean MST edges ``(n-1, 2)`` by Prim's algorithm; equal distances resolved by rank."""
    n = len(Z)
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.full(n, -1)
    cur = int(np.argmin(ranks))
    in_tree[cur] = True
    edges = np.empty((max(n - 1, 0), 2), dtype=np.int64)
    for e in range(n - 1):
        d = np.sqrt(((Z - Z[cur]) ** 2).sum(axis=1))
        upd = ~in_tree & (d < best)
        best[upd] = d[upd]
        parent[upd] = cur
        cand = np.where(in_tree, np.inf, best)
        ties = np.flatnonzero(cand == cand.min())
        nxt = int(ties[np.argmin(ranks[ties])])
        edges[e] = (parent[nxt], nxt)
        in_tree[nxt] = True
        cur = nxt
    return edges


def friedman_rafsky_test(a, b, n_perm: int = 1000, seed: int | None = 0) -> TwoSampleResult:
    """Number of MST edges joining the two samples; few cross edges indicate a difference."""
    a, b = _vectors(a, b)
    n = len(a) + len(b)
    if n < 3:
        raise ValueError("pooled sample must contain at least 3 points")
    Z = np.vstack([a, b])
    rng = np.random.default_rng(seed)
    edges = minimum_spanning_tree(Z, _tie_ranks(n, rng))
    lab = np.arange(n) < len(a)
    obs = float(np.count_nonzero(lab[edges[:, 0]] != lab[edges[:, 1]]))
    perm = []
    for m in _chunks(n_perm, n):
        L = _label_draws(len(a), n, m, rng)
        perm.append(np.count_nonzero(L[:, edges[:, 0]] != L[:, edges[:, 1]], axis=1).astype(float))
    perm = np.concatenate(perm) if perm else np.empty(0)
    return TwoSampleResult(obs, _p_value(perm, obs, tail="less"), n_perm, "friedman_rafsky")


TESTS: dict[str, Callable[..., TwoSampleResult]] = {
    "ks": ks_test,
    "energy": energy_test,
    "wasserstein1": partial(wasserstein_test, order=1),
    "wasserstein2": partial(wasserstein_test, order=2),
    "knn": knn_test,
    "friedman_rafsky": friedman_rafsky_test,
}


def run_test(name: str, a, b, n_perm: int = 1000, seed: int | None = 0) -> TwoSampleResult:
    try:
        fn = TESTS[name]
    except KeyError:
        raise ValueError(f"unknown test {name!r}; choose from {sorted(TESTS)}") from None
    return fn(a, b, n_perm=n_perm, seed=seed)


def report_frame(results: list[TwoSampleResult]) -> pd.DataFrame:
    return pd.DataFrame(
        [(r.test_name, r.statistic, r.p_value, r.n_permutations) for r in results],
        columns=["test", "statistic", "p_value", "n_permutations"],
    )

"""Honest causal trees and a grouped-subsample causal forest with CATE intervals."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import _io
from .eventlog import DimensionMismatch, PrefixDataset
from .predictor import make_bins


class MissingArm(ValueError):
    """A sample set lacks treated or control units."""


class NeedTwoGroups(ValueError):
    pass


class SubsampleTooSmall(ValueError):
    pass


@dataclass(frozen=True)
class TreeConfig:
    min_leaf_treated: int = 10
    min_leaf_control: int = 10
    max_depth: int = 8
    max_bins: int = 256
    max_features: int | None = None


@dataclass(frozen=True)
class ForestConfig:
    n_groups: int = 50
    group_size: int = 4
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    min_leaf: int = 10
    max_depth: int = 8
    seed: int = 0
    max_bins: int = 256
    max_features: int | None = None

    def __post_init__(self):
        if self.n_groups < 1 or self.group_size < 1:
            raise ValueError("n_groups and group_size must be >= 1")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise ValueError("honesty_fraction must lie in (0, 1)")

    def tree_config(self) -> TreeConfig:
        return TreeConfig(self.min_leaf, self.min_leaf, self.max_depth, self.max_bins, self.max_features)


@dataclass(frozen=True)
class CausalTree:
    """Flat tree; leaves carry effect estimates and arm counts from the estimation half."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    tau: np.ndarray
    n_treated: np.ndarray
    n_control: np.ndarray

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def n_leaves(self) -> int:
        return int(self.is_leaf.sum())

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            go_left = X[rows, np.where(inner, f, 0)] <= self.threshold[node]
            node = np.where(inner, np.where(go_left, self.left[node], self.right[node]), node)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.tau[self.apply(X)]

    def refit_leaves(self, X, T, Y) -> "CausalTree":
        """Same structure, leaf statistics recomputed from ``(X, T, Y)``."""
        leaf = self.apply(np.asarray(X, dtype=float))
        T = np.asarray(T)
        Y = np.asarray(Y, dtype=float)
        size = len(self.feature)
        nt = np.bincount(leaf, T == 1, size)
        nc = np.bincount(leaf, T == 0, size)
        syt = np.bincount(leaf, Y * (T == 1), size)
        syc = np.bincount(leaf, Y * (T == 0), size)
        with np.errstate(invalid="ignore", divide="ignore"):
            tau = np.where((nt > 0) & (nc > 0), syt / nt - syc / nc, 0.0)
        tau = np.where(self.is_leaf, tau, 0.0)
        return replace(
            self,
            tau=tau,
            n_treated=np.where(self.is_leaf, nt, 0).astype(np.int64),
            n_control=np.where(self.is_leaf, nc, 0).astype(np.int64),
        )

    def to_nested(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"tau": float(self.tau[i]), "n_treated": int(self.n_treated[i]), "n_control": int(self.n_control[i])}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "left": self.to_nested(int(self.left[i])),
            "right": self.to_nested(int(self.right[i])),
        }

    @classmethod
    def from_nested(cls, doc: dict) -> "CausalTree":
        cols = {k: [] for k in ("feature", "threshold", "left", "right", "tau", "n_treated", "n_control")}

        def _add(node):
            i = len(cols["feature"])
            for k, v in (("feature", -1), ("threshold", 0.0), ("left", -1), ("right", -1),
                         ("tau", 0.0), ("n_treated", 0), ("n_control", 0)):
                cols[k].append(v)
            if "tau" in node:
                cols["tau"][i] = float(node["tau"])
                cols["n_treated"][i] = int(node["n_treated"])
                cols["n_control"][i] = int(node["n_control"])
            else:
                cols["feature"][i] = int(node["feature"])
                cols["threshold"][i] = float(node["threshold"])
                cols["left"][i] = _add(node["left"])
                cols["right"][i] = _add(node["right"])
            return i

        _add(doc)
        ints = {"feature", "left", "right", "n_treated", "n_control"}
        return cls(**{k: np.asarray(v, dtype=np.int64 if k in ints else float) for k, v in cols.items()})


def _check_arms(T: np.ndarray, what: str) -> None:
    if not (np.any(T == 1) and np.any(T == 0)):
        raise MissingArm(f"{what} must contain both treated and control samples")


def _grow(codes_s, T_s, Y_s, codes_e, T_e, cuts, cfg: TreeConfig, rng) -> tuple[list, list, list, list]:
    """Level-wise growth maximizing sum over children of n * tau_hat**2 on the split half."""
    B = cfg.max_bins
    p = codes_s.shape[1]
    tt_s = (T_s == 1).astype(float)
    tc_s = 1.0 - tt_s
    yt_s, yc_s = Y_s * tt_s, Y_s * tc_s
    tt_e = (T_e == 1).astype(float)
    tc_e = 1.0 - tt_e
    m_t, m_c = cfg.min_leaf_treated, cfg.min_leaf_control

    feature, threshold, left, right = [-1], [0.0], [-1], [-1]
    node_s = np.zeros(len(T_s), dtype=np.int64)
    node_e = np.zeros(len(T_e), dtype=np.int64)
    frontier = [0]

    def _tau(syt, nt, syc, nc):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where((nt > 0) & (nc > 0), syt / np.maximum(nt, 1) - syc / np.maximum(nc, 1), 0.0)

    for _ in range(cfg.max_depth):
        if not frontier:
            break
        m = len(frontier)
        local = np.full(len(feature), -1, dtype=np.int64)
        local[frontier] = np.arange(m)
        ls, le = local[node_s], local[node_e]
        as_, ae = ls >= 0, le >= 0
        ls, le = ls[as_], le[ae]
        NT, NC = np.bincount(ls, tt_s[as_], m), np.bincount(ls, tc_s[as_], m)
        SYT, SYC = np.bincount(ls, yt_s[as_], m), np.bincount(ls, yc_s[as_], m)
        ET, EC = np.bincount(le, tt_e[ae], m), np.bincount(le, tc_e[ae], m)
        parent = (NT + NC) * _tau(SYT, NT, SYC, NC) ** 2

        allowed = np.ones((m, p), dtype=bool)
        if cfg.max_features is not None and cfg.max_features < p:
            keys = rng.random((m, p))
            allowed = keys <= np.sort(keys, axis=1)[:, [cfg.max_features - 1]]

        best_gain = np.zeros(m)
        best_f = np.full(m, -1)
        best_b = np.zeros(m, dtype=np.int64)
        for j in range(p):
            idx_s = ls * B + codes_s[as_, j]
            idx_e = le * B + codes_e[ae, j]

            def _cum(idx, w):
                return np.cumsum(np.bincount(idx, w, m * B).reshape(m, B), axis=1)

            nt_l, nc_l = _cum(idx_s, tt_s[as_]), _cum(idx_s, tc_s[as_])
            syt_l, syc_l = _cum(idx_s, yt_s[as_]), _cum(idx_s, yc_s[as_])
            et_l, ec_l = _cum(idx_e, tt_e[ae]), _cum(idx_e, tc_e[ae])
            nt_r, nc_r = NT[:, None] - nt_l, NC[:, None] - nc_l
            syt_r, syc_r = SYT[:, None] - syt_l, SYC[:, None] - syc_l
            et_r, ec_r = ET[:, None] - et_l, EC[:, None] - ec_l
            crit = (nt_l + nc_l) * _tau(syt_l, nt_l, syc_l, nc_l) ** 2 \
                + (nt_r + nc_r) * _tau(syt_r, nt_r, syc_r, nc_r) ** 2
            ok = (
                (nt_l >= m_t) & (nc_l >= m_c) & (nt_r >= m_t) & (nc_r >= m_c)
                & (et_l >= m_t) & (ec_l >= m_c) & (et_r >= m_t) & (ec_r >= m_c)
            )
            ok[:, len(cuts[j]):] = False
            ok &= allowed[:, [j]]
            gain = np.where(ok, crit - parent[:, None], -np.inf)
            b = np.argmax(gain, axis=1)
            gb = gain[np.arange(m), b]
            better = gb > best_gain + 1e-12
            best_gain = np.where(better, gb, best_gain)
            best_f = np.where(better, j, best_f)
            best_b = np.where(better, b, best_b)

        new_frontier = []
        for a, nid in enumerate(frontier):
            if best_f[a] < 0:
                continue
            j, b = int(best_f[a]), int(best_b[a])
            lid, rid = len(feature), len(feature) + 1
            feature += [-1, -1]
            threshold += [0.0, 0.0]
            left += [-1, -1]
            right += [-1, -1]
            feature[nid], threshold[nid], left[nid], right[nid] = j, float(cuts[j][b]), lid, rid
            for node, codes in ((node_s, codes_s), (node_e, codes_e)):
                members = node == nid
                node[members] = np.where(codes[members, j] <= b, lid, rid)
            new_frontier += [lid, rid]
        frontier = new_frontier
    return feature, threshold, left, right


def _unpack(samples, T=None, Y=None):
    if isinstance(samples, PrefixDataset):
        return samples.X, samples.treatment, samples.outcome.astype(float)
    return np.asarray(samples, dtype=float), np.asarray(T), np.asarray(Y, dtype=float)


def fit_causal_tree(samples, split_half, est_half, cfg: TreeConfig | None = None, *, T=None, Y=None,
                    cuts=None, rng=None) -> CausalTree:
    """Grow a tree on ``split_half`` rows and estimate its leaf effects on ``est_half`` rows.

    ``samples`` is a :class:`PrefixDataset` or a feature matrix with ``T``
    and ``Y`` passed as keywords. A split is only accepted if both children
    keep ``min_leaf_*`` units of each arm in both halves.
    """
    cfg = cfg or TreeConfig()
    X, T, Y = _unpack(samples, T, Y)
    split_half = np.asarray(split_half)
    est_half = np.asarray(est_half)
    _check_arms(T[split_half], "split half")
    _check_arms(T[est_half], "estimation half")
    if cuts is None:
        cuts, _ = make_bins(X[np.concatenate([split_half, est_half])], cfg.max_bins)
    codes = _encode(X, cuts)
    rng = rng if rng is not None else np.random.default_rng(0)
    feature, threshold, left, right = _grow(
        codes[split_half], T[split_half], Y[split_half], codes[est_half], T[est_half], cuts, cfg, rng
    )
    n = len(feature)
    shell = CausalTree(
        np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
        np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64),
    )
    return shell.refit_leaves(X[est_half], T[est_half], Y[est_half])


def _encode(X: np.ndarray, cuts) -> np.ndarray:
    codes = np.empty(X.shape, dtype=np.uint8)
    for j, c in enumerate(cuts):
        codes[:, j] = np.searchsorted(c, X[:, j], side="left")
    return codes


@dataclass(frozen=True)
class CausalForest:
    groups: tuple[tuple[CausalTree, ...], ...]
    feature_count: int
    subsample_fraction: float
    seed: int
    outcome_bounds: tuple[float, float] | None = None
    config: ForestConfig | None = field(default=None, compare=False)

    @property
    def n_trees(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def trees(self) -> list[CausalTree]:
        return [t for g in self.groups for t in g]

    def tree_predictions(self, X) -> np.ndarray:
        """Array of shape ``(n_points, n_groups, group_size)``."""
        X = _features(X, self.feature_count)
        out = np.empty((X.shape[0], len(self.groups), len(self.groups[0])))
        for b, grp in enumerate(self.groups):
            for g, tree in enumerate(grp):
                out[:, b, g] = tree.predict(X)
        return out

    def predict(self, X) -> np.ndarray:
        return self.tree_predictions(X).mean(axis=(1, 2))


def _features(X, p: int) -> np.ndarray:
    if isinstance(X, PrefixDataset):
        X = X.X
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != p:
        raise DimensionMismatch(f"forest expects {p} features, got {X.shape[1]}")
    return X


def fit_forest(samples, cfg: ForestConfig | None = None, *, T=None, Y=None, clusters=None) -> CausalForest:
    """Fit ``n_groups * group_size`` honest trees.

    Each group draws one subsample without replacement (of clusters, if
    ``clusters`` is given, so prefixes of a case stay together); every tree in
    the group re-splits that subsample into its own honesty halves.
    """
    cfg = cfg or ForestConfig()
    X, T, Y = _unpack(samples, T, Y)
    if clusters is None and isinstance(samples, PrefixDataset):
        clusters = samples.case_id
    _check_arms(T, "training data")
    n = len(T)
    if clusters is not None:
        _, cl = np.unique(np.asarray(clusters), return_inverse=True)
        members = np.argsort(cl, kind="stable")
        starts = np.searchsorted(cl[members], np.arange(cl.max() + 2))
        n_units = cl.max() + 1
    else:
        n_units = n
    s = int(np.floor(cfg.subsample_fraction * n_units))
    if s < 4 or s * min(1 - cfg.honesty_fraction, cfg.honesty_fraction) < 2 * cfg.min_leaf:
        raise SubsampleTooSmall(f"subsample of {s} units cannot hold {cfg.min_leaf} per arm in both halves")

    binary = bool(np.all(np.isin(Y, (0.0, 1.0))))
    cuts, _ = make_bins(X, cfg.max_bins)
    codes = _encode(X, cuts)
    tcfg = cfg.tree_config()
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_groups)

    def _rows(units):
        if clusters is None:
            return units
        return np.concatenate([members[starts[u]:starts[u + 1]] for u in units])

    groups = []
    for b in range(cfg.n_groups):
        rng = np.random.default_rng(seeds[b])
        bag = rng.choice(n_units, s, replace=False)
        trees = []
        for _ in range(cfg.group_size):
            perm = rng.permutation(bag)
            cut = int(round(cfg.honesty_fraction * s))
            split_rows, est_rows = _rows(perm[:cut]), _rows(perm[cut:])
            _check_arms(T[split_rows], "split half")
            _check_arms(T[est_rows], "estimation half")
            feature, threshold, left, right = _grow(
                codes[split_rows], T[split_rows], Y[split_rows], codes[est_rows], T[est_rows], cuts, tcfg, rng
            )
            k = len(feature)
            shell = CausalTree(
                np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=float),
                np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                np.zeros(k), np.zeros(k, dtype=np.int64), np.zeros(k, dtype=np.int64),
            )
            trees.append(shell.refit_leaves(X[est_rows], T[est_rows], Y[est_rows]))
        groups.append(tuple(trees))
    return CausalForest(tuple(groups), X.shape[1], cfg.subsample_fraction, cfg.seed,
                        (-1.0, 1.0) if binary else None, cfg)


@dataclass(frozen=True)
class CateInterval:
    theta_l: float
    theta_point: float
    theta_u: float
    level: float

    def __post_init__(self):
        if not self.theta_l <= self.theta_point <= self.theta_u:
            raise ValueError(f"unordered interval ({self.theta_l}, {self.theta_point}, {self.theta_u})")

    @property
    def width(self) -> float:
        return self.theta_u - self.theta_l


@dataclass(frozen=True)
class CateIntervals:
    """Vectorized intervals, one row per query point."""

    theta_l: np.ndarray
    theta_point: np.ndarray
    theta_u: np.ndarray
    level: float
    std_err: np.ndarray

    def __len__(self) -> int:
        return len(self.theta_point)

    def __getitem__(self, i: int) -> CateInterval:
        return CateInterval(float(self.theta_l[i]), float(self.theta_point[i]), float(self.theta_u[i]), self.level)


def cate_variance(preds: np.ndarray) -> np.ndarray:
    """Bootstrap-of-little-bags variance from ``(n, groups, group_size)`` tree predictions."""
    n_groups, size = preds.shape[1], preds.shape[2]
    if n_groups < 2:
        raise NeedTwoGroups("variance needs at least two subsample groups")
    between = preds.mean(axis=2).var(axis=1, ddof=1)
    within = preds.var(axis=2, ddof=1).mean(axis=1) if size > 1 else np.zeros(preds.shape[0])
    return np.maximum(0.0, between - within / size)


def estimate_cate(forest: CausalForest, features, level: float = 0.95) -> CateIntervals:
    """Point estimate and normal-approximation interval at confidence ``level``."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if len(forest.groups) < 2:
        raise NeedTwoGroups("variance needs at least two subsample groups")
    preds = forest.tree_predictions(features)
    point = preds.mean(axis=(1, 2))
    se = np.sqrt(cate_variance(preds))
    z = norm.ppf(0.5 + level / 2.0)
    lo, hi = point - z * se, point + z * se
    if forest.outcome_bounds is not None:
        a, b = forest.outcome_bounds
        point = np.clip(point, a, b)
        lo, hi = np.clip(lo, a, b), np.clip(hi, a, b)
    return CateIntervals(lo, point, hi, level, se)


class CaseGroup(str, enum.Enum):
    PERSUADABLE = "Persuadable"
    DO_NOT_DISTURB = "DoNotDisturb"
    UNCERTAIN = "Uncertain"


def classify_case(interval: CateInterval) -> CaseGroup:
    if interval.theta_l > 0:
        return CaseGroup.PERSUADABLE
    if interval.theta_u < 0:
        return CaseGroup.DO_NOT_DISTURB
    return CaseGroup.UNCERTAIN


def forest_to_dict(forest: CausalForest) -> dict:
    return {
        "kind": "causal_forest",
        "version": _io.FORMAT_VERSION,
        "feature_count": forest.feature_count,
        "subsample_fraction": forest.subsample_fraction,
        "seed": forest.seed,
        "outcome_bounds": list(forest.outcome_bounds) if forest.outcome_bounds else None,
        "groups": [[t.to_nested() for t in g] for g in forest.groups],
    }


def forest_from_dict(doc: dict) -> CausalForest:
    _io.check_version(doc, "causal_forest")
    return CausalForest(
        tuple(tuple(CausalTree.from_nested(t) for t in g) for g in doc["groups"]),
        int(doc["feature_count"]),
        float(doc["subsample_fraction"]),
        int(doc["seed"]),
        tuple(doc["outcome_bounds"]) if doc.get("outcome_bounds") else None,
    )


def save_forest(path: str | Path, forest: CausalForest) -> Path:
    return _io.write_json(path, forest_to_dict(forest))


def load_forest(path: str | Path) -> CausalForest:
    return forest_from_dict(_io.read_json(path))

"""Histogram gradient-boosted trees for binary outcome prediction."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.special import expit

from . import _io
from .eventlog import DimensionMismatch, PrefixDataset


class SingleClass(ValueError):
    """Training labels contain only one class."""


@dataclass(frozen=True)
class TrainConfig:
    n_trees: int = 200
    max_depth: int = 6
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    subsample: float = 1.0
    seed: int = 0
    l2_reg: float = 1.0
    max_bins: int = 256

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError("learning_rate must lie in (0, 1]")
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError("subsample must lie in (0, 1]")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 2 <= self.max_bins <= 256:
            raise ValueError("max_bins must lie in [2, 256]")


@dataclass(frozen=True)
class RegressionTree:
    """Flat binary tree; ``feature[i] < 0`` marks a leaf. ``x <= threshold`` goes left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def depth(self) -> int:
        def _d(i):
            return 0 if self.feature[i] < 0 else 1 + max(_d(self.left[i]), _d(self.right[i]))

        return _d(0)

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
        return self.value[self.apply(X)]

    def to_nested(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"value": float(self.value[i])}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "left": self.to_nested(int(self.left[i])),
            "right": self.to_nested(int(self.right[i])),
        }

    @classmethod
    def from_nested(cls, doc: dict) -> "RegressionTree":
        feature, threshold, left, right, value = [], [], [], [], []

        def _add(node):
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            if "value" in node:
                value[i] = float(node["value"])
            else:
                feature[i] = int(node["feature"])
                threshold[i] = float(node["threshold"])
                left[i] = _add(node["left"])
                right[i] = _add(node["right"])
            return i

        _add(doc)
        return cls(
            np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=float),
            np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
            np.asarray(value, dtype=float),
        )


@dataclass(frozen=True)
class GbdtModel:
    trees: tuple[RegressionTree, ...]
    learning_rate: float
    base_score: float
    feature_count: int
    train_loss: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        for t in self.trees:
            if np.any(t.feature >= self.feature_count):
                raise ValueError("tree splits on a feature index beyond feature_count")

    def decision_function(self, X) -> np.ndarray:
        X = _as_matrix(X, self.feature_count)
        raw = np.full(X.shape[0], self.base_score)
        for t in self.trees:
            raw += self.learning_rate * t.predict(X)
        return raw


def _as_matrix(X, p: int) -> np.ndarray:
    if isinstance(X, PrefixDataset):
        X = X.X
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != p:
        raise DimensionMismatch(f"model expects {p} features, got {X.shape[1]}")
    return X


def make_bins(X: np.ndarray, max_bins: int = 256) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-feature cut points and the binned matrix (bin ``b`` holds ``cuts[b-1] < x <= cuts[b]``)."""
    cuts = []
    codes = np.empty(X.shape, dtype=np.uint8)
    for j in range(X.shape[1]):
        u = np.unique(X[:, j])
        if len(u) <= max_bins:
            c = (u[:-1] + u[1:]) / 2.0
        else:
            q = np.quantile(X[:, j], np.linspace(0, 1, max_bins + 1)[1:-1], method="lower")
            c = np.unique(q)
        cuts.append(c)
        codes[:, j] = np.searchsorted(c, X[:, j], side="left")
    return cuts, codes


def log_loss(y: np.ndarray, raw: np.ndarray) -> float:
    # log(1 + exp(raw)) - y * raw, computed stably
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


def _grow_tree(codes, cuts, g, h, cfg: TrainConfig) -> RegressionTree:
    n, p = codes.shape
    B = cfg.max_bins
    lam = cfg.l2_reg
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    node_of = np.zeros(n, dtype=np.int64)
    frontier = [0]

    def _leaf(i, G, H):
        value[i] = -G / (H + lam)

    for _ in range(cfg.max_depth):
        if not frontier:
            break
        m = len(frontier)
        local = np.full(len(feature), -1, dtype=np.int64)
        local[frontier] = np.arange(m)
        li = local[node_of]
        act = li >= 0
        li_a, g_a, h_a = li[act], g[act], h[act]
        G = np.bincount(li_a, g_a, m)
        H = np.bincount(li_a, h_a, m)
        C = np.bincount(li_a, minlength=m)
        parent = G**2 / (H + lam)
        best_gain = np.zeros(m)
        best_f = np.full(m, -1)
        best_b = np.zeros(m, dtype=np.int64)
        for j in range(p):
            idx = li_a * B + codes[act, j]
            GL = np.cumsum(np.bincount(idx, g_a, m * B).reshape(m, B), axis=1)
            HL = np.cumsum(np.bincount(idx, h_a, m * B).reshape(m, B), axis=1)
            CL = np.cumsum(np.bincount(idx, minlength=m * B).reshape(m, B), axis=1)
            GR, HR, CR = G[:, None] - GL, H[:, None] - HL, C[:, None] - CL
            gain = GL**2 / (HL + lam) + GR**2 / (HR + lam) - parent[:, None]
            ok = (CL >= cfg.min_samples_leaf) & (CR >= cfg.min_samples_leaf)
            ok[:, len(cuts[j]):] = False
            gain = np.where(ok, gain, -np.inf)
            b = np.argmax(gain, axis=1)
            gb = gain[np.arange(m), b]
            # strict improvement keeps the lowest feature index on ties
            better = gb > best_gain + 1e-12
            best_gain = np.where(better, gb, best_gain)
            best_f = np.where(better, j, best_f)
            best_b = np.where(better, b, best_b)

        new_frontier = []
        go_left = np.zeros(n, dtype=bool)
        for a, nid in enumerate(frontier):
            if best_f[a] < 0:
                _leaf(nid, G[a], H[a])
                continue
            j, b = int(best_f[a]), int(best_b[a])
            lid, rid = len(feature), len(feature) + 1
            for _ in range(2):
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(0.0)
            feature[nid], threshold[nid], left[nid], right[nid] = j, float(cuts[j][b]), lid, rid
            members = node_of == nid
            go_left[members] = codes[members, j] <= b
            node_of[members] = np.where(go_left[members], lid, rid)
            new_frontier += [lid, rid]
        frontier = new_frontier

    if frontier:
        local = np.full(len(feature), -1, dtype=np.int64)
        local[frontier] = np.arange(len(frontier))
        li = local[node_of]
        act = li >= 0
        G = np.bincount(li[act], g[act], len(frontier))
        H = np.bincount(li[act], h[act], len(frontier))
        for a, nid in enumerate(frontier):
            _leaf(nid, G[a], H[a])

    return RegressionTree(
        np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=float),
    )


def fit(X, y=None, cfg: TrainConfig | None = None) -> GbdtModel:
    """Boost regression trees on the logistic loss with second-order leaf values.

    ``X`` may be a :class:`PrefixDataset`, in which case ``y`` defaults to its
    outcome column.
    """
    cfg = cfg or TrainConfig()
    if isinstance(X, PrefixDataset):
        if y is None:
            y = X.outcome
        X = X.X
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch("X and y disagree on the number of samples")
    if X.shape[0] < 2:
        raise SingleClass("need at least two samples")
    classes = np.unique(y)
    if not np.all(np.isin(classes, (0.0, 1.0))):
        raise ValueError("labels must be binary 0/1")
    if len(classes) < 2:
        raise SingleClass(f"training labels contain only class {int(classes[0])}")

    rng = np.random.default_rng(cfg.seed)
    cuts, codes = make_bins(X, cfg.max_bins)
    mean = float(y.mean())
    base = float(np.log(mean / (1.0 - mean)))
    raw = np.full(len(y), base)
    losses = [log_loss(y, raw)]
    trees = []
    n_sub = max(2, int(round(cfg.subsample * len(y))))
    for _ in range(cfg.n_trees):
        p = expit(raw)
        g, h = p - y, p * (1.0 - p)
        if cfg.subsample < 1.0:
            rows = np.sort(rng.choice(len(y), n_sub, replace=False))
            tree = _grow_tree(codes[rows], cuts, g[rows], h[rows], cfg)
        else:
            tree = _grow_tree(codes, cuts, g, h, cfg)
        trees.append(tree)
        raw = raw + cfg.learning_rate * tree.predict(X)
        losses.append(log_loss(y, raw))
    return GbdtModel(tuple(trees), cfg.learning_rate, base, X.shape[1], tuple(losses))


def predict_proba(model: GbdtModel, features) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(p0, p1)`` arrays, the negative and positive outcome probabilities."""
    p1 = expit(model.decision_function(features))
    return 1.0 - p1, p1


def predict_class(model: GbdtModel, features) -> np.ndarray:
    p0, p1 = predict_proba(model, features)
    # equal probabilities resolve to class 0
    return (p1 > p0).astype(np.int64)


def model_to_dict(model: GbdtModel, calibrator: Any = None) -> dict:
    return {
        "kind": "gbdt",
        "version": _io.FORMAT_VERSION,
        "learning_rate": model.learning_rate,
        "base_score": model.base_score,
        "feature_count": model.feature_count,
        "train_loss": list(model.train_loss),
        "trees": [t.to_nested() for t in model.trees],
        "calibrator": calibrator.to_dict() if calibrator is not None else None,
    }


def model_from_dict(doc: dict) -> GbdtModel:
    _io.check_version(doc, "gbdt")
    return GbdtModel(
        tuple(RegressionTree.from_nested(t) for t in doc["trees"]),
        float(doc["learning_rate"]),
        float(doc["base_score"]),
        int(doc["feature_count"]),
        tuple(doc.get("train_loss", ())),
    )


def save_model(path: str | Path, model: GbdtModel, calibrator: Any = None) -> Path:
    return _io.write_json(path, model_to_dict(model, calibrator))


def load_model(path: str | Path):
    """Load a model and, if present, the calibrator stored alongside it."""
    from .conformal import ConformalCalibrator

    doc = _io.read_json(path)
    model = model_from_dict(doc)
    cal = ConformalCalibrator.from_dict(doc["calibrator"]) if doc.get("calibrator") else None
    return model, cal

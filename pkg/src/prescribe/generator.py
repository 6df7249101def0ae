"""Potential-outcome generator: a shared encoder with one Bernoulli head per treatment arm."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import expit

from . import _io
from .eventlog import PrefixDataset, PrefixSample
from .nn import Adam, Mlp
from .stattests import TESTS, TwoSampleResult, run_test

P_CLAMP = 1e-6
DEFAULT_TESTS = tuple(TESTS)


class SingleArm(ValueError):
    pass


class GeneratorDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    encoder_hidden: tuple[int, ...] = (64, 64)
    head_hidden: tuple[int, ...] = (32, 32)
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 0.2
    seed: int = 0


@dataclass
class OutcomeGenerator:
    encoder: Mlp
    head0: Mlp
    head1: Mlp
    input_mean: np.ndarray
    input_std: np.ndarray
    config: GeneratorConfig = field(default_factory=GeneratorConfig)
    feature_names: tuple[str, ...] = ()
    loss_history: list[float] = field(default_factory=list)

    @property
    def heads(self) -> tuple[Mlp, Mlp]:
        return self.head0, self.head1

    def _inputs(self, X) -> np.ndarray:
        if isinstance(X, PrefixDataset):
            X = X.X
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        return (X - self.input_mean) / self.input_std

    def logits(self, X) -> tuple[np.ndarray, np.ndarray]:
        h = self.encoder(self._inputs(X))
        return self.head0(h)[:, 0], self.head1(h)[:, 0]

    def probabilities(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Bernoulli parameters ``(p0, p1)`` of ``Y(0)`` and ``Y(1)``, kept inside (0, 1)."""
        z0, z1 = self.logits(X)
        return np.clip(expit(z0), P_CLAMP, 1 - P_CLAMP), np.clip(expit(z1), P_CLAMP, 1 - P_CLAMP)

    def factual_probability(self, X, T) -> np.ndarray:
        p0, p1 = self.probabilities(X)
        return np.where(np.asarray(T) == 1, p1, p0)

    def cross_entropy(self, X, T, Y) -> float:
        p = self.factual_probability(X, T)
        Y = np.asarray(Y, dtype=float)
        return float(-np.mean(Y * np.log(p) + (1 - Y) * np.log(1 - p)))

    def to_dict(self) -> dict:
        return {
            "kind": "outcome_generator",
            "version": _io.FORMAT_VERSION,
            "encoder": self.encoder.to_dict(),
            "head0": self.head0.to_dict(),
            "head1": self.head1.to_dict(),
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "feature_names": list(self.feature_names),
            "config": {
                "encoder_hidden": list(self.config.encoder_hidden),
                "head_hidden": list(self.config.head_hidden),
                "epochs": self.config.epochs,
                "batch_size": self.config.batch_size,
                "learning_rate": self.config.learning_rate,
                "weight_decay": self.config.weight_decay,
                "seed": self.config.seed,
            },
            "loss_history": self.loss_history,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "OutcomeGenerator":
        _io.check_version(doc, "outcome_generator")
        c = doc["config"]
        cfg = GeneratorConfig(tuple(c["encoder_hidden"]), tuple(c["head_hidden"]), c["epochs"],
                              c["batch_size"], c["learning_rate"], c["weight_decay"], c["seed"])
        return cls(
            Mlp.from_dict(doc["encoder"]), Mlp.from_dict(doc["head0"]), Mlp.from_dict(doc["head1"]),
            np.asarray(doc["input_mean"], dtype=float), np.asarray(doc["input_std"], dtype=float),
            cfg, tuple(doc.get("feature_names", ())), list(doc.get("loss_history", [])),
        )


def save_generator(path: str | Path, gen: OutcomeGenerator) -> Path:
    return _io.write_json(path, gen.to_dict())


def load_generator(path: str | Path) -> OutcomeGenerator:
    return OutcomeGenerator.from_dict(_io.read_json(path))


def init_generator(n_features: int, cfg: GeneratorConfig, rng: np.random.Generator) -> OutcomeGenerator:
    enc_sizes = [n_features, *cfg.encoder_hidden]
    encoder = Mlp.init(enc_sizes, ["relu"] * len(cfg.encoder_hidden), rng)
    head_sizes = [enc_sizes[-1], *cfg.head_hidden, 1]
    acts = ["relu"] * len(cfg.head_hidden) + ["identity"]
    head0 = Mlp.init(head_sizes, acts, rng, out_scale=0.1)
    head1 = Mlp.init(head_sizes, acts, rng, out_scale=0.1)
    return OutcomeGenerator(encoder, head0, head1, np.zeros(n_features), np.ones(n_features), cfg)


def loss_and_grads(gen: OutcomeGenerator, Xs: np.ndarray, T: np.ndarray, Y: np.ndarray):
    """Mean binary cross-entropy of the factual head on standardized inputs ``Xs``.

    Gradients are returned for ``encoder.params + head0.params + head1.params``.
    """
    n = len(Y)
    h, enc_cache = gen.encoder.forward(Xs)
    d_h = np.zeros_like(h)
    loss = 0.0
    head_grads = []
    for arm, head in enumerate(gen.heads):
        mask = T == arm
        if not mask.any():
            head_grads.append([np.zeros_like(p) for p in head.params])
            continue
        z, cache = head.forward(h[mask])
        z = z[:, 0]
        y = Y[mask]
        loss += float(np.sum(np.logaddexp(0.0, z) - y * z))
        dz = ((expit(z) - y) / n)[:, None]
        grads, d_in = head.backward(cache, dz)
        head_grads.append(grads)
        d_h[mask] += d_in
    enc_grads, _ = gen.encoder.backward(enc_cache, d_h)
    return loss / n, enc_grads + head_grads[0] + head_grads[1]


def _unpack(samples, T=None, Y=None):
    if isinstance(samples, PrefixDataset):
        return samples.X, samples.treatment, samples.outcome.astype(float), samples.feature_names
    return np.asarray(samples, dtype=float), np.asarray(T), np.asarray(Y, dtype=float), ()


def train_generator(samples, cfg: GeneratorConfig | None = None, *, T=None, Y=None) -> OutcomeGenerator:
    """Jointly fit the encoder and both heads by mini-batch Adam on the factual outcomes.

    With a :class:`PrefixDataset` the features must include the prefix number
    and the numeric case id so prefixes of one case can be tied together.
    """
    cfg = cfg or GeneratorConfig()
    X, T, Y, names = _unpack(samples, T, Y)
    if names and not {"prefix_k", "numeric_case_id"} <= set(names):
        raise ValueError("generator features must include prefix_k and numeric_case_id")
    if not (np.any(T == 1) and np.any(T == 0)):
        raise SingleArm("training data must contain both treatment arms")
    rng = np.random.default_rng(cfg.seed)
    gen = init_generator(X.shape[1], cfg, rng)
    mean, std = X.mean(axis=0), X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    gen = replace(gen, input_mean=mean, input_std=std, feature_names=tuple(names))
    Xs = (X - mean) / std
    opt = Adam(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    params = gen.encoder.params + gen.head0.params + gen.head1.params
    n = len(Y)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss, grads = loss_and_grads(gen, Xs[idx], T[idx], Y[idx])
            if not np.isfinite(loss):
                raise GeneratorDiverged(f"non-finite loss at epoch {epoch}")
            opt.step(params, grads)
            total += loss * len(idx)
        gen.loss_history.append(total / n)
    return gen


def invert_heads(gen: OutcomeGenerator) -> OutcomeGenerator:
    """Copy whose heads output ``1 - p`` (a deliberately wrong generator)."""
    heads = []
    for head in gen.heads:
        h = head.copy()
        h.weights[-1] *= -1.0
        h.biases[-1] *= -1.0
        heads.append(h)
    return replace(gen, head0=heads[0], head1=heads[1], loss_history=list(gen.loss_history))


def case_key(case_id: str) -> int:
    return zlib.crc32(str(case_id).encode("utf-8"))


def keyed_uniform(seed: int, case_id: str, k: int, arm: int) -> float:
    """Uniform draw addressed by ``(seed, case, k, arm)``; independent of iteration order."""
    bitgen = np.random.Philox(key=seed, counter=[case_key(case_id), int(k), int(arm), 0])
    return float(np.random.Generator(bitgen).random())


def keyed_uniforms(seed: int, case_ids, ks, arm: int) -> np.ndarray:
    return np.array([keyed_uniform(seed, c, k, arm) for c, k in zip(case_ids, ks)])


@dataclass(frozen=True)
class EnhancedSample(PrefixSample):
    y0: int = 0
    y1: int = 0
    p0_gen: float = 0.0
    p1_gen: float = 0.0

    @property
    def true_effect(self) -> int:
        return self.y1 - self.y0


@dataclass(frozen=True)
class EnhancedLog:
    """Prefixes with both potential outcomes, ordered by case end time, then case, then k."""

    samples: PrefixDataset
    y0: np.ndarray
    y1: np.ndarray
    p0_gen: np.ndarray
    p1_gen: np.ndarray

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> EnhancedSample:
        s = self.samples[i]
        return EnhancedSample(**s.__dict__, y0=int(self.y0[i]), y1=int(self.y1[i]),
                              p0_gen=float(self.p0_gen[i]), p1_gen=float(self.p1_gen[i]))

    @property
    def true_effect(self) -> np.ndarray:
        return self.y1 - self.y0

    def case_slices(self) -> list[tuple[str, np.ndarray]]:
        """``(case_id, row indices)`` per case in log order."""
        cid = self.samples.case_id
        if len(cid) == 0:
            return []
        starts = np.flatnonzero(np.r_[True, cid[1:] != cid[:-1]])
        ends = np.r_[starts[1:], len(cid)]
        return [(str(cid[s]), np.arange(s, e)) for s, e in zip(starts, ends)]

    def to_frame(self) -> pd.DataFrame:
        frame = self.samples.to_frame()
        frame.insert(6, "y0", self.y0)
        frame.insert(7, "y1", self.y1)
        frame.insert(8, "p0_gen", self.p0_gen)
        frame.insert(9, "p1_gen", self.p1_gen)
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "EnhancedLog":
        return cls(
            PrefixDataset.from_frame(frame),
            frame["y0"].to_numpy(dtype=np.int64), frame["y1"].to_numpy(dtype=np.int64),
            frame["p0_gen"].to_numpy(dtype=float), frame["p1_gen"].to_numpy(dtype=float),
        )

    def save(self, path: str | Path) -> Path:
        return _io.write_csv(path, self.to_frame())

    @classmethod
    def load(cls, path: str | Path) -> "EnhancedLog":
        return cls.from_frame(pd.read_csv(path, keep_default_na=False, dtype={"case_id": str}))


def log_order(samples: PrefixDataset) -> np.ndarray:
    return np.lexsort((samples.k, samples.case_id.astype(str), samples.case_end_time))


def enhance_from_probabilities(samples: PrefixDataset, p0, p1, seed: int) -> EnhancedLog:
    """Draw ``Y(0) ~ Bernoulli(p0)`` and ``Y(1) ~ Bernoulli(p1)`` independently per prefix."""
    order = log_order(samples)
    s = samples.subset(order)
    p0 = np.asarray(p0, dtype=float)[order]
    p1 = np.asarray(p1, dtype=float)[order]
    u0 = keyed_uniforms(seed, s.case_id, s.k, 0)
    u1 = keyed_uniforms(seed, s.case_id, s.k, 1)
    return EnhancedLog(s, (u0 < p0).astype(np.int64), (u1 < p1).astype(np.int64), p0, p1)


def sample_potential_outcomes(gen: OutcomeGenerator, samples: PrefixDataset, seed: int = 0) -> EnhancedLog:
    p0, p1 = gen.probabilities(samples.X)
    return enhance_from_probabilities(samples, p0, p1, seed)


@dataclass(frozen=True)
class RealismReport:
    results: tuple[tuple[int, TwoSampleResult], ...]  # (draw, result)
    threshold: float = 0.05

    def p_values(self) -> dict[str, list[float]]:
        out: dict[str, list[float]] = {}
        for _, r in self.results:
            out.setdefault(r.test_name, []).append(r.p_value)
        return out

    def median_p_values(self) -> dict[str, float]:
        return {name: float(np.median(ps)) for name, ps in self.p_values().items()}

    @property
    def passed(self) -> bool:
        return all(p > self.threshold for p in self.median_p_values().values())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(d, r.test_name, r.statistic, r.p_value, r.n_permutations) for d, r in self.results],
            columns=["draw", "test", "statistic", "p_value", "n_permutations"],
        )


def realism_check(
    gen: OutcomeGenerator,
    real_samples: PrefixDataset,
    n_draws: int = 1,
    tests=DEFAULT_TESTS,
    *,
    n_perm: int = 1000,
    seed: int = 0,
    max_samples: int | None = 2000,
) -> RealismReport:
    """Compare generated factual outcomes with the observed ones.

    For each draw, every prefix gets an outcome sampled under its observed
    treatment; each two-sample test then compares generated against real
    outcomes. The check passes when every test's median p-value exceeds 0.05.
    ``max_samples`` caps the rows used (the neighbour and spanning-tree tests
    are quadratic).
    """
    unknown = [t for t in tests if t not in TESTS]
    if unknown:
        raise ValueError(f"unknown test(s) {unknown}; choose from {sorted(TESTS)}")
    rng = np.random.default_rng(seed)
    rows = np.arange(len(real_samples))
    if max_samples is not None and len(rows) > max_samples:
        rows = np.sort(rng.choice(rows, max_samples, replace=False))
    sub = real_samples.subset(rows)
    p = gen.factual_probability(sub.X, sub.treatment)
    real = sub.outcome.astype(float)
    results = []
    for d in range(n_draws):
        fake = (rng.random(len(p)) < p).astype(float)
        for name in tests:
            results.append((d, run_test(name, fake, real, n_perm=n_perm, seed=seed + d)))
    return RealismReport(tuple(results))

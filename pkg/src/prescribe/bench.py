"""Synthetic ground-truth logs and net-gain evaluation of treatment policies."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import pandas as pd

from . import _io
from .eventlog import Event, EventLog, LogSchema, PrefixDataset, Trace
from .generator import EnhancedLog, keyed_uniforms, log_order
from .policy import Environment, RewardConfig, net_gain

__all__ = [
    "GROUPS", "SyntheticSpec", "SyntheticLog", "generate_synthetic_log", "synthetic_schema", "truth_enhanced_log",
    "EvaluationReport", "evaluate_policies", "oracle_net_gains", "net_gain",
]

GROUPS = ("persuadable", "do_not_disturb", "sure_thing", "lost_cause")
ACTIVITIES = ("check", "review", "contact", "update")
ROLLING_WINDOW = 100


@dataclass(frozen=True)
class SyntheticSpec:
    """Four-group process whose response to treatment is set by the signs of two static features.

    ``x1 > 0, x2 > 0`` is persuadable, ``x1 > 0, x2 <= 0`` do-not-disturb,
    ``x1 <= 0, x2 > 0`` sure thing and the rest lost causes. ``group_probs``
    gives ``(P(Y=1 | T=0), P(Y=1 | T=1))`` per group. For persuadables the
    treated probability falls linearly by ``ramp`` from the first to the
    ``max_length``-th prefix, so early treatment pays off more.
    """

    n_cases: int = 2000
    min_length: int = 3
    max_length: int = 8
    n_noise_features: int = 1
    group_probs: Mapping[str, tuple[float, float]] = field(default_factory=lambda: {
        "persuadable": (0.05, 0.95),
        "do_not_disturb": (0.95, 0.05),
        "sure_thing": (0.95, 0.95),
        "lost_cause": (0.05, 0.05),
    })
    ramp: float = 0.5
    propensity: float = 0.5
    mean_interarrival_s: float = 3600.0
    mean_gap_s: float = 7200.0
    start: str = "2020-01-01T00:00:00+00:00"
    seed: int = 0

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("n_cases must be positive")
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError("need 1 <= min_length <= max_length")
        if not 0.0 < self.propensity < 1.0:
            raise ValueError("propensity must lie strictly between 0 and 1")
        if set(self.group_probs) != set(GROUPS):
            raise ValueError(f"group_probs must cover exactly {GROUPS}")
        for g, pair in self.group_probs.items():
            if len(pair) != 2 or not all(0.0 <= p <= 1.0 for p in pair):
                raise ValueError(f"probabilities for {g} must be two values in [0, 1]")
        p1 = self.group_probs["persuadable"][1]
        if self.ramp < 0 or p1 - self.ramp < 0:
            raise ValueError("ramp must keep the persuadable treated probability in [0, 1]")
        if self.n_noise_features < 0 or self.mean_interarrival_s <= 0 or self.mean_gap_s <= 0:
            raise ValueError("invalid noise or timing parameters")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["group_probs"] = {g: list(v) for g, v in self.group_probs.items()}
        return d

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SyntheticSpec":
        doc = dict(doc)
        if "group_probs" in doc:
            doc["group_probs"] = {g: tuple(v) for g, v in doc["group_probs"].items()}
        return cls(**doc)

    def groups(self, x1, x2) -> np.ndarray:
        x1, x2 = np.asarray(x1), np.asarray(x2)
        idx = np.where(x1 > 0, np.where(x2 > 0, 0, 1), np.where(x2 > 0, 2, 3))
        return np.asarray(GROUPS, dtype=object)[idx]

    def probabilities(self, x1, x2, k) -> tuple[np.ndarray, np.ndarray]:
        """``(p0, p1)`` for treatment applied at prefix ``k`` (p0 does not depend on ``k``)."""
        groups = self.groups(x1, x2)
        k = np.asarray(k, dtype=float)
        p0 = np.array([self.group_probs[g][0] for g in groups])
        p1 = np.array([self.group_probs[g][1] for g in groups])
        frac = (k - 1) / max(1, self.max_length - 1)
        p1 = np.where(groups == "persuadable", p1 - self.ramp * np.clip(frac, 0.0, 1.0), p1)
        return p0, p1


@dataclass(frozen=True)
class SyntheticLog:
    log: EventLog
    truth: pd.DataFrame  # case_id, k, group, p0, p1, treated_at


def _case_ids(n: int) -> list[str]:
    width = len(str(n))
    return [f"case_{i:0{width}d}" for i in range(n)]


def generate_synthetic_log(spec: SyntheticSpec) -> SyntheticLog:
    """Sample a log and keep the per-prefix potential-outcome probabilities.

    A treated case receives treatment at a uniformly chosen prefix and its
    outcome is drawn from ``p1`` at that prefix; an untreated case draws from
    ``p0``. Static features ``x1, x2, ...`` are repeated on every event.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_cases
    ids = _case_ids(n)
    x = rng.uniform(-1.0, 1.0, (n, 2 + spec.n_noise_features))
    lengths = rng.integers(spec.min_length, spec.max_length + 1, n)
    treated = rng.random(n) < spec.propensity
    treat_k = np.array([rng.integers(1, L + 1) for L in lengths])
    starts = np.cumsum(rng.exponential(spec.mean_interarrival_s, n))
    origin = datetime.fromisoformat(spec.start).astimezone(timezone.utc)
    static = [f"x{j + 1}" for j in range(x.shape[1])]

    traces, truth = [], []
    for i in range(n):
        L = int(lengths[i])
        ks = np.arange(1, L + 1)
        p0, p1 = spec.probabilities(np.full(L, x[i, 0]), np.full(L, x[i, 1]), ks)
        t = int(treated[i])
        kt = int(treat_k[i]) if t else 0
        y = int(rng.random() < (p1[kt - 1] if t else p0[0]))
        gaps = np.r_[0.0, rng.exponential(spec.mean_gap_s, L - 1)]
        offsets = np.floor(starts[i] + np.cumsum(gaps))
        acts = rng.choice(len(ACTIVITIES), L)
        amounts = np.round(rng.gamma(2.0, 500.0, L), 2)
        events = []
        for j in range(L):
            attrs = {s: float(np.round(x[i, c], 6)) for c, s in enumerate(static)}
            attrs["amount"] = float(amounts[j])
            events.append(Event(ACTIVITIES[acts[j]], ids[i], origin + timedelta(seconds=float(offsets[j])), attrs))
        traces.append(Trace(ids[i], tuple(events), t, y))
        group = spec.groups(x[i, :1], x[i, 1:2])[0]
        truth.extend((ids[i], int(k), group, float(a), float(b), kt) for k, a, b in zip(ks, p0, p1))

    traces.sort(key=lambda tr: (tr.start_time, tr.case_id))
    schema = {**{s: "numeric" for s in static}, "amount": "numeric"}
    log = EventLog(tuple(traces), schema, tuple(static), ("amount",))
    frame = pd.DataFrame(truth, columns=["case_id", "k", "group", "p0", "p1", "treated_at"])
    return SyntheticLog(log, frame)


def synthetic_schema(spec: SyntheticSpec) -> LogSchema:
    """Column layout used when a synthetic log is written as CSV."""
    static = tuple(f"x{j + 1}" for j in range(2 + spec.n_noise_features))
    return LogSchema("case_id", "activity", "timestamp", "treatment", "outcome",
                     static_cols=static, dynamic_cols=("amount",))


def truth_enhanced_log(samples: PrefixDataset, truth: pd.DataFrame, seed: int = 0) -> EnhancedLog:
    """Potential outcomes drawn from the true probabilities.

    One uniform per case and arm is shared across prefixes, so the outcomes a
    case would have under treatment at different prefixes are coupled the
    way a single real case would be.
    """
    key = truth.set_index(["case_id", "k"])
    idx = pd.MultiIndex.from_arrays([samples.case_id.astype(str), samples.k])
    missing = ~idx.isin(key.index)
    if missing.any():
        raise KeyError(f"no ground truth for prefix {idx[np.flatnonzero(missing)[0]]}")
    p0 = key.loc[idx, "p0"].to_numpy(dtype=float)
    p1 = key.loc[idx, "p1"].to_numpy(dtype=float)
    order = log_order(samples)
    s = samples.subset(order)
    p0, p1 = p0[order], p1[order]
    zeros = np.zeros(len(s), dtype=np.int64)
    u0 = keyed_uniforms(seed, s.case_id, zeros, 0)
    u1 = keyed_uniforms(seed, s.case_id, zeros, 1)
    return EnhancedLog(s, (u0 < p0).astype(np.int64), (u1 < p1).astype(np.int64), p0, p1)


def oracle_net_gains(enhanced: EnhancedLog, cfg: RewardConfig) -> tuple[np.ndarray, np.ndarray]:
    """Best achievable net gain per case with hindsight, and whether it treats.

    The oracle compares not treating with treating at the best prefix and
    keeps the larger net gain (ties leave the case untreated). With one
    prefix per case this is "treat iff ``Y(1) > Y(0)``". Cases are in log
    order.
    """
    gains, treats = [], []
    for _, rows in enhanced.case_slices():
        untreated = net_gain(0, int(enhanced.y0[rows[-1]]), cfg)
        treated = [net_gain(1, int(enhanced.y1[r]), cfg) for r in rows]
        best = max(treated)
        treats.append(best > untreated)
        gains.append(best if best > untreated else untreated)
    return np.asarray(gains, dtype=float), np.asarray(treats)


@dataclass(frozen=True)
class EvaluationReport:
    per_case: pd.DataFrame  # policy, case_index, case_id, treated, net_gain, rolling_mean_100
    config: dict

    @property
    def policies(self) -> list[str]:
        return list(dict.fromkeys(self.per_case["policy"]))

    @property
    def totals(self) -> dict[str, float]:
        return {p: float(g["net_gain"].sum()) for p, g in self.per_case.groupby("policy", sort=False)}

    @property
    def means(self) -> dict[str, float]:
        return {p: float(g["net_gain"].mean()) for p, g in self.per_case.groupby("policy", sort=False)}

    @property
    def treatment_rates(self) -> dict[str, float]:
        return {p: float(g["treated"].mean()) for p, g in self.per_case.groupby("policy", sort=False)}

    def net_gains(self, policy: str) -> np.ndarray:
        return self.per_case.loc[self.per_case["policy"] == policy, "net_gain"].to_numpy(dtype=float)

    def summary(self) -> pd.DataFrame:
        return pd.DataFrame({
            "policy": self.policies,
            "total_net_gain": [self.totals[p] for p in self.policies],
            "mean_net_gain": [self.means[p] for p in self.policies],
            "treatment_rate": [self.treatment_rates[p] for p in self.policies],
        })

    def save(self, path: str | Path) -> Path:
        path = _io.write_csv(path, self.per_case)
        _io.write_json(Path(path).with_suffix(".summary.json"), {
            "kind": "evaluation_report", "version": _io.FORMAT_VERSION, "config": self.config,
            "totals": self.totals, "treatment_rates": self.treatment_rates,
        })
        return path


DecideFn = Callable[[np.ndarray], int]


def evaluate_policies(
    enhanced: EnhancedLog,
    policies: Mapping[str, tuple[DecideFn, np.ndarray | None]],
    cfg: RewardConfig | None = None,
    *,
    include_oracle: bool = True,
    window: int = ROLLING_WINDOW,
) -> EvaluationReport:
    """Replay every case through every policy and record the net gain it realizes.

    ``policies`` maps a name to ``(decide, states)`` where ``states`` is the
    per-prefix state table the policy reads (``None`` for state-free rules).
    """
    cfg = cfg or RewardConfig()
    frames = []
    for name, (fn, states) in policies.items():
        table = np.zeros((len(enhanced), 1)) if states is None else states
        env = Environment(enhanced, table, cfg)
        gains, treated, cids = [], [], []
        for ep in env:
            res = env.play(ep, fn)
            gains.append(res.net_gain)
            treated.append(res.treated_at is not None)
            cids.append(res.case_id)
        frames.append(_policy_frame(name, cids, gains, treated, window))
    if include_oracle:
        gains, treated = oracle_net_gains(enhanced, cfg)
        cids = [c for c, _ in enhanced.case_slices()]
        frames.append(_policy_frame("oracle", cids, gains, treated, window))
    per_case = pd.concat(frames, ignore_index=True)
    return EvaluationReport(per_case, {"gain": cfg.gain, "cost": cfg.cost, "window": window})


def _policy_frame(name, cids, gains, treated, window) -> pd.DataFrame:
    gains = np.asarray(gains, dtype=float)
    return pd.DataFrame({
        "policy": name,
        "case_index": np.arange(len(gains)),
        "case_id": cids,
        "treated": np.asarray(treated, dtype=np.int64),
        "net_gain": gains,
        "rolling_mean_100": pd.Series(gains).rolling(window, min_periods=1).mean().to_numpy(),
    })


def treat_all(_state) -> int:
    return 1


def treat_none(_state) -> int:
    return 0

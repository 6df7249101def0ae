"""Replay environment over an enhanced log, the treatment reward, and a PPO agent."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np
import pandas as pd
from scipy.special import log_softmax, softmax

from . import _io
from .generator import EnhancedLog
from .nn import Adam, Mlp

POLICY_STATE_NAMES = ("theta_u", "theta_l", "rho", "k_norm")
CATE_STATE_NAMES = ("theta_u", "theta_l", "k_norm")
BASELINE_STATE_NAMES = ("delta", "gamma", "k_norm")


class InconsistentOutcome(ValueError):
    pass


class MissingStateRow(KeyError):
    pass


class AgentDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class RewardConfig:
    gain: float = 50.0
    cost: float = 25.0

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if self.cost < 0:
            raise ValueError("cost must be non-negative")


def reward(t: int, true_effect: int, outcome_if_untreated: int, cfg: RewardConfig) -> float:
    """Reward for action ``t`` given ``Y(1) - Y(0)`` and ``Y(0)``.

    Nonzero effects ignore the outcome column. The penalties for a missed
    persuadable, a harmful treatment and a wasted treatment deliberately
    deviate from the realized net gain.
    """
    if t not in (0, 1) or true_effect not in (-1, 0, 1) or outcome_if_untreated not in (0, 1):
        raise InconsistentOutcome(f"invalid inputs t={t}, effect={true_effect}, y0={outcome_if_untreated}")
    if true_effect == 1 and outcome_if_untreated != 0:
        raise InconsistentOutcome("a positive effect requires Y(0) = 0")
    if true_effect == -1 and outcome_if_untreated != 1:
        raise InconsistentOutcome("a negative effect requires Y(0) = 1")
    g, c = cfg.gain, cfg.cost
    if t == 1:
        return {1: g - c, -1: -c - g, 0: -c}[true_effect]
    if true_effect == 1:
        return -g
    if true_effect == -1:
        return g
    return g if outcome_if_untreated == 1 else 0.0


def net_gain(t: int, y_of_t: int, cfg: RewardConfig) -> float:
    """Money realized by one case: ``Y(t) * gain - t * cost``."""
    if t not in (0, 1) or y_of_t not in (0, 1):
        raise ValueError(f"binary inputs required, got t={t}, y={y_of_t}")
    return y_of_t * cfg.gain - t * cfg.cost


@dataclass(frozen=True)
class PolicyState:
    theta_u: float
    theta_l: float
    rho: float
    k_norm: float

    def __post_init__(self):
        if self.theta_l > self.theta_u:
            raise ValueError("theta_l must not exceed theta_u")

    def as_array(self) -> np.ndarray:
        return np.array([self.theta_u, self.theta_l, self.rho, self.k_norm])


@dataclass(frozen=True)
class BaselineState:
    delta: float
    gamma: float
    k_norm: float

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.gamma, self.k_norm])


def policy_states(theta_l, theta_u, rho, k, max_k: int) -> np.ndarray:
    """Rows ``(theta_u, theta_l, rho, k / max_k)``."""
    return np.column_stack([theta_u, theta_l, rho, np.asarray(k, dtype=float) / max_k])


def cate_only_states(theta_l, theta_u, k, max_k: int) -> np.ndarray:
    return np.column_stack([theta_u, theta_l, np.asarray(k, dtype=float) / max_k])


def baseline_states(p0, p1, k, max_k: int) -> np.ndarray:
    """Rows ``(delta, gamma, k / max_k)`` with ``delta = p(0)`` and ``gamma = max(p(0), p(1))``."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    return np.column_stack([p0, np.maximum(p0, p1), np.asarray(k, dtype=float) / max_k])


@dataclass(frozen=True)
class Episode:
    case_id: str
    rows: np.ndarray
    states: np.ndarray
    y0: np.ndarray
    y1: np.ndarray

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class EpisodeResult:
    case_id: str
    states: np.ndarray  # states at which a decision was taken
    actions: np.ndarray
    rewards: np.ndarray  # per decision; only the last is nonzero
    net_gain: float
    treated_at: int | None  # 0-based step index

    @property
    def n_decisions(self) -> int:
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


class Environment:
    """Cases replayed in log order (ascending case end time), one decision per prefix.

    Treatment is applied at most once; after it the rest of the case runs
    without further decisions. The reward arrives on the final decision.
    """

    def __init__(self, enhanced: EnhancedLog, states, cfg: RewardConfig | None = None):
        self.cfg = cfg or RewardConfig()
        self.enhanced = enhanced
        self.states = self._align(enhanced, states)
        self.episodes = [
            Episode(cid, rows, self.states[rows], enhanced.y0[rows], enhanced.y1[rows])
            for cid, rows in enhanced.case_slices()
        ]

    @staticmethod
    def _align(enhanced: EnhancedLog, states) -> np.ndarray:
        if isinstance(states, Mapping):
            rows = []
            for cid, k in zip(enhanced.samples.case_id, enhanced.samples.k):
                key = (str(cid), int(k))
                if key not in states:
                    raise MissingStateRow(f"no state for case {key[0]!r} prefix {key[1]}")
                rows.append(np.asarray(states[key], dtype=float))
            return np.vstack(rows)
        arr = np.asarray(states, dtype=float)
        if arr.ndim != 2 or len(arr) != len(enhanced):
            raise MissingStateRow(f"state table has {len(arr)} rows for {len(enhanced)} prefixes")
        return arr

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self) -> Iterator[Episode]:
        return iter(self.episodes)

    def play(self, episode: Episode, decide: Callable[[np.ndarray], int]) -> EpisodeResult:
        actions = []
        treated_at = None
        for i in range(len(episode)):
            a = int(decide(episode.states[i]))
            if a not in (0, 1):
                raise ValueError(f"policy returned non-binary action {a!r}")
            actions.append(a)
            if a == 1:
                treated_at = i
                break
        last = treated_at if treated_at is not None else len(episode) - 1
        y0, y1 = int(episode.y0[last]), int(episode.y1[last])
        t = 1 if treated_at is not None else 0
        rewards = np.zeros(len(actions))
        rewards[-1] = reward(t, y1 - y0, y0, self.cfg)
        gain = net_gain(t, y1 if t else y0, self.cfg)
        return EpisodeResult(episode.case_id, episode.states[: len(actions)], np.asarray(actions), rewards, gain, treated_at)


def make_environment(enhanced: EnhancedLog, states, cfg: RewardConfig | None = None) -> Environment:
    return Environment(enhanced, states, cfg)


@dataclass(frozen=True)
class PPOConfig:
    hidden: tuple[int, ...] = (64, 64)
    clip: float = 0.2
    discount: float = 1.0
    learning_rate: float = 3e-4
    epochs: int = 4
    batch_episodes: int = 64
    minibatch_size: int = 64
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    reward_scale: float | None = None  # defaults to gain + cost
    seed: int = 0


@dataclass
class AgentPolicy:
    """Shared tanh trunk with a two-logit action head and a scalar value head."""

    trunk: Mlp
    actor: Mlp
    critic: Mlp
    config: PPOConfig
    state_names: tuple[str, ...] = ()
    optimizer: Adam | None = None
    eval_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def init(cls, state_dim: int, cfg: PPOConfig | None = None, state_names=()) -> "AgentPolicy":
        cfg = cfg or PPOConfig()
        rng = np.random.default_rng(cfg.seed)
        trunk = Mlp.init([state_dim, *cfg.hidden], ["tanh"] * len(cfg.hidden), rng)
        actor = Mlp.init([cfg.hidden[-1], 2], ["identity"], rng, out_scale=0.01)
        critic = Mlp.init([cfg.hidden[-1], 1], ["identity"], rng)
        return cls(trunk, actor, critic, cfg, tuple(state_names), Adam(lr=cfg.learning_rate),
                   np.random.default_rng([cfg.seed, 1]))

    @property
    def params(self) -> list[np.ndarray]:
        return self.trunk.params + self.actor.params + self.critic.params

    @property
    def state_dim(self) -> int:
        return self.trunk.sizes[0]

    def logits(self, S) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        return self.actor(self.trunk(S))

    def action_probs(self, S) -> np.ndarray:
        return softmax(self.logits(S), axis=1)

    def value(self, S) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        return self.critic(self.trunk(S))[:, 0]

    def to_dict(self) -> dict:
        c = self.config
        return {
            "kind": "agent_policy",
            "version": _io.FORMAT_VERSION,
            "state_names": list(self.state_names),
            "trunk": self.trunk.to_dict(),
            "actor": self.actor.to_dict(),
            "critic": self.critic.to_dict(),
            "config": {**c.__dict__, "hidden": list(c.hidden)},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AgentPolicy":
        _io.check_version(doc, "agent_policy")
        c = dict(doc["config"])
        c["hidden"] = tuple(c["hidden"])
        cfg = PPOConfig(**c)
        return cls(Mlp.from_dict(doc["trunk"]), Mlp.from_dict(doc["actor"]), Mlp.from_dict(doc["critic"]),
                   cfg, tuple(doc["state_names"]), Adam(lr=cfg.learning_rate), np.random.default_rng([cfg.seed, 1]))


def save_policy(path: str | Path, policy: AgentPolicy) -> Path:
    return _io.write_json(path, policy.to_dict())


def load_policy(path: str | Path) -> AgentPolicy:
    return AgentPolicy.from_dict(_io.read_json(path))


def decide(policy: AgentPolicy, state, mode: str = "greedy", rng: np.random.Generator | None = None) -> int:
    """Greedy picks the likelier action (ties treat nothing); sample draws from the policy."""
    logits = policy.logits(state)[0]
    if not np.all(np.isfinite(logits)):
        raise AgentDiverged(f"non-finite policy output {logits}")
    if mode == "greedy":
        return int(logits[1] > logits[0])
    if mode == "sample":
        p1 = softmax(logits)[1]
        return int((rng or policy.eval_rng).random() < p1)
    raise ValueError(f"unknown mode {mode!r}")


def ppo_loss_and_grads(policy: AgentPolicy, S, A, old_logp, adv, returns):
    """Clipped surrogate + value error - entropy bonus, with gradients for ``policy.params``."""
    cfg = policy.config
    n = len(A)
    h, tcache = policy.trunk.forward(S)
    z, acache = policy.actor.forward(h)
    v, ccache = policy.critic.forward(h)
    v = v[:, 0]
    logp_all = log_softmax(z, axis=1)
    pi = np.exp(logp_all)
    rows = np.arange(n)
    logp = logp_all[rows, A]
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    entropy = -np.sum(pi * logp_all, axis=1)
    policy_loss = -surr.mean()
    value_loss = np.mean((v - returns) ** 2)
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy.mean()

    d_logp = -np.where(ratio * adv <= clipped * adv, ratio * adv, 0.0) / n
    onehot = np.zeros_like(z)
    onehot[rows, A] = 1.0
    dz = d_logp[:, None] * (onehot - pi)
    dz += cfg.entropy_coef / n * pi * (logp_all + entropy[:, None])
    dv = (2 * cfg.value_coef * (v - returns) / n)[:, None]
    g_actor, dh_a = policy.actor.backward(acache, dz)
    g_critic, dh_c = policy.critic.backward(ccache, dv)
    g_trunk, _ = policy.trunk.backward(tcache, dh_a + dh_c)
    stats = {"policy_loss": policy_loss, "value_loss": value_loss, "entropy": float(entropy.mean()),
             "clip_frac": float(np.mean(np.abs(ratio - 1) > cfg.clip))}
    return float(loss), g_trunk + g_actor + g_critic, stats


@dataclass
class LearningCurve:
    rows: list[dict] = field(default_factory=list)

    def frame(self, window: int = 100) -> pd.DataFrame:
        df = pd.DataFrame(self.rows, columns=["episode_index", "case_id", "action_count", "treated",
                                              "episode_reward", "episode_net_gain"])
        df["rolling_mean_100"] = df["episode_net_gain"].rolling(window, min_periods=1).mean()
        return df

    @property
    def net_gains(self) -> np.ndarray:
        return np.array([r["episode_net_gain"] for r in self.rows], dtype=float)

    def save(self, path: str | Path) -> Path:
        return _io.write_csv(path, self.frame())


def _update(policy: AgentPolicy, batch: list[tuple[EpisodeResult, np.ndarray]], scale: float,
            rng: np.random.Generator, iteration: int) -> None:
    cfg = policy.config
    S = np.vstack([res.states for res, _ in batch])
    A = np.concatenate([res.actions for res, _ in batch])
    old_logp = np.concatenate([lp for _, lp in batch])
    returns = []
    for res, _ in batch:
        g, out = 0.0, np.empty(res.n_decisions)
        for i in reversed(range(res.n_decisions)):
            g = res.rewards[i] / scale + cfg.discount * g
            out[i] = g
        returns.append(out)
    G = np.concatenate(returns)
    adv = G - policy.value(S)
    n = len(A)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch_size):
            idx = order[lo:lo + cfg.minibatch_size]
            loss, grads, _ = ppo_loss_and_grads(policy, S[idx], A[idx], old_logp[idx], adv[idx], G[idx])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise AgentDiverged(f"non-finite loss at update {iteration}")
            policy.optimizer.step(policy.params, grads)


def train_agent(env: Environment, cfg: PPOConfig | None = None, n_episodes: int | None = None,
                policy: AgentPolicy | None = None, state_names=()) -> tuple[AgentPolicy, LearningCurve]:
    """Learn a treatment policy online over the environment's cases.

    Episodes are served in environment order (cycling if ``n_episodes``
    exceeds the number of cases). Every ``batch_episodes`` completed
    episodes the agent takes ``epochs`` passes of clipped policy-gradient
    updates with Monte-Carlo returns minus the value baseline as advantages.
    """
    cfg = cfg or PPOConfig()
    if len(env) == 0:
        raise ValueError("environment has no episodes")
    policy = policy or AgentPolicy.init(env.state_dim, cfg, state_names)
    n_episodes = len(env) if n_episodes is None else n_episodes
    scale = cfg.reward_scale or (env.cfg.gain + env.cfg.cost)
    rng = np.random.default_rng([cfg.seed, 2])
    curve = LearningCurve()
    batch: list[tuple[EpisodeResult, np.ndarray]] = []
    for e in range(n_episodes):
        ep = env.episodes[e % len(env)]
        logps: list[float] = []

        def _act(s):
            lp = log_softmax(policy.logits(s)[0])
            if not np.all(np.isfinite(lp)):
                raise AgentDiverged(f"non-finite policy output at episode {e}")
            a = int(rng.random() < np.exp(lp[1]))
            logps.append(lp[a])
            return a

        res = env.play(ep, _act)
        curve.rows.append({
            "episode_index": e, "case_id": res.case_id, "action_count": res.n_decisions,
            "treated": int(res.treated_at is not None), "episode_reward": res.total_reward,
            "episode_net_gain": res.net_gain,
        })
        batch.append((res, np.asarray(logps)))
        if len(batch) == cfg.batch_episodes:
            _update(policy, batch, scale, rng, e // cfg.batch_episodes)
            batch = []
    if batch:
        _update(policy, batch, scale, rng, n_episodes // cfg.batch_episodes)
    return policy, curve

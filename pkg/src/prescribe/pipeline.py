"""End-to-end run: split, model training, data enhancement, policy learning and evaluation."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import _io, bench, causal, conformal, eventlog, generator, policy, predictor

log = logging.getLogger(__name__)

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs",
    "run_name": None,
    "input": {"log": None, "schema": None, "synthetic": None},
    "split": {"fraction": 0.5, "calibration_fraction": 0.2, "max_k": None},
    "predictor": {},
    "conformal": {"alpha": 0.1},
    "causal": {"level": 0.95},
    "generator": {"realism": {"n_draws": 1, "n_perm": 200, "max_samples": 2000}},
    "policy": {"agents": ["cate_rho", "cate", "baseline"], "n_episodes": None},
    "reward": {"gain": 50.0, "cost": 25.0},
}

AGENT_STATES = {
    "cate_rho": policy.POLICY_STATE_NAMES,
    "cate": policy.CATE_STATE_NAMES,
    "baseline": policy.BASELINE_STATE_NAMES,
}


class PhaseError(RuntimeError):
    """A pipeline phase failed; ``phase`` names it."""

    def __init__(self, phase: str, cause: BaseException | str):
        self.phase = phase
        self.cause = cause
        super().__init__(f"phase {phase!r} failed: {cause}")


def merge_config(base: Mapping, override: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, overrides: Mapping | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        cfg = merge_config(cfg, json.loads(Path(path).read_text()))
    if overrides:
        cfg = merge_config(cfg, overrides)
    return cfg


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:10]


def _build(cls, section: Mapping, seed: int | None = None):
    names = {f.name for f in fields(cls)}
    kwargs = {k: v for k, v in section.items() if k in names}
    if seed is not None and "seed" in names:
        kwargs.setdefault("seed", seed)
    for f in fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    return cls(**kwargs)


@dataclass
class Models:
    predictor: predictor.GbdtModel
    calibrator: conformal.ConformalCalibrator
    forest: causal.CausalForest
    level: float


def fit_models(train: eventlog.PrefixDataset, cfg: Mapping, seed: int) -> Models:
    """Predictor on the earlier cases of ``train``, conformal threshold on the later ones, forest on all."""
    frac = cfg["split"]["calibration_fraction"]
    ends = {}
    for cid, end in zip(train.case_id, train.case_end_time):
        ends[cid] = end
    cases = sorted(ends, key=lambda c: (ends[c], c))
    n_fit = min(len(cases) - 1, max(1, int(round((1 - frac) * len(cases)))))
    fit_cases = set(cases[:n_fit])
    in_fit = np.array([c in fit_cases for c in train.case_id])
    model = predictor.fit(train.subset(np.flatnonzero(in_fit)), cfg=_build(predictor.TrainConfig, cfg["predictor"], seed))
    cal = conformal.calibrate(model, train.subset(np.flatnonzero(~in_fit)), cfg["conformal"]["alpha"])
    forest = causal.fit_forest(train, _build(causal.ForestConfig, cfg["causal"], seed))
    return Models(model, cal, forest, float(cfg["causal"]["level"]))


def state_tables(models: Models, samples: eventlog.PrefixDataset, max_k: int) -> dict[str, np.ndarray]:
    """Per-prefix state rows for each agent kind, aligned with ``samples``."""
    ci = causal.estimate_cate(models.forest, samples.X, models.level)
    rho = conformal.rho_scores(models.calibrator, models.predictor, samples.X)
    p0, p1 = predictor.predict_proba(models.predictor, samples.X)
    return {
        "cate_rho": policy.policy_states(ci.theta_l, ci.theta_u, rho, samples.k, max_k),
        "cate": policy.cate_only_states(ci.theta_l, ci.theta_u, samples.k, max_k),
        "baseline": policy.baseline_states(p0, p1, samples.k, max_k),
    }


@dataclass
class RunResult:
    run_dir: Path
    artifacts: dict[str, Path] = field(default_factory=dict)
    report: bench.EvaluationReport | None = None
    realism: generator.RealismReport | None = None


class _Phases:
    def __init__(self):
        self.current = "setup"

    def __call__(self, name: str) -> "_Phases":
        self.current = name
        log.info("phase %s", name)
        return self

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PhaseError):
            raise PhaseError(self.current, exc) from exc
        return False


def run_pipeline(config: str | Path | Mapping, overrides: Mapping | None = None) -> RunResult:
    """Run every phase and persist its artifacts in a fresh run directory.

    Model training uses the earlier half of the cases (by time); the generator,
    the agents and the evaluation only see the later half.
    """
    phase = _Phases()
    with phase("config"):
        cfg = load_config(config, overrides) if not isinstance(config, Mapping) else load_config(None, merge_config(config, overrides or {}))
        seed = int(cfg["seed"])
        name = cfg["run_name"] or f"{datetime.now(timezone.utc):%Y%m%dT%H%M%SZ}_{config_hash(cfg)}"
        run_dir = Path(cfg["output_dir"]) / name
        run_dir.mkdir(parents=True, exist_ok=True)
        result = RunResult(run_dir)
        art = result.artifacts
        art["config"] = _io.write_json(run_dir / "config.json", cfg)

    with phase("ingest"):
        src = cfg["input"]
        truth = None
        if src.get("synthetic") is not None:
            spec = bench.SyntheticSpec.from_dict({"seed": seed, **src["synthetic"]})
            syn = bench.generate_synthetic_log(spec)
            full_log, truth = syn.log, syn.truth
            art["truth"] = _io.write_csv(run_dir / "ground_truth.csv", truth)
        else:
            if not src.get("log") or not Path(src["log"]).is_file():
                raise FileNotFoundError(f"event log not found: {src.get('log')!r}")
            schema = src["schema"]
            schema = eventlog.LogSchema.from_json(schema) if isinstance(schema, str) else eventlog.LogSchema.from_dict(schema)
            full_log = eventlog.ingest_csv(src["log"], schema)

    with phase("split"):
        train_log, later_log = eventlog.temporal_split(full_log, cfg["split"]["fraction"])
        overlap = set(train_log.case_ids) & set(later_log.case_ids)
        assert not overlap, f"cases in both phases: {sorted(overlap)[:5]}"
        art["split"] = _io.write_json(run_dir / "split.json", {
            "kind": "split", "version": _io.FORMAT_VERSION,
            "train": train_log.case_ids, "policy": later_log.case_ids,
        })

    with phase("encode"):
        train, encoder = eventlog.encode_prefixes(train_log, cfg["split"]["max_k"])
        later, _ = eventlog.encode_prefixes(later_log, encoder=encoder)
        art["encoded_train"] = eventlog.save_dataset(run_dir / "encoded_train.csv", train, encoder)
        art["encoded_policy"] = eventlog.save_dataset(run_dir / "encoded_policy.csv", later, encoder)

    with phase("train-models"):
        models = fit_models(train, cfg, seed)
        art["predictor"] = predictor.save_model(run_dir / "predictor.json", models.predictor, models.calibrator)
        art["forest"] = causal.save_forest(run_dir / "forest.json", models.forest)

    with phase("train-generator"):
        gcfg = _build(generator.GeneratorConfig, cfg["generator"], seed)
        gen = generator.train_generator(later, gcfg)
        art["generator"] = generator.save_generator(run_dir / "generator.json", gen)

    with phase("enhance"):
        enhanced = generator.sample_potential_outcomes(gen, later, seed=seed)
        art["enhanced"] = enhanced.save(run_dir / "enhanced.csv")

    with phase("stat-test"):
        rc = cfg["generator"]["realism"]
        result.realism = generator.realism_check(gen, later, rc["n_draws"], n_perm=rc["n_perm"],
                                                 seed=seed, max_samples=rc["max_samples"])
        art["stattests"] = _io.write_csv(run_dir / "stattests.csv", result.realism.to_frame())

    with phase("train-policy"):
        rcfg = policy.RewardConfig(**cfg["reward"])
        pcfg = _build(policy.PPOConfig, cfg["policy"], seed)
        states = state_tables(models, enhanced.samples, encoder.max_k)
        agents = {}
        for kind in cfg["policy"]["agents"]:
            if kind not in AGENT_STATES:
                raise ValueError(f"unknown agent kind {kind!r}; choose from {sorted(AGENT_STATES)}")
            env = policy.make_environment(enhanced, states[kind], rcfg)
            agent, curve = policy.train_agent(env, pcfg, cfg["policy"]["n_episodes"], state_names=AGENT_STATES[kind])
            agents[kind] = agent
            suffix = "" if kind == cfg["policy"]["agents"][0] else f"_{kind}"
            art[f"policy{suffix}"] = policy.save_policy(run_dir / f"policy{suffix}.json", agent)
            art[f"learning_curve{suffix}"] = curve.save(run_dir / f"learning_curve{suffix}.csv")

    with phase("evaluate"):
        entries = {"treat_all": (bench.treat_all, None), "treat_none": (bench.treat_none, None)}
        for kind, agent in agents.items():
            entries[f"agent_{kind}"] = (lambda s, a=agent: policy.decide(a, s, "greedy"), states[kind])
        result.report = bench.evaluate_policies(enhanced, entries, rcfg)
        art["evaluation"] = result.report.save(run_dir / "evaluation.csv")
        if truth is not None:
            truth_log = bench.truth_enhanced_log(later, truth, seed)
            tstates = state_tables(models, truth_log.samples, encoder.max_k)
            tentries = {k: (fn, None if st is None else tstates[k.removeprefix("agent_")])
                        for k, (fn, st) in entries.items()}
            art["evaluation_truth"] = bench.evaluate_policies(truth_log, tentries, rcfg).save(
                run_dir / "evaluation_truth.csv")

    _io.write_json(run_dir / "manifest.json", {
        "kind": "run_manifest", "version": _io.FORMAT_VERSION,
        "artifacts": {k: str(Path(v).name) for k, v in art.items()},
        "realism_passed": bool(result.realism.passed),
        "totals": result.report.totals,
    })
    return result

"""Command line entry point: ``prescribe <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import _io, bench, causal, conformal, eventlog, generator, pipeline, policy, predictor


def _schema(path: str) -> eventlog.LogSchema:
    return eventlog.LogSchema.from_json(path)


def _reward(args) -> policy.RewardConfig:
    return policy.RewardConfig(gain=args.gain, cost=args.cost)


def cmd_ingest(args):
    log = eventlog.ingest_csv(args.log, _schema(args.schema))
    encoder = None
    if args.encoder:
        _, encoder, _ = eventlog.load_dataset(args.encoder)
    data, encoder = eventlog.encode_prefixes(log, args.max_k, encoder)
    eventlog.save_dataset(args.out, data, encoder)
    print(f"{len(log)} cases, {len(data)} prefixes (max_k={encoder.max_k}) -> {args.out}")


def cmd_split(args):
    schema = _schema(args.schema)
    log = eventlog.ingest_csv(args.log, schema)
    first, later = eventlog.temporal_split(log, args.fraction)
    out = Path(args.out_dir)
    _io.write_csv(out / "train_log.csv", eventlog.log_to_frame(first, schema))
    _io.write_csv(out / "policy_log.csv", eventlog.log_to_frame(later, schema))
    print(f"train: {len(first)} cases, policy: {len(later)} cases ({len(log) - len(first) - len(later)} dropped)")


def cmd_train_predictor(args):
    data, _, _ = eventlog.load_dataset(args.data)
    model = predictor.fit(data, cfg=predictor.TrainConfig(n_trees=args.n_trees, max_depth=args.max_depth,
                                                          learning_rate=args.learning_rate, seed=args.seed))
    predictor.save_model(args.out, model)
    print(f"final training log loss {model.train_loss[-1]:.4f} -> {args.out}")


def cmd_calibrate(args):
    model, _ = predictor.load_model(args.model)
    data, _, _ = eventlog.load_dataset(args.data)
    cal = conformal.calibrate(model, data, args.alpha)
    predictor.save_model(args.out or args.model, model, cal)
    print(f"qhat={cal.qhat_threshold:.6f} from {cal.n_calib} scores")


def cmd_train_causal(args):
    data, _, _ = eventlog.load_dataset(args.data)
    cfg = causal.ForestConfig(n_groups=args.n_groups, group_size=args.group_size, min_leaf=args.min_leaf, seed=args.seed)
    forest = causal.fit_forest(data, cfg)
    causal.save_forest(args.out, forest)
    print(f"{cfg.n_groups * cfg.group_size} trees -> {args.out}")


def cmd_train_generator(args):
    data, _, _ = eventlog.load_dataset(args.data)
    cfg = generator.GeneratorConfig(epochs=args.epochs, learning_rate=args.learning_rate,
                                    weight_decay=args.weight_decay, seed=args.seed)
    gen = generator.train_generator(data, cfg)
    generator.save_generator(args.out, gen)
    print(f"final loss {gen.loss_history[-1]:.4f} -> {args.out}")


def cmd_enhance(args):
    gen = generator.load_generator(args.generator)
    data, _, _ = eventlog.load_dataset(args.data)
    enhanced = generator.sample_potential_outcomes(gen, data, seed=args.seed)
    enhanced.save(args.out)
    print(f"{len(enhanced)} prefixes, mean effect {enhanced.true_effect.mean():+.4f} -> {args.out}")


def cmd_stat_test(args):
    gen = generator.load_generator(args.generator)
    data, _, _ = eventlog.load_dataset(args.data)
    report = generator.realism_check(gen, data, args.draws, tuple(args.tests), n_perm=args.n_perm, seed=args.seed)
    frame = report.to_frame()
    if args.out:
        _io.write_csv(args.out, frame)
    print(frame.to_string(index=False))
    print("realism check", "passed" if report.passed else "FAILED")
    return 0 if report.passed else 1


def _states(args, enhanced: generator.EnhancedLog, kind: str) -> np.ndarray:
    model, cal = predictor.load_model(args.predictor)
    if cal is None:
        raise SystemExit("predictor has no conformal calibrator; run `calibrate` first")
    models = pipeline.Models(model, cal, causal.load_forest(args.forest), args.level)
    max_k = args.max_k or int(enhanced.samples.k.max())
    return pipeline.state_tables(models, enhanced.samples, max_k)[kind]


def cmd_train_policy(args):
    enhanced = generator.EnhancedLog.load(args.enhanced)
    states = _states(args, enhanced, args.agent)
    env = policy.make_environment(enhanced, states, _reward(args))
    cfg = policy.PPOConfig(learning_rate=args.learning_rate, seed=args.seed)
    agent, curve = policy.train_agent(env, cfg, args.episodes, state_names=pipeline.AGENT_STATES[args.agent])
    policy.save_policy(args.out, agent)
    if args.curve:
        curve.save(args.curve)
    tail = curve.net_gains[-min(1000, len(curve.rows)):]
    print(f"{len(curve.rows)} episodes, final mean net gain {tail.mean():.2f} -> {args.out}")


def cmd_evaluate(args):
    enhanced = generator.EnhancedLog.load(args.enhanced)
    entries = {"treat_all": (bench.treat_all, None), "treat_none": (bench.treat_none, None)}
    for path in args.policy:
        agent = policy.load_policy(path)
        kind = next(k for k, names in pipeline.AGENT_STATES.items() if names == agent.state_names)
        entries[f"agent_{Path(path).stem}"] = (lambda s, a=agent: policy.decide(a, s), _states(args, enhanced, kind))
    report = bench.evaluate_policies(enhanced, entries, _reward(args))
    report.save(args.out)
    print(report.summary().to_string(index=False))


def cmd_synth(args):
    spec = bench.SyntheticSpec(n_cases=args.n_cases, propensity=args.propensity, seed=args.seed)
    syn = bench.generate_synthetic_log(spec)
    schema = bench.synthetic_schema(spec)
    _io.write_csv(args.out, eventlog.log_to_frame(syn.log, schema))
    _io.write_json(Path(args.out).with_suffix(".schema.json"), schema.to_dict())
    if args.truth:
        _io.write_csv(args.truth, syn.truth)
    print(f"{len(syn.log)} cases -> {args.out}")


def cmd_pipeline(args):
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if args.run_name:
        overrides["run_name"] = args.run_name
    reward = {k: v for k, v in (("gain", args.gain), ("cost", args.cost)) if v is not None}
    if reward:
        overrides["reward"] = reward
    if args.alpha is not None:
        overrides["conformal"] = {"alpha": args.alpha}
    if args.level is not None:
        overrides["causal"] = {"level": args.level}
    if args.set:
        for item in args.set:
            key, _, raw = item.partition("=")
            node = overrides
            *parents, leaf = key.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = json.loads(raw)
    try:
        result = pipeline.run_pipeline(args.config, overrides)
    except pipeline.PhaseError as exc:
        print(f"error in phase {exc.phase}: {exc.cause}", file=sys.stderr)
        return 2
    print(result.report.summary().to_string(index=False))
    print(f"artifacts in {result.run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prescribe", description="Prescriptive process monitoring toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=fn)
        return p

    def reward_flags(p):
        p.add_argument("--gain", type=float, default=50.0)
        p.add_argument("--cost", type=float, default=25.0)

    def model_flags(p):
        p.add_argument("--predictor", required=True, help="calibrated predictor JSON")
        p.add_argument("--forest", required=True)
        p.add_argument("--level", type=float, default=0.95)
        p.add_argument("--max-k", type=int)

    p = add("ingest", cmd_ingest, "read a CSV event log and encode its prefixes")
    p.add_argument("--log", required=True)
    p.add_argument("--schema", required=True, help="JSON column mapping")
    p.add_argument("--out", required=True)
    p.add_argument("--max-k", type=int)
    p.add_argument("--encoder", help="encoded dataset whose encoder should be reused")

    p = add("split", cmd_split, "temporal split into training and policy cases")
    p.add_argument("--log", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--out-dir", required=True)

    p = add("train-predictor", cmd_train_predictor, "fit the outcome classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-trees", type=int, default=200)
    p.add_argument("--max-depth", type=int, default=6)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)

    p = add("calibrate", cmd_calibrate, "attach a conformal threshold to a predictor")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--out")

    p = add("train-causal", cmd_train_causal, "fit the causal forest")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-groups", type=int, default=50)
    p.add_argument("--group-size", type=int, default=4)
    p.add_argument("--min-leaf", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = add("train-generator", cmd_train_generator, "fit the potential-outcome generator")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)

    p = add("enhance", cmd_enhance, "sample both potential outcomes for every prefix")
    p.add_argument("--generator", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = add("stat-test", cmd_stat_test, "compare generated and observed outcomes")
    p.add_argument("--generator", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tests", nargs="+", default=list(generator.DEFAULT_TESTS))
    p.add_argument("--draws", type=int, default=1)
    p.add_argument("--n-perm", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = add("train-policy", cmd_train_policy, "learn a treatment policy on an enhanced log")
    p.add_argument("--enhanced", required=True)
    model_flags(p)
    reward_flags(p)
    p.add_argument("--agent", choices=sorted(pipeline.AGENT_STATES), default="cate_rho")
    p.add_argument("--episodes", type=int)
    p.add_argument("--learning-rate", type=float, default=3e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", help="learning curve CSV")

    p = add("evaluate", cmd_evaluate, "net gain of policies and reference rules")
    p.add_argument("--enhanced", required=True)
    model_flags(p)
    reward_flags(p)
    p.add_argument("--policy", nargs="*", default=[])
    p.add_argument("--out", required=True)

    p = add("synth", cmd_synth, "write a synthetic four-group event log")
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="CSV of true per-prefix outcome probabilities")
    p.add_argument("--n-cases", type=int, default=2000)
    p.add_argument("--propensity", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)

    p = add("pipeline", cmd_pipeline, "run every phase from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--gain", type=float)
    p.add_argument("--cost", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--level", type=float)
    p.add_argument("--output-dir")
    p.add_argument("--run-name")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=JSON", help="override any config value")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return int(args.func(args) or 0)
    except (eventlog.EventLogError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

import json

import pandas as pd
import pytest

from prescribe import cli, eventlog, pipeline

SMALL = {
    "seed": 3,
    "input": {"synthetic": {"n_cases": 300}},
    "predictor": {"n_trees": 15},
    "causal": {"n_groups": 6},
    "generator": {"epochs": 10, "realism": {"n_perm": 30, "max_samples": 500}},
    "policy": {"n_episodes": 200},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    return pipeline.run_pipeline({**SMALL, "output_dir": str(out), "run_name": "a"})


def test_artifacts_present(run):
    for name in ("config", "split", "encoded_train", "encoded_policy", "predictor", "forest", "generator",
                 "enhanced", "stattests", "policy", "learning_curve", "evaluation", "evaluation_truth"):
        assert run.artifacts[name].is_file(), name
    manifest = json.loads((run.run_dir / "manifest.json").read_text())
    assert set(manifest["artifacts"]) == set(run.artifacts)
    assert {"treat_all", "treat_none", "agent_cate_rho", "oracle"} <= set(run.report.totals)


def test_phases_use_disjoint_cases(run):
    split = json.loads(run.artifacts["split"].read_text())
    assert not set(split["train"]) & set(split["policy"])
    train, _, _ = eventlog.load_dataset(run.artifacts["encoded_train"])
    later = pd.read_csv(run.artifacts["enhanced"], dtype={"case_id": str})
    assert not set(train.case_id) & set(later["case_id"])
    assert set(later["case_id"]) <= set(split["policy"])


def test_report_totals_match_rows(run):
    frame = pd.read_csv(run.artifacts["evaluation"])
    for name, total in run.report.totals.items():
        assert frame.loc[frame.policy == name, "net_gain"].sum() == pytest.approx(total)


def test_same_config_same_evaluation(run, tmp_path):
    again = pipeline.run_pipeline({**SMALL, "output_dir": str(tmp_path), "run_name": "b"})
    assert again.artifacts["evaluation"].read_bytes() == run.artifacts["evaluation"].read_bytes()


def test_missing_log_fails_in_ingest(tmp_path):
    cfg = {"output_dir": str(tmp_path), "input": {"log": str(tmp_path / "nope.csv"), "schema": {}}}
    with pytest.raises(pipeline.PhaseError) as info:
        pipeline.run_pipeline(cfg)
    assert info.value.phase == "ingest"


def test_unknown_agent_fails_in_train_policy(tmp_path):
    cfg = {**SMALL, "output_dir": str(tmp_path), "policy": {"agents": ["psychic"], "n_episodes": 10}}
    with pytest.raises(pipeline.PhaseError) as info:
        pipeline.run_pipeline(cfg)
    assert info.value.phase == "train-policy"


def test_run_directory_named_by_hash(tmp_path):
    cfg = pipeline.load_config(None, {"output_dir": str(tmp_path)})
    h = pipeline.config_hash(cfg)
    assert len(h) == 10 and h == pipeline.config_hash(json.loads(json.dumps(cfg)))
    assert h != pipeline.config_hash({**cfg, "seed": 1})


def test_config_merge_and_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"reward": {"cost": 5}}))
    cfg = pipeline.load_config(path, {"conformal": {"alpha": 0.2}})
    assert cfg["reward"] == {"gain": 50.0, "cost": 5}
    assert cfg["conformal"]["alpha"] == 0.2
    assert pipeline.DEFAULT_CONFIG["reward"]["cost"] == 25.0


def test_cli_pipeline_with_overrides(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(SMALL))
    code = cli.main(["pipeline", "--config", str(path), "--output-dir", str(tmp_path), "--run-name", "cli",
                     "--cost", "10", "--alpha", "0.2", "--set", "policy.agents=[\"cate\"]"])
    assert code == 0
    cfg = json.loads((tmp_path / "cli" / "config.json").read_text())
    assert cfg["reward"]["cost"] == 10 and cfg["conformal"]["alpha"] == 0.2
    assert cfg["policy"]["agents"] == ["cate"]
    assert "treat_all" in capsys.readouterr().out


def test_cli_pipeline_reports_phase(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"input": {"log": "missing.csv", "schema": {}}}))
    assert cli.main(["pipeline", "--config", str(path), "--output-dir", str(tmp_path)]) == 2
    assert "phase ingest" in capsys.readouterr().err


def test_cli_step_by_step(tmp_path):
    d = tmp_path

    def ok(*argv):
        assert cli.main([str(a) for a in argv]) == 0, argv

    ok("synth", "--out", d / "log.csv", "--n-cases", 200, "--seed", 1)
    schema = d / "log.schema.json"
    ok("split", "--log", d / "log.csv", "--schema", schema, "--out-dir", d)
    ok("ingest", "--log", d / "train_log.csv", "--schema", schema, "--out", d / "train.csv")
    ok("ingest", "--log", d / "policy_log.csv", "--schema", schema, "--out", d / "later.csv", "--encoder", d / "train.csv")
    ok("train-predictor", "--data", d / "train.csv", "--out", d / "pred.json", "--n-trees", 10)
    ok("calibrate", "--model", d / "pred.json", "--data", d / "train.csv")
    ok("train-causal", "--data", d / "train.csv", "--out", d / "forest.json", "--n-groups", 4)
    ok("train-generator", "--data", d / "later.csv", "--out", d / "gen.json", "--epochs", 5)
    ok("enhance", "--generator", d / "gen.json", "--data", d / "later.csv", "--out", d / "enh.csv")
    cli.main(["stat-test", "--generator", str(d / "gen.json"), "--data", str(d / "later.csv"),
              "--n-perm", "20", "--out", str(d / "st.csv")])
    assert (d / "st.csv").is_file()
    models = ("--predictor", d / "pred.json", "--forest", d / "forest.json")
    ok("train-policy", "--enhanced", d / "enh.csv", *models, "--episodes", 64, "--out", d / "pol.json",
       "--curve", d / "curve.csv")
    ok("evaluate", "--enhanced", d / "enh.csv", *models, "--policy", d / "pol.json", "--out", d / "eval.csv")
    frame = pd.read_csv(d / "eval.csv")
    assert {"treat_all", "treat_none", "agent_pol", "oracle"} == set(frame.policy)


def test_cli_bad_input_exit_code(tmp_path, capsys):
    assert cli.main(["ingest", "--log", str(tmp_path / "x.csv"), "--schema", str(tmp_path / "s.json"),
                     "--out", str(tmp_path / "o.csv")]) == 2
    assert "error" in capsys.readouterr().err

import itertools

import numpy as np
import pytest

from prescribe import bench
from prescribe.eventlog import encode_prefixes
from prescribe.policy import RewardConfig, net_gain

CFG = RewardConfig(50, 25)


def truth_log(n_cases, seed, **kw):
    syn = bench.generate_synthetic_log(bench.SyntheticSpec(n_cases=n_cases, seed=seed, **kw))
    samples, _ = encode_prefixes(syn.log)
    return syn, bench.truth_enhanced_log(samples, syn.truth, seed)


def test_net_gain_examples():
    assert net_gain(1, 1, CFG) == 25
    assert net_gain(0, 0, CFG) == 0
    assert net_gain(0, 0, RewardConfig(7, 3)) == 0
    assert net_gain(1, 0, CFG) == -25
    assert bench.net_gain is net_gain


def test_treated_fraction():
    syn = bench.generate_synthetic_log(bench.SyntheticSpec(n_cases=100, propensity=0.5, seed=3))
    frac = np.mean([tr.treatment for tr in syn.log.traces])
    assert 0.35 <= frac <= 0.65


def test_equal_arms_give_zero_effect():
    probs = {g: (0.3, 0.3) for g in bench.GROUPS}
    syn = bench.generate_synthetic_log(bench.SyntheticSpec(n_cases=50, group_probs=probs, ramp=0.0))
    assert np.all(syn.truth["p1"] - syn.truth["p0"] == 0)


def test_generation_deterministic():
    a = bench.generate_synthetic_log(bench.SyntheticSpec(n_cases=40, seed=5))
    b = bench.generate_synthetic_log(bench.SyntheticSpec(n_cases=40, seed=5))
    assert a.log == b.log
    assert a.truth.equals(b.truth)
    c = bench.generate_synthetic_log(bench.SyntheticSpec(n_cases=40, seed=6))
    assert a.log != c.log


def test_truth_table_covers_every_prefix():
    syn = bench.generate_synthetic_log(bench.SyntheticSpec(n_cases=30, seed=1))
    assert len(syn.truth) == sum(len(tr.events) for tr in syn.log.traces)
    assert syn.truth["p0"].between(0, 1).all() and syn.truth["p1"].between(0, 1).all()


def test_group_layout_and_ramp():
    spec = bench.SyntheticSpec(max_length=5)
    assert list(spec.groups([0.5, 0.5, -0.5, -0.5], [0.5, -0.5, 0.5, -0.5])) == list(bench.GROUPS)
    p0, p1 = spec.probabilities(np.full(5, 0.5), np.full(5, 0.5), np.arange(1, 6))
    np.testing.assert_allclose(p0, 0.05)
    np.testing.assert_allclose(p1, [0.95, 0.825, 0.7, 0.575, 0.45])


def test_factual_outcome_follows_arm():
    spec = bench.SyntheticSpec(n_cases=400, seed=2, group_probs={g: (0.0, 1.0) for g in bench.GROUPS}, ramp=0.0)
    syn = bench.generate_synthetic_log(spec)
    assert all(tr.outcome == tr.treatment for tr in syn.log.traces)


@pytest.mark.parametrize("kw", [
    {"n_cases": 0}, {"min_length": 5, "max_length": 3}, {"propensity": 1.0}, {"propensity": 0.0},
    {"ramp": 0.99}, {"group_probs": {"persuadable": (0.1, 0.2)}},
])
def test_invalid_spec(kw):
    with pytest.raises(ValueError):
        bench.SyntheticSpec(**kw)


def test_spec_dict_round_trip():
    spec = bench.SyntheticSpec(n_cases=12, seed=4)
    assert bench.SyntheticSpec.from_dict(spec.to_dict()) == spec


def test_truth_log_shares_draws_within_case():
    _, log = truth_log(60, 0)
    for _, rows in log.case_slices():
        p = log.p0_gen[rows]
        if np.all(p == p[0]):
            assert len(set(log.y0[rows])) == 1


def test_treat_none_total():
    _, log = truth_log(200, 1)
    rep = bench.evaluate_policies(log, {"none": (bench.treat_none, None)}, CFG)
    last_y0 = [log.y0[rows[-1]] for _, rows in log.case_slices()]
    assert rep.totals["none"] == CFG.gain * sum(last_y0)


def test_treat_all_identity():
    probs = dict(bench.SyntheticSpec().group_probs, persuadable=(0.05, 0.05))
    _, log = truth_log(200, 2, group_probs=probs, ramp=0.0)
    assert np.all(log.p1_gen <= log.p0_gen)
    rep = bench.evaluate_policies(log, {"all": (bench.treat_all, None), "none": (bench.treat_none, None)}, CFG)
    slices = log.case_slices()
    sum_y1 = sum(log.y1[rows[0]] for _, rows in slices)
    sum_y0 = sum(log.y0[rows[-1]] for _, rows in slices)
    expected = rep.totals["none"] - CFG.cost * len(slices) + CFG.gain * (sum_y1 - sum_y0)
    assert rep.totals["all"] == expected


def test_oracle_beats_every_single_decision_policy():
    _, log = truth_log(10, 7, min_length=1, max_length=1)
    assert len(log) == 10
    oracle, treats = bench.oracle_net_gains(log, CFG)
    np.testing.assert_array_equal(treats, log.y1 > log.y0)
    best = max(
        sum(net_gain(t, int(log.y1[i] if t else log.y0[i]), CFG) for i, t in enumerate(plan))
        for plan in itertools.product((0, 1), repeat=10)
    )
    assert oracle.sum() == best


def test_oracle_dominates_evaluated_policies():
    _, log = truth_log(150, 3)
    rng = np.random.default_rng(0)
    entries = {
        "all": (bench.treat_all, None),
        "none": (bench.treat_none, None),
        "coin": (lambda s: int(rng.random() < 0.3), None),
    }
    rep = bench.evaluate_policies(log, entries, CFG)
    assert all(rep.totals["oracle"] >= v for v in rep.totals.values())


def test_report_totals_and_layout(tmp_path):
    _, log = truth_log(120, 4)
    rep = bench.evaluate_policies(log, {"all": (bench.treat_all, None)}, CFG)
    assert rep.policies == ["all", "oracle"]
    for p in rep.policies:
        assert rep.totals[p] == rep.net_gains(p).sum()
    assert rep.treatment_rates["all"] == 1.0
    gains = rep.net_gains("all")
    frame = rep.per_case[rep.per_case.policy == "all"]
    assert frame["rolling_mean_100"].iloc[-1] == pytest.approx(gains[-100:].mean())
    path = rep.save(tmp_path / "eval.csv")
    assert path.is_file() and path.with_suffix(".summary.json").is_file()
    assert list(rep.summary().columns) == ["policy", "total_net_gain", "mean_net_gain", "treatment_rate"]


def test_non_binary_policy_rejected():
    _, log = truth_log(5, 5)
    with pytest.raises(ValueError):
        bench.evaluate_policies(log, {"bad": (lambda s: 3, None)}, CFG)


def test_missing_truth_row():
    syn, _ = truth_log(5, 6)
    samples, _ = encode_prefixes(syn.log)
    with pytest.raises(KeyError):
        bench.truth_enhanced_log(samples, syn.truth.iloc[1:], 0)

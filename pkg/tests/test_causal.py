import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prescribe import causal as ca
from prescribe.predictor import make_bins

from conftest import effect_grid, linear_effect_data


def _step_data(n, seed):
    r = np.random.default_rng(seed)
    X = r.uniform(-1, 1, (n, 3))
    T = (r.random(n) < 0.5).astype(int)
    Y = X[:, 2] + T * (X[:, 0] > 0) + 0.5 * r.normal(size=n)
    return X, T, Y


def _criterion_scan(codes, T, Y, min_leaf):
    """Best root split by sum over children of n * tau_hat^2, scanning every bin edge."""
    best = (-np.inf, None, None)
    for j in range(codes.shape[1]):
        for b in np.unique(codes[:, j])[:-1]:
            L = codes[:, j] <= b
            total, ok = 0.0, True
            for side in (L, ~L):
                t, c = side & (T == 1), side & (T == 0)
                if t.sum() < min_leaf or c.sum() < min_leaf:
                    ok = False
                    break
                total += side.sum() * (Y[t].mean() - Y[c].mean()) ** 2
            if ok and total > best[0]:
                best = (total, j, b)
    return best


def test_step_effect_root_split_matches_scan():
    X, T, Y = _step_data(4000, 0)
    idx = np.random.default_rng(1).permutation(4000)
    split, est = idx[:2000], idx[2000:]
    cfg = ca.TreeConfig(min_leaf_treated=50, min_leaf_control=50, max_depth=1)
    tree = ca.fit_causal_tree(X, split, est, cfg, T=T, Y=Y)
    cuts, codes = make_bins(X, 256)
    _, j, b = _criterion_scan(codes[split], T[split], Y[split], 50)
    assert tree.feature[0] == j == 0
    assert tree.threshold[0] == pytest.approx(cuts[j][b])
    assert abs(tree.threshold[0]) < 0.15


def test_homogeneous_effect_single_leaf():
    r = np.random.default_rng(2)
    X = r.normal(size=(3000, 2))
    T = (r.random(3000) < 0.5).astype(int)
    Y = 0.7 * T + r.normal(scale=0.5, size=3000)
    split, est = np.arange(1500), np.arange(1500, 3000)
    tree = ca.fit_causal_tree(X, split, est, ca.TreeConfig(min_leaf_treated=600, min_leaf_control=600), T=T, Y=Y)
    assert tree.n_leaves == 1
    diff = Y[est][T[est] == 1].mean() - Y[est][T[est] == 0].mean()
    assert tree.tau[0] == pytest.approx(diff, abs=1e-12)
    assert abs(tree.tau[0] - 0.7) <= 0.05


def test_missing_arm():
    X = np.zeros((40, 1))
    with pytest.raises(ca.MissingArm):
        ca.fit_causal_tree(X, np.arange(20), np.arange(20, 40), T=np.ones(40), Y=np.zeros(40))
    with pytest.raises(ca.MissingArm):
        ca.fit_forest(X, T=np.ones(40), Y=np.zeros(40))


def test_subsample_too_small():
    X, T, Y = linear_effect_data(30, 0)
    with pytest.raises(ca.SubsampleTooSmall):
        ca.fit_forest(X, ca.ForestConfig(min_leaf=10), T=T, Y=Y)


def test_leaves_respect_arm_minimum_on_both_halves():
    X, T, Y = linear_effect_data(3000, 3)
    idx = np.random.default_rng(0).permutation(3000)
    split, est = idx[:1500], idx[1500:]
    tree = ca.fit_causal_tree(X, split, est, ca.TreeConfig(min_leaf_treated=25, min_leaf_control=25), T=T, Y=Y)
    leaves = tree.is_leaf
    assert tree.n_leaves > 1
    assert (tree.n_treated[leaves] >= 25).all() and (tree.n_control[leaves] >= 25).all()
    on_split = tree.refit_leaves(X[split], T[split], Y[split])
    assert (on_split.n_treated[leaves] >= 25).all() and (on_split.n_control[leaves] >= 25).all()


def test_honest_leaves_ignore_split_half_outcomes():
    X, T, Y = linear_effect_data(4000, 4)
    split, est = np.arange(2000), np.arange(2000, 4000)
    tree = ca.fit_causal_tree(X, split, est, ca.TreeConfig(min_leaf_treated=30, min_leaf_control=30), T=T, Y=Y)
    Y2 = Y.copy()
    Y2[split] = np.random.default_rng(5).permutation(Y[split])
    again = tree.refit_leaves(X[est], T[est], Y2[est])
    assert np.array_equal(again.tau, tree.tau)
    assert not np.array_equal(tree.refit_leaves(X[split], T[split], Y2[split]).tau, tree.tau)


@pytest.fixture(scope="module")
def small_forest():
    X, T, Y = linear_effect_data(4000, 6)
    return ca.fit_forest(X, ca.ForestConfig(n_groups=25, group_size=4, seed=3), T=T, Y=Y), (X, T, Y)


def test_forest_structure(small_forest):
    forest, _ = small_forest
    assert forest.n_trees == 100 and len(forest.groups) == 25


def test_forest_deterministic(small_forest):
    forest, (X, T, Y) = small_forest
    again = ca.fit_forest(X, ca.ForestConfig(n_groups=25, group_size=4, seed=3), T=T, Y=Y)
    assert np.array_equal(again.predict(effect_grid()), forest.predict(effect_grid()))


def test_single_group_has_no_variance():
    X, T, Y = linear_effect_data(2000, 0)
    forest = ca.fit_forest(X, ca.ForestConfig(n_groups=1, group_size=4), T=T, Y=Y)
    with pytest.raises(ca.NeedTwoGroups):
        ca.estimate_cate(forest, effect_grid())


def test_variance_formula_on_hand_values():
    preds = np.array([[[1.0, 3.0], [5.0, 7.0], [0.0, 2.0]]])
    # group means 2, 6, 1 -> between var 7; within var 2 each -> 7 - 2/2
    assert ca.cate_variance(preds)[0] == pytest.approx(6.0)
    assert ca.cate_variance(np.array([[[1.0, 9.0], [1.0, 9.0]]]))[0] == 0.0


@given(st.floats(0.5, 0.98), st.floats(0.005, 0.019))
@settings(max_examples=25, deadline=None)
def test_higher_level_never_narrows(small_forest, level, step):
    forest, _ = small_forest
    lo = ca.estimate_cate(forest, effect_grid(20), level)
    hi = ca.estimate_cate(forest, effect_grid(20), min(level + step, 0.999))
    assert np.all(hi.theta_l <= lo.theta_l + 1e-12) and np.all(hi.theta_u >= lo.theta_u - 1e-12)
    assert np.all(lo.theta_l <= lo.theta_point) and np.all(lo.theta_point <= lo.theta_u)


def test_binary_outcomes_stay_in_unit_range():
    r = np.random.default_rng(8)
    X = r.uniform(-1, 1, (3000, 2))
    T = (r.random(3000) < 0.5).astype(int)
    Y = (r.random(3000) < np.where(T == 1, 0.5 + 0.45 * np.sign(X[:, 0]), 0.5)).astype(int)
    forest = ca.fit_forest(X, ca.ForestConfig(n_groups=10, seed=1), T=T, Y=Y)
    ci = ca.estimate_cate(forest, r.uniform(-1.5, 1.5, (200, 2)))
    assert forest.outcome_bounds == (-1.0, 1.0)
    for arr in (ci.theta_l, ci.theta_point, ci.theta_u):
        assert np.all((arr >= -1) & (arr <= 1))


def test_zero_effect_interval_covers_zero():
    # the little-bags variance needs many groups to be stable; 50 groups cover about 82%
    hits = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        X = r.uniform(-1, 1, (1000, 2))
        T = (r.random(1000) < 0.5).astype(int)
        Y = X[:, 1] + r.normal(size=1000)
        forest = ca.fit_forest(X, ca.ForestConfig(n_groups=200, seed=seed), T=T, Y=Y)
        ci = ca.estimate_cate(forest, np.zeros((1, 2)))
        hits += ci.theta_l[0] <= 0 <= ci.theta_u[0]
    assert hits >= 85


@pytest.mark.slow
def test_linear_effect_point_coverage():
    hits = 0
    for seed in range(50):
        X, T, Y = linear_effect_data(20000, 100 + seed)
        forest = ca.fit_forest(X, ca.ForestConfig(seed=seed), T=T, Y=Y)
        ci = ca.estimate_cate(forest, np.array([[0.5, 0.0]]))
        hits += ci.theta_l[0] <= 1.0 <= ci.theta_u[0]
    assert hits >= 40


def test_rmse_does_not_grow_with_more_data():
    grid = effect_grid()
    truth = 2 * grid[:, 0]
    rmse = {}
    for n in (4000, 8000):
        vals = []
        for seed in range(10):
            X, T, Y = linear_effect_data(n, 200 + seed)
            forest = ca.fit_forest(X, ca.ForestConfig(n_groups=20, seed=seed), T=T, Y=Y)
            vals.append(np.sqrt(np.mean((forest.predict(grid) - truth) ** 2)))
        rmse[n] = np.median(vals)
    assert rmse[8000] <= rmse[4000]


@pytest.mark.parametrize("lo, mid, hi, group", [
    (0.1, 0.3, 0.5, ca.CaseGroup.PERSUADABLE),
    (-0.5, -0.3, -0.1, ca.CaseGroup.DO_NOT_DISTURB),
    (-0.1, 0.2, 0.4, ca.CaseGroup.UNCERTAIN),
])
def test_classify_case(lo, mid, hi, group):
    assert ca.classify_case(ca.CateInterval(lo, mid, hi, 0.95)) is group


def test_unordered_interval_rejected():
    with pytest.raises(ValueError):
        ca.CateInterval(0.5, 0.1, 0.9, 0.95)


def test_forest_json_round_trip(tmp_path, small_forest):
    forest, _ = small_forest
    back = ca.load_forest(ca.save_forest(tmp_path / "f.json", forest))
    a = ca.estimate_cate(forest, effect_grid())
    b = ca.estimate_cate(back, effect_grid())
    assert np.array_equal(a.theta_l, b.theta_l) and np.array_equal(a.theta_u, b.theta_u)

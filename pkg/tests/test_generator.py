import numpy as np
import pytest
from scipy.special import expit

from prescribe import generator as gn
from prescribe import nn
from prescribe.eventlog import PrefixDataset


def sigmoid_dgp(n, seed):
    """p(Y=1 | x, T) = sigmoid(x1 + 2 T 1[x2 > 0]) with x ~ U[-2, 2]^2."""
    r = np.random.default_rng(seed)
    X = r.uniform(-2, 2, (n, 2))
    T = (r.random(n) < 0.5).astype(np.int64)
    p = expit(X[:, 0] + 2 * T * (X[:, 1] > 0))
    Y = (r.random(n) < p).astype(np.int64)
    return X, T, Y, p


def as_dataset(X, T, Y):
    n = len(Y)
    return PrefixDataset(
        np.asarray(X, float), np.asarray(T), np.asarray(Y), np.ones(n, np.int64),
        np.array([f"c{i:05d}" for i in range(n)]), np.arange(n), np.arange(n, dtype=np.int64),
        tuple(f"x{j + 1}" for j in range(np.shape(X)[1])),
    )


@pytest.fixture(scope="module")
def fitted():
    X, T, Y, _ = sigmoid_dgp(4000, 0)
    return gn.train_generator(X, gn.GeneratorConfig(), T=T, Y=Y), (X, T, Y)


def test_mlp_gradient_check_micro_net(rng):
    net = nn.Mlp.init([3, 2, 1], ["tanh", "identity"], rng)
    assert sum(p.size for p in net.params) == 11
    X, target = rng.normal(size=(7, 3)), rng.normal(size=(7, 1))

    def loss():
        return float(np.mean((net(X) - target) ** 2))

    out, cache = net.forward(X)
    grads, _ = net.backward(cache, 2 * (out - target) / out.size)
    num = nn.numeric_gradient(loss, net.params)
    assert nn.relative_error(nn.flatten(grads), nn.flatten(num)) < 1e-4


def test_generator_gradient_check(rng):
    cfg = gn.GeneratorConfig(encoder_hidden=(3,), head_hidden=(2,))
    gen = gn.init_generator(2, cfg, rng)
    for p in gen.head0.params + gen.head1.params:
        p += rng.normal(0, 0.3, p.shape)
    X = rng.normal(size=(12, 2))
    T = np.array([0, 1] * 6)
    Y = (rng.random(12) < 0.5).astype(float)
    params = gen.encoder.params + gen.head0.params + gen.head1.params
    _, grads = gn.loss_and_grads(gen, X, T, Y)
    num = nn.numeric_gradient(lambda: gn.loss_and_grads(gen, X, T, Y)[0], params)
    assert nn.relative_error(nn.flatten(grads), nn.flatten(num)) < 1e-4


def test_adam_decoupled_weight_decay():
    p = [np.array([2.0])]
    opt = nn.Adam(lr=0.1, weight_decay=0.5)
    opt.step(p, [np.array([0.0])])
    assert p[0][0] == pytest.approx(2.0 * (1 - 0.05))


def test_mlp_round_trip(rng):
    net = nn.Mlp.init([4, 5, 1], ["relu", "identity"], rng)
    back = nn.Mlp.from_dict(net.to_dict())
    X = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(back(X), net(X))


def test_held_out_cross_entropy_near_floor(fitted):
    gen, _ = fitted
    X, T, Y, p = sigmoid_dgp(20000, 1)
    floor = float(-np.mean(p * np.log(p) + (1 - p) * np.log(1 - p)))
    assert gen.cross_entropy(X, T, Y) - floor <= 0.05


def test_probabilities_strictly_inside(fitted):
    gen, (X, _, _) = fitted
    p0, p1 = gen.probabilities(X * 100)
    for p in (p0, p1):
        assert np.all((p >= gn.P_CLAMP) & (p <= 1 - gn.P_CLAMP))


def test_factual_consistency(fitted):
    gen, (X, T, Y) = fitted
    log = gn.sample_potential_outcomes(gen, as_dataset(X, T, Y), seed=4)
    treated = log.samples.treatment == 1
    assert abs(log.y1[treated].mean() - log.samples.outcome[treated].mean()) <= 0.05


def test_constant_arm(rng):
    X = rng.normal(size=(600, 2))
    T = (rng.random(600) < 0.5).astype(np.int64)
    Y = np.where(T == 1, 1, (rng.random(600) < 0.5).astype(np.int64))
    gen = gn.train_generator(X, gn.GeneratorConfig(), T=T, Y=Y)
    assert gen.probabilities(X)[1].min() >= 0.95


def test_single_arm_rejected(rng):
    with pytest.raises(gn.SingleArm):
        gn.train_generator(rng.normal(size=(10, 2)), T=np.ones(10, np.int64), Y=np.ones(10))


def test_requires_prefix_and_case_features(rng):
    X, T, Y, _ = sigmoid_dgp(20, 0)
    with pytest.raises(ValueError):
        gn.train_generator(as_dataset(X, T, Y), gn.GeneratorConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected(rng):
    X, T, Y, _ = sigmoid_dgp(200, 0)
    X[0, 0] = np.inf
    with pytest.raises(gn.GeneratorDiverged):
        gn.train_generator(X, gn.GeneratorConfig(epochs=1), T=T, Y=Y)


def test_training_deterministic():
    X, T, Y, _ = sigmoid_dgp(300, 2)
    cfg = gn.GeneratorConfig(epochs=5, seed=9)
    a = gn.train_generator(X, cfg, T=T, Y=Y)
    b = gn.train_generator(X, cfg, T=T, Y=Y)
    np.testing.assert_array_equal(a.probabilities(X)[1], b.probabilities(X)[1])


def test_forced_probabilities():
    ds = as_dataset(np.zeros((5, 1)), np.zeros(5, np.int64), np.zeros(5, np.int64))
    log = gn.enhance_from_probabilities(ds, np.zeros(5), np.ones(5), seed=0)
    assert np.all(log.y0 == 0) and np.all(log.y1 == 1)
    assert np.all(log.true_effect == 1)
    assert log[0].true_effect == 1


def test_bernoulli_frequency():
    n = 10000
    ds = as_dataset(np.zeros((n, 1)), np.zeros(n, np.int64), np.zeros(n, np.int64))
    log = gn.enhance_from_probabilities(ds, np.full(n, 0.3), np.full(n, 0.7), seed=1)
    assert 0.68 <= log.y1.mean() <= 0.72


def test_sampling_deterministic_and_order_free(fitted):
    gen, (X, T, Y) = fitted
    ds = as_dataset(X[:200], T[:200], Y[:200])
    a = gn.sample_potential_outcomes(gen, ds, seed=5)
    b = gn.sample_potential_outcomes(gen, ds, seed=5)
    np.testing.assert_array_equal(a.y0, b.y0)
    np.testing.assert_array_equal(a.y1, b.y1)
    shuffled = ds.subset(np.random.default_rng(0).permutation(200))
    c = gn.sample_potential_outcomes(gen, shuffled, seed=5)
    np.testing.assert_array_equal(a.y1, c.y1)
    assert not np.array_equal(a.y1, gn.sample_potential_outcomes(gen, ds, seed=6).y1)


def test_keyed_uniform_addressing():
    assert gn.keyed_uniform(1, "a", 2, 0) == gn.keyed_uniform(1, "a", 2, 0)
    assert gn.keyed_uniform(1, "a", 2, 0) != gn.keyed_uniform(1, "a", 2, 1)
    assert gn.keyed_uniform(1, "a", 2, 0) != gn.keyed_uniform(2, "a", 2, 0)


def test_enhanced_log_order_and_round_trip(tmp_path):
    ds = as_dataset(np.arange(4.0)[:, None], np.zeros(4, np.int64), np.zeros(4, np.int64))
    ds = PrefixDataset(ds.X, ds.treatment, ds.outcome, np.array([2, 1, 1, 2]),
                       np.array(["b", "b", "a", "a"]), np.array([1, 1, 0, 0]),
                       np.array([5, 5, 9, 9]), ds.feature_names)
    log = gn.enhance_from_probabilities(ds, np.full(4, 0.5), np.full(4, 0.5), seed=0)
    assert list(log.samples.case_id) == ["b", "b", "a", "a"]
    assert list(log.samples.k) == [1, 2, 1, 2]
    assert [c for c, _ in log.case_slices()] == ["b", "a"]
    back = gn.EnhancedLog.load(log.save(tmp_path / "e.csv"))
    np.testing.assert_array_equal(back.y1, log.y1)
    np.testing.assert_allclose(back.p0_gen, log.p0_gen)
    assert list(back.samples.case_id) == list(log.samples.case_id)


def test_generator_round_trip(fitted, tmp_path):
    gen, (X, _, _) = fitted
    back = gn.load_generator(gn.save_generator(tmp_path / "g.json", gen))
    np.testing.assert_allclose(back.probabilities(X)[0], gen.probabilities(X)[0], rtol=1e-12)
    assert back.config == gen.config


def test_realism_identical_samples_pass(rng):
    y = (rng.random(300) < 0.4).astype(float)
    for name in gn.TESTS:
        assert gn.run_test(name, y, y.copy(), n_perm=200).p_value >= 0.05


def test_realism_fitted_passes_inverted_fails(fitted):
    gen, (X, T, Y) = fitted
    ds = as_dataset(X, T, Y)
    assert gn.realism_check(gen, ds, 1, n_perm=200, seed=0).passed
    assert not gn.realism_check(gn.invert_heads(gen), ds, 1, n_perm=200, seed=0).passed


def test_realism_unknown_test(fitted):
    gen, (X, T, Y) = fitted
    with pytest.raises(ValueError):
        gn.realism_check(gen, as_dataset(X, T, Y), tests=("ks", "chi2"))


def test_realism_report_frame(fitted):
    gen, (X, T, Y) = fitted
    rep = gn.realism_check(gen, as_dataset(X[:300], T[:300], Y[:300]), 2, tests=("ks", "energy"), n_perm=20)
    frame = rep.to_frame()
    assert list(frame.columns) == ["draw", "test", "statistic", "p_value", "n_permutations"]
    assert len(frame) == 4
    assert set(rep.median_p_values()) == {"ks", "energy"}

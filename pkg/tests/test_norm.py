import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vpe import tensor as T
from vpe.norm import PopArtHead, RunningStats, art_rescale, popart_update, welford_normalize, welford_update
from oracles import two_pass


def test_welford_small_example():
    s = RunningStats(1).update_batch([1.0, 2.0, 3.0])
    assert s.mean[0] == pytest.approx(2.0)
    assert s.variance[0] == pytest.approx(2 / 3)


def test_single_observation_normalizes_to_zero():
    s = welford_update(RunningStats(2), [3.0, -4.0])
    np.testing.assert_array_equal(welford_normalize(s, [3.0, -4.0]), [0.0, 0.0])


def test_welford_update_is_pure():
    s = RunningStats(1)
    welford_update(s, [1.0])
    assert s.count == 0


def test_streaming_matches_two_pass_1e5():
    x = np.random.default_rng(0).normal(3.0, 2.0, size=(100_000, 2))
    s = RunningStats(2).update_batch(x)
    m, v = two_pass(x)
    np.testing.assert_allclose(s.mean, m, rtol=1e-9)
    np.testing.assert_allclose(s.variance, v, rtol=1e-9)


@settings(max_examples=50)
@given(arrays(float, st.integers(1, 200), elements=st.floats(-1e6, 1e6)))
def test_streaming_matches_two_pass_property(x):
    s = RunningStats(1).update_batch(x)
    m, v = two_pass(x[:, None])
    assert s.mean[0] == pytest.approx(m[0], rel=1e-9, abs=1e-9)
    assert s.variance[0] == pytest.approx(v[0], rel=1e-9, abs=1e-6)
    assert s.m2[0] >= 0


def test_normalize_uses_population_std_with_floor():
    s = RunningStats(2).update_batch([[1.0, 5.0], [3.0, 5.0]])
    np.testing.assert_allclose(s.normalize([3.0, 5.0]), [1.0, 0.0])


def test_stats_roundtrip():
    s = RunningStats(3).update_batch(np.random.default_rng(1).normal(size=(10, 3)))
    back = RunningStats.from_arrays(s.to_arrays("x"), "x")
    assert back.count == 10
    np.testing.assert_array_equal(back.mean, s.mean)


def _linear_head(rng, n_in=5):
    return T.param(rng.normal(size=(n_in, 1))), T.param(rng.normal(size=1))


def test_art_identity_rescale():
    rng = np.random.default_rng(0)
    W, b = _linear_head(rng)
    W0, b0 = W.data.copy(), b.data.copy()
    art_rescale(W, b, 1.5, 2.0, 1.5, 2.0)
    np.testing.assert_array_equal(W.data, W0)
    np.testing.assert_array_equal(b.data, b0)


def test_art_worked_example():
    W, b = T.param(np.array([[4.0], [2.0]])), T.param(np.array([3.0]))
    art_rescale(W, b, 0.0, 1.0, 1.0, 2.0)
    np.testing.assert_array_equal(W.data, [[2.0], [1.0]])
    np.testing.assert_array_equal(b.data, [1.0])  # (3 - 1) / 2


def art_trials(n_events, seed=0):
    """Max |unnormalised prediction change| of a random network across random Pop-Art events."""
    rng = np.random.default_rng(seed)
    net = T.init_network(4, 1, 4, 16, rng)
    head = PopArtHead([net.head], ema_rate=0.05, mu=rng.normal(), nu=5.0)
    x = rng.normal(size=(100, 4))
    worst = 0.0
    for k in range(n_events):
        before = head.denormalize(T.mlp_apply(net, x))
        if k % 2:
            head.set_stats(rng.normal(scale=50), rng.uniform(0.01, 100))
        else:
            popart_update(head, rng.normal(rng.normal(scale=30), rng.uniform(0.1, 30), size=32))
        after = head.denormalize(T.mlp_apply(net, x))
        worst = max(worst, float(np.max(np.abs(after - before))))
    return worst


def test_art_invariance_random_events():
    assert art_trials(100) < 1e-5


def test_popart_sigma_floor():
    head = PopArtHead([], ema_rate=0.5)
    for _ in range(60):
        head.update(np.full(8, 3.0))
    assert head.sigma >= 1e-4
    head.set_stats(0.0, 0.0)
    assert head.sigma == pytest.approx(1e-4)


def test_popart_ema():
    head = PopArtHead([], ema_rate=0.1, mu=0.0, nu=1.0)
    head.update(np.array([2.0, 4.0]))
    assert head.mu == pytest.approx(0.3)
    assert head.nu == pytest.approx(0.9 + 0.1 * 10.0)


def test_popart_rejects_bad_rate():
    with pytest.raises(ValueError):
        PopArtHead([], ema_rate=0.0)


def test_popart_roundtrip_precision():
    head = PopArtHead([], mu=-350.0).set_stats(-350.0, 0.02)
    back = PopArtHead([])
    back.load_arrays({k: v.astype(np.float32) for k, v in head.to_arrays("p").items()}, "p")
    assert back.sigma == pytest.approx(0.02, rel=1e-6)

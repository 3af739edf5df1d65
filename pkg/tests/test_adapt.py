import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import ConstantKernel, Matern

from vpe import adapt as A, embed as E, env, policy as P, tensor as T
from test_embed import make_batch, make_qf

# (1 + sqrt5 + 5/3) exp(-sqrt5): Matern-5/2 at r = lengthscale, unit signal variance
MATERN_AT_ELL = (1.0 + math.sqrt(5.0) + 5.0 / 3.0) * math.exp(-math.sqrt(5.0))


# --- SNR ---------------------------------------------------------------------

def test_snr_examples():
    assert A.snr(E.LatentPosterior([[1.0], [-3.0]], [math.log(2.0)])).values[0] == pytest.approx(1.0, abs=1e-15)
    zero = A.snr(E.LatentPosterior(np.zeros((4, 3)), np.zeros(3)))
    np.testing.assert_array_equal(zero.values, 0.0)


def snr_recompute(mu, sigma):
    K, d = mu.shape
    return np.array([sum(abs(mu[i, j]) for i in range(K)) / (K * sigma[j]) for j in range(d)])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2 ** 31))
def test_snr_matches_direct_recomputation(K, d, seed):
    rng = np.random.default_rng(seed)
    post = E.LatentPosterior(rng.normal(scale=2, size=(K, d)), rng.normal(size=d))
    rep = A.snr(post)
    assert np.all(rep.values >= 0)
    np.testing.assert_allclose(rep.values, snr_recompute(post.mu.data, np.exp(post.log_sigma.data)),
                               rtol=1e-12, atol=1e-12)


def test_snr_selection_modes():
    post = E.LatentPosterior([[0.1, 3.0, 0.0, 2.0], [0.1, -3.0, 0.0, 1.9]], np.zeros(4))
    np.testing.assert_array_equal(A.snr(post).selected, [1, 3])
    np.testing.assert_array_equal(A.snr(post, top_k=1).selected, [1])
    np.testing.assert_array_equal(A.snr(post, threshold=0.5).selected, [1, 3])
    np.testing.assert_array_equal(A.snr(post, threshold=0.99).selected, [1])
    tie = E.LatentPosterior([[1.0, 1.0, 1.0]], np.zeros(3))
    np.testing.assert_array_equal(A.snr(tie).selected, [0, 1])


# --- Matern kernel -----------------------------------------------------------

def test_matern_examples():
    assert MATERN_AT_ELL == pytest.approx(0.5240, abs=5e-5)
    x = np.array([0.3, -1.2])
    for ell in (0.1, 0.7, 3.0):
        xp = x + ell * np.array([0.6, 0.8])  # distance exactly ell
        assert A.matern_kernel(x, xp, ell, 1.0) == pytest.approx(MATERN_AT_ELL, abs=1e-12)
    assert A.matern_kernel(x, x, 0.5, 2.5) == 2.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_matern_symmetry_and_matrix_agree(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(5, 3))
    ell, sf2 = rng.uniform(0.1, 3), rng.uniform(0.2, 4)
    M = A.matern_matrix(X, X, ell, sf2)
    for i in range(5):
        for j in range(5):
            k = A.matern_kernel(X[i], X[j], ell, sf2)
            assert k == pytest.approx(A.matern_kernel(X[j], X[i], ell, sf2), rel=1e-14)
            assert M[i, j] == pytest.approx(k, rel=1e-9, abs=1e-12)
    skl = ConstantKernel(sf2, "fixed") * Matern(ell, "fixed", nu=2.5)
    np.testing.assert_allclose(M, skl(X), rtol=1e-9, atol=1e-12)


# --- GP regression -----------------------------------------------------------

def test_gp_noiseless_interpolation():
    rng = np.random.default_rng(0)
    X = rng.uniform(-2, 2, size=(7, 2))
    y = np.sin(X[:, 0]) * X[:, 1] + 3.0
    model = A.gp_fit(X, y, noise_var=1e-10)
    mean, var = A.gp_posterior(model, X)
    np.testing.assert_allclose(mean, y, atol=1e-5)
    assert np.all(var < 1e-5 * model.y_scale ** 2)


def test_gp_prior_reversion_far_from_data():
    X = np.array([[0.0], [0.5], [1.0]])
    y = np.array([-100.0, -80.0, -95.0])
    model = A.gp_fit(X, y)
    m_std, v_std = A.gp_posterior(model, [[1e3]], standardized=True)
    assert abs(m_std[0]) < 1e-9 and v_std[0] == pytest.approx(model.signal_var, rel=1e-9)
    m, v = A.gp_posterior(model, [[1e3]])
    assert m[0] == pytest.approx(y.mean()) and v[0] == pytest.approx(model.signal_var * y.std() ** 2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_gp_variance_bounds(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(int(rng.integers(1, 12)), 2))
    y = rng.normal(size=len(X))
    model = A.gp_fit(X, y)
    _, var = A.gp_posterior(model, np.vstack([X, rng.uniform(-3, 3, size=(50, 2))]), standardized=True)
    assert np.all(var >= 0)
    assert np.all(var <= model.signal_var + model.noise_var + 1e-9)


def sklearn_oracle(X, y, ell, sf2, noise):
    kernel = ConstantKernel(sf2, "fixed") * Matern(ell, "fixed", nu=2.5)
    return GaussianProcessRegressor(kernel, alpha=noise, optimizer=None, normalize_y=True).fit(X, y)


def test_gp_sine_against_independent_oracle():
    X = np.linspace(0, np.pi, 8)[:, None]
    y = np.sin(X[:, 0])
    model = A.gp_fit(X, y)
    # the grid choice is the log-marginal-likelihood argmax according to the oracle too
    lml = {(ell, sf2): sklearn_oracle(X, y, ell, sf2, model.noise_var).log_marginal_likelihood_value_
           for ell in A.DEFAULT_LENGTHSCALES for sf2 in A.DEFAULT_SIGNAL_VARS}
    assert max(lml, key=lml.get) == (model.lengthscale, model.signal_var)
    assert model.log_marginal == pytest.approx(lml[(model.lengthscale, model.signal_var)], rel=1e-9)

    mid = (X[:-1] + X[1:]) / 2
    dense = np.linspace(0, np.pi, 401)[:, None]
    oracle = sklearn_oracle(X, y, model.lengthscale, model.signal_var, model.noise_var)
    for q in (mid, dense):
        m, v = A.gp_posterior(model, q)
        om, osd = oracle.predict(q, return_std=True)
        np.testing.assert_allclose(m, om, atol=1e-8)
        np.testing.assert_allclose(v, osd ** 2, atol=1e-8)
    m, _ = A.gp_posterior(model, mid)
    assert np.max(np.abs(m - np.sin(mid[:, 0]))) < 0.05


def test_gp_rejects_bad_input():
    with pytest.raises(ValueError):
        A.gp_fit(np.zeros((0, 1)), [])
    with pytest.raises(ValueError, match="finite"):
        A.gp_fit([[0.0], [1.0]], [0.0, np.nan])


def test_gp_factor_reports_condition_when_jitter_is_exhausted():
    X = np.linspace(0, 1, 6)[:, None]
    with pytest.raises(linalg.LinAlgError, match="cond"):
        A._factor(X, np.zeros(6), -0.05, 1.0, 1e-3)  # negative lengthscale: not a valid covariance


def test_gp_jitter_escalates_for_duplicate_points():
    X = np.array([[0.0], [0.0], [1.0]])
    model = A.gp_fit(X, [1.0, 1.0, 0.0], noise_var=0.0)
    assert model.noise_var > 0


# --- acquisition and proposals -----------------------------------------------

def test_ucb_examples():
    assert A.ucb(1.0, 4.0, 2.0) == 5.0
    np.testing.assert_array_equal(A.ucb(np.array([1.5, -2.0]), np.zeros(2), 3.0), [1.5, -2.0])


def test_exploration_needs_positive_beta():
    X = np.array([[-1.0], [0.0], [1.0]])
    model = A.gp_fit(X, [0.0, 5.0, 0.0], lengthscales=(0.1,), signal_vars=(1.0,))
    box = np.array([[-3.0, 3.0]])
    greedy = A.propose(model, box, beta=0.0, rng=np.random.default_rng(0))
    assert abs(greedy[0]) < 0.1
    bold = A.propose(model, box, beta=3.0, rng=np.random.default_rng(0))
    assert np.min(np.abs(X[:, 0] - bold[0])) > model.lengthscale  # beyond one lengthscale of all data
    m, v = A.gp_posterior(model, np.array([bold, [0.0]]), standardized=True)
    ucb_bold, ucb_inc = A.ucb(m, v, 3.0)
    assert ucb_bold > ucb_inc
    m0, v0 = A.gp_posterior(model, np.array([bold, [0.0]]), standardized=True)
    assert A.ucb(m0, v0, 0.0)[0] < A.ucb(m0, v0, 0.0)[1]


def test_propose_stays_in_box():
    rng = np.random.default_rng(3)
    X = rng.uniform(-1, 1, (6, 2))
    model = A.gp_fit(X, -np.sum(X ** 2, 1))
    box = np.array([[-0.5, 0.2], [0.1, 0.9]])
    for s in range(5):
        x = A.propose(model, box, 2.0, np.random.default_rng(s))
        assert np.all(x >= box[:, 0]) and np.all(x <= box[:, 1])


# --- Bayesian optimisation ---------------------------------------------------

def quadratic(x):
    return -(x[0] - 0.5) ** 2


@pytest.mark.parametrize("seed", range(10))
def test_bo_finds_quadratic_optimum(seed):
    res = A.bayes_opt(quadratic, [[-2.0, 2.0]], A.BoConfig(init_samples=5, iterations=15, seed=seed))
    assert abs(res.best_x[0] - 0.5) < 0.1


def test_bo_history_box_and_argmax():
    box = np.array([[-1.0, 2.0], [0.0, 0.5]])
    cfg = A.BoConfig(init_samples=4, iterations=6, seed=1)
    res = A.bayes_opt(lambda x: -np.sum((x - 0.3) ** 2), box, cfg)
    assert len(res.history) == 10
    assert [h[0] for h in res.history] == list(range(10))
    xs = np.array([h[1] for h in res.history])
    assert np.all(xs >= box[:, 0]) and np.all(xs <= box[:, 1])
    values = [h[2] for h in res.history]
    assert res.best_value == max(values)
    np.testing.assert_array_equal(res.best_x, xs[int(np.argmax(values))])
    assert [h[3] for h in res.history] == list(np.maximum.accumulate(values))


def test_bo_zero_iterations_returns_best_initial_point():
    res = A.bayes_opt(quadratic, [[-2.0, 2.0]], A.BoConfig(init_samples=5, iterations=0, seed=2))
    assert len(res.history) == 5
    assert res.best_value == max(h[2] for h in res.history)


def test_bo_survives_non_finite_objective():
    def obj(x):
        return np.nan if x[0] > 1.0 else quadratic(x)
    res = A.bayes_opt(obj, [[-2.0, 2.0]], A.BoConfig(init_samples=5, iterations=10, seed=0))
    assert np.isfinite(res.best_value) and res.best_x[0] <= 1.0
    assert len(res.history) == 15


def test_bo_config_rejects_empty_budgets():
    with pytest.raises(ValueError):
        A.BoConfig(init_samples=0)
    with pytest.raises(ValueError):
        A.BoConfig(rollouts_per_eval=0)
    A.BoConfig(iterations=0)


def test_bo_deterministic_per_seed():
    run = lambda: A.bayes_opt(quadratic, [[-2.0, 2.0]], A.BoConfig(iterations=3, seed=4)).best_x.tobytes()
    assert run() == run()


# --- adaptation on a small master policy -------------------------------------

def tiny_master(d=3, seed=0):
    rng = np.random.default_rng(seed)
    batch = make_batch(200, 3, rng)
    qf = make_qf(d, rng, batch=batch)
    master = P.init_policy(qf, d, P.PolicyConfig(depth=2, width=8), rng)
    master.network.weights[-1].data *= 10
    post = E.LatentPosterior(rng.normal(size=(3, d)), np.array([-1.0, 0.0, 0.5][:d]))
    return qf, master, post


PARAMS = env.PendulumParams(0.8, 0.5)


def test_adapt_bo_budget_pinning_and_box():
    qf, master, post = tiny_master()
    counter = env.InteractionCounter()
    cfg = A.BoConfig(init_samples=2, iterations=3, rollouts_per_eval=2, horizon=30)
    z, res = A.adapt_bo(PARAMS, master, [0, 2], post, cfg, counter=counter)
    assert counter.steps == (2 + 3) * 2 * 30
    assert z[1] == 0.0 and z.shape == (3,)
    np.testing.assert_array_equal(z[[0, 2]], res.best_x)
    box = A.default_box(post, np.array([0, 2]), 1.0)
    xs = np.array([h[1] for h in res.history])
    assert np.all(xs >= box[:, 0]) and np.all(xs <= box[:, 1])
    z_fill, _ = A.adapt_bo(PARAMS, master, [0, 2], post, cfg, fill=post.mu.data.mean(0))
    assert z_fill[1] == post.mu.data[:, 1].mean()


def test_adapt_bo_objective_seed_reset():
    qf, master, post = tiny_master()
    cfg = A.BoConfig(init_samples=2, iterations=0, rollouts_per_eval=3, horizon=20, box=[[0.1, 0.1]])
    _, res = A.adapt_bo(PARAMS, master, [1], post, cfg)
    assert res.history[0][2] == res.history[1][2]  # same z, same start states
    psi0, psid0 = env.sample_initial_states(np.random.default_rng(0), 3)
    z = A.embed_latent([0.1], [1], 3)
    direct = env.batch_rollout_returns(master.as_policy(z), PARAMS, 20, psi0, psid0).mean()
    assert res.history[0][2] == direct


def test_adapt_bo_rejects_empty_dims():
    qf, master, post = tiny_master()
    with pytest.raises(ValueError, match="dimensions"):
        A.adapt_bo(PARAMS, master, [], post, A.BoConfig())


def test_adapt_bo_full_budget_is_16000_interactions():
    qf, master, post = tiny_master()
    counter = env.InteractionCounter()
    A.adapt_bo(PARAMS, master, [0, 1], post, A.BoConfig(), counter=counter)
    assert counter.steps == (5 + 15) * 4 * 200 == 16000


def test_adapt_sgd_zero_iterations_is_noop():
    qf, master, post = tiny_master()
    res = A.adapt_sgd(PARAMS, master, qf, post, A.SgdConfig(transitions=200, horizon=50, iterations=0))
    np.testing.assert_array_equal(res.mu, np.zeros(3))
    init = np.array([0.3, -0.1, 0.2])
    res = A.adapt_sgd(PARAMS, master, qf, post, A.SgdConfig(transitions=200, horizon=50, iterations=0),
                      mu_init=init)
    np.testing.assert_array_equal(res.mu, init)
    assert res.losses == [] and not res.diverged


def test_adapt_sgd_changes_only_the_new_mean():
    qf, master, post = tiny_master()
    before = {k: v.copy() for k, v in E.checkpoint_arrays(qf, post).items()}
    pol_before = {k: v.copy() for k, v in master.to_arrays().items()}
    res = A.adapt_sgd(PARAMS, master, qf, post, A.SgdConfig(transitions=400, horizon=50, iterations=30))
    after = E.checkpoint_arrays(qf, post)
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert all(pol_before[k].tobytes() == v.tobytes() for k, v in master.to_arrays().items())
    assert res.mu.shape == (3,) and np.all(res.mu != 0)
    assert len(res.losses) == 30


def test_adapt_sgd_counts_16000_interactions():
    qf, master, post = tiny_master()
    counter = env.InteractionCounter()
    res = A.adapt_sgd(PARAMS, master, qf, post, A.SgdConfig(iterations=1), counter=counter)
    assert counter.steps == res.interactions == 16000


def test_adapt_sgd_divergence_returns_last_good(monkeypatch):
    qf, master, post = tiny_master()
    real, calls = T.adam_step, []

    def flaky(state, grads):
        calls.append(1)
        if len(calls) == 4:
            raise FloatingPointError("non-finite gradient")
        return real(state, grads)

    monkeypatch.setattr(T, "adam_step", flaky)
    cfg = A.SgdConfig(transitions=200, horizon=50, iterations=10)
    with pytest.warns(UserWarning, match="diverged"):
        res = A.adapt_sgd(PARAMS, master, qf, post, cfg)
    assert res.diverged and len(res.losses) == 3
    monkeypatch.setattr(T, "adam_step", real)
    ref = A.adapt_sgd(PARAMS, master, qf, post, A.SgdConfig(transitions=200, horizon=50, iterations=3))
    np.testing.assert_array_equal(res.mu, ref.mu)


def test_sgd_loss_and_grad_matches_finite_differences(monkeypatch):
    qf, master, post = tiny_master()
    data = A.collect_with_policy(master.as_policy(np.zeros(3)), PARAMS, 100, 50, 0.5, np.random.default_rng(0))
    mu = np.array([0.2, -0.4, 0.1])
    # the TD target is a stop-gradient constant, so hold it fixed while differencing
    post_mu = E.LatentPosterior(mu[None, :], post.log_sigma.data)
    q_fixed = A.td_target(data, qf, post_mu, 0.99, np.random.default_rng(5), qf.network.frozen())
    monkeypatch.setattr(A, "td_target", lambda *a, **k: q_fixed)
    _, g = A.sgd_loss_and_grad(mu, data, qf, post.log_sigma.data, np.random.default_rng(5))
    f = lambda m: A.sgd_loss_and_grad(m, data, qf, post.log_sigma.data, np.random.default_rng(5))[0]
    for j in range(3):
        e = np.eye(3)[j] * 1e-5
        fd = (f(mu + e) - f(mu - e)) / 2e-5
        assert abs(g[j] - fd) <= max(1e-3 * max(abs(g[j]), abs(fd)), 1e-6)


def test_collect_with_policy_stores_policy_next_action():
    qf, master, post = tiny_master()
    pol = master.as_policy(np.zeros(3))
    data = A.collect_with_policy(pol, PARAMS, 120, 40, 0.5, np.random.default_rng(1))
    assert len(data) == 120
    np.testing.assert_allclose(data.next_action[:, 0], pol(data.next_obs), atol=1e-12)
    np.testing.assert_array_equal(data.obs[1:40], data.next_obs[:39])  # one rollout is contiguous


# --- return estimates --------------------------------------------------------

def test_evaluate_return_single_rollout_flagged():
    est = A.evaluate_return(PARAMS, env.zero_policy, 1, horizon=10)
    assert est.degenerate and est.stderr == 0.0 and est.n == 1


def test_evaluate_return_deterministic_per_seed():
    qf, master, post = tiny_master()
    pol = master.as_policy(post.mu.data[0])
    a = A.evaluate_return(PARAMS, pol, 6, horizon=50, seed=3)
    b = A.evaluate_return(PARAMS, pol, 6, horizon=50, seed=3)
    assert (a.mean, a.stderr) == (b.mean, b.stderr)
    assert A.evaluate_return(PARAMS, pol, 6, horizon=50, seed=4).mean != a.mean


def test_evaluate_return_zero_policy_rest_down():
    est = A.evaluate_return(PARAMS, env.zero_policy, 5, horizon=200, init=env.State(np.pi, 0.0))
    assert est.mean == pytest.approx(-200 * np.pi ** 2, rel=1e-9)
    assert est.stderr == 0.0 and not est.degenerate


def test_evaluate_return_rejects_zero_rollouts():
    with pytest.raises(ValueError):
        A.evaluate_return(PARAMS, env.zero_policy, 0)


def test_prior_policy_uses_one_latent_per_rollout():
    qf, master, post = tiny_master()
    pol = A.prior_policy(master, np.random.default_rng(0), 4)
    obs = np.tile(env.observe(0.3, 0.1), (4, 1))
    acts = pol(obs)
    assert len(set(np.round(acts, 12))) == 4


def test_sgd_objective_reuses_training_weights():
    qf, master, post = tiny_master()
    data = A.collect_with_policy(master.as_policy(np.zeros(3)), PARAMS, 100, 50, 0.5, np.random.default_rng(0))
    mu = np.array([0.5, -1.0, 2.0])
    kl_only = E.TrainConfig(latent_dim=3, lik_weight=0.0, kl_weight=1.0)
    loss, _ = A.sgd_loss_and_grad(mu, data, qf, post.log_sigma.data, np.random.default_rng(0), objective=kl_only)
    assert loss == pytest.approx(E.kl_closed_form(mu, np.exp(post.log_sigma.data)), rel=1e-12)
    heavy = E.TrainConfig(latent_dim=3, kl_weight=0.5)
    a = A.sgd_loss_and_grad(mu, data, qf, post.log_sigma.data, np.random.default_rng(0))[0]
    b = A.sgd_loss_and_grad(mu, data, qf, post.log_sigma.data, np.random.default_rng(0), objective=heavy)[0]
    assert b > a

"""Adapting the frozen master policy to a new family member.

Two routes search only the latent coordinate:

* gradient descent on the ELBO loss for a fresh posterior mean, using
  transitions gathered in the new MDP, and
* Bayesian optimisation (Matern-5/2 GP, UCB acquisition) of the rollout
  return over the highest-SNR latent dimensions.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.stats import qmc

from . import env
from . import tensor as T
from .embed import LatentPosterior, elbo_loss, td_target, TrainConfig
from .teacher import TransitionBatch

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# latent dimension selection

@dataclass
class SnrReport:
    values: np.ndarray
    selected: np.ndarray


def snr_values(mu, sigma):
    mu = np.asarray(mu, dtype=float)
    return np.abs(mu).sum(axis=0) / (mu.shape[0] * np.asarray(sigma, dtype=float))


def snr(posterior, top_k=2, threshold=None):
    """Per-dimension mean |mu| / sigma and the chosen dimensions.

    Selection is the ``top_k`` dimensions by SNR (ties to the lower index),
    or, when ``threshold`` is given, every dimension with
    ``SNR >= threshold * max(SNR)``.
    """
    values = snr_values(posterior.mu.data, posterior.sigma)
    if threshold is not None:
        selected = np.flatnonzero(values >= threshold * values.max())
    else:
        selected = np.sort(np.argsort(-values, kind="stable")[:top_k])
    return SnrReport(values, selected)


# ---------------------------------------------------------------------------
# return estimates

@dataclass
class ReturnEstimate:
    mean: float
    stderr: float
    n: int
    degenerate: bool = False


def evaluate_return(params, policy, n_rollouts, horizon=200, seed=0, init=None, counter=None):
    """Mean and standard error of undiscounted returns over seeded rollouts.

    ``policy`` maps an ``(n, 3)`` observation batch to ``n`` actions. With
    ``init`` (a :class:`~vpe.env.State`) every rollout starts there.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    if init is None:
        psi0, psid0 = env.sample_initial_states(np.random.default_rng(seed), n_rollouts)
    else:
        psi0 = np.full(n_rollouts, float(init.psi))
        psid0 = np.full(n_rollouts, float(init.psi_dot))
    returns = env.batch_rollout_returns(policy, params, horizon, psi0, psid0, counter)
    if n_rollouts == 1:
        return ReturnEstimate(float(returns[0]), 0.0, 1, degenerate=True)
    if np.all(returns == returns[0]):  # the mean of equal floats is not always bit-equal to them
        return ReturnEstimate(float(returns[0]), 0.0, n_rollouts)
    return ReturnEstimate(float(returns.mean()), float(returns.std(ddof=1) / np.sqrt(n_rollouts)), n_rollouts)


def prior_policy(master, rng, n):
    """Batch policy where rollout ``k`` uses its own ``z ~ N(0, I)``."""
    Z = rng.standard_normal((n, master.latent_dim))
    return lambda obs: master.act(obs, Z)


# ---------------------------------------------------------------------------
# ELBO-gradient adaptation

@dataclass
class SgdConfig:
    transitions: int = 16_000
    horizon: int = 200
    epsilon: float = 0.5
    iterations: int = 2000
    batch_size: int = 32
    lr: float = 1e-2
    mc_samples: int = 1
    seed: int = 0


@dataclass
class SgdResult:
    mu: np.ndarray
    interactions: int
    losses: list = field(default_factory=list)
    diverged: bool = False


def collect_with_policy(policy, params, count, horizon, epsilon, rng, counter=None):
    """Epsilon-greedy rollouts of a batch policy; the stored next action is the policy's own."""
    n_roll = -(-count // horizon)
    psi, psi_dot = env.sample_initial_states(rng, n_roll)
    a_pol = np.asarray(policy(env.observe(psi, psi_dot)), dtype=float)
    cols = {k: [] for k in ("obs", "action", "reward", "next_obs", "next_action")}
    for _ in range(horizon):
        explore = rng.random(n_roll) < epsilon
        a = np.where(explore, rng.uniform(-env.MAX_TORQUE, env.MAX_TORQUE, n_roll), a_pol)
        psi_n, vel_n, r = env.step(params, psi, psi_dot, a)
        a_next = np.asarray(policy(env.observe(psi_n, vel_n)), dtype=float)
        cols["obs"].append(env.observe(psi, psi_dot))
        cols["action"].append(a)
        cols["reward"].append(r)
        cols["next_obs"].append(env.observe(psi_n, vel_n))
        cols["next_action"].append(a_next)
        psi, psi_dot, a_pol = psi_n, vel_n, a_next
    if counter is not None:
        counter.add(n_roll * horizon)
    arr = {k: np.swapaxes(np.array(v), 0, 1) for k, v in cols.items()}
    n = n_roll * horizon
    return TransitionBatch(arr["obs"].reshape(n, -1), arr["action"].reshape(n, 1), arr["reward"].reshape(n),
                           arr["next_obs"].reshape(n, -1), arr["next_action"].reshape(n, 1),
                           np.zeros(n, dtype=np.int64))


def _objective(d, mc_samples, objective=None):
    """Loss weights and discount of the Q training run, with the adaptation's MC sample count."""
    base = objective if objective is not None else TrainConfig()
    return TrainConfig(latent_dim=d, mc_samples=mc_samples, lik_weight=base.lik_weight,
                       kl_weight=base.kl_weight, gamma=base.gamma)


def sgd_loss_and_grad(mu, data, qf, log_sigma, rng, mc_samples=1, objective=None):
    """ELBO loss of a single new posterior row and its gradient w.r.t. that row only."""
    post = LatentPosterior(np.reshape(mu, (1, -1)), log_sigma)
    post.log_sigma.requires_grad = False
    frozen = qf.network.frozen()
    cfg = _objective(post.d, mc_samples, objective)
    q_bar = td_target(data, qf, post, cfg.gamma, rng, frozen)
    with T.Tape() as tape:
        loss, _ = elbo_loss(data, post, qf, qf.popart.normalize(q_bar), 1.0, cfg, rng, network=frozen)
    return float(loss.data), tape.backward(loss, [post.mu])[post.mu][0]


def adapt_sgd(params, master, qf, posterior, config: SgdConfig, rng=None, counter=None, mu_init=None,
              objective=None):
    """Fit a new posterior mean by Adam on the ELBO loss, everything else frozen.

    Transitions come from the master policy at ``z = mu_init`` (the prior
    mean by default) with epsilon-greedy exploration. ``objective`` is the
    :class:`TrainConfig` the Q-function was trained with; its loss weights
    and discount are reused.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    mu0 = np.zeros(posterior.d) if mu_init is None else np.array(mu_init, dtype=float)
    behaviour = master.as_policy(mu0)
    data = collect_with_policy(behaviour, params, config.transitions, config.horizon, config.epsilon, rng, counter)
    interactions = len(data)
    data = data.take(slice(0, config.transitions))

    new = LatentPosterior(mu0[None, :], posterior.log_sigma.data.copy())
    new.log_sigma.requires_grad = False
    adam = T.AdamState([new.mu], lr=config.lr)
    cfg = _objective(posterior.d, config.mc_samples, objective)
    frozen = qf.network.frozen()
    last_good, losses = new.mu.data[0].copy(), []
    for it in range(config.iterations):
        batch = data.take(rng.integers(0, len(data), size=config.batch_size))
        q_bar = td_target(batch, qf, new, cfg.gamma, rng, frozen)
        try:
            with T.Tape() as tape:
                loss, parts = elbo_loss(batch, new, qf, qf.popart.normalize(q_bar), 1.0, cfg, rng, network=frozen)
            T.adam_step(adam, tape.backward(loss, [new.mu]))
        except FloatingPointError as exc:
            warnings.warn(f"SGD adaptation diverged at iteration {it}: {exc}; returning best-so-far")
            return SgdResult(last_good, interactions, losses, diverged=True)
        losses.append(parts["loss"])
        last_good = new.mu.data[0].copy()
    return SgdResult(new.mu.data[0].copy(), interactions, losses)


# ---------------------------------------------------------------------------
# Gaussian process with a Matern-5/2 kernel

SQRT5 = np.sqrt(5.0)


def matern_kernel(x, xp, lengthscale, signal_var):
    r = float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(xp, dtype=float)))
    s = SQRT5 * r / lengthscale
    return signal_var * (1.0 + s + s * s / 3.0) * np.exp(-s)


def matern_matrix(A, B, lengthscale, signal_var):
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    d2 = np.sum(A ** 2, 1)[:, None] + np.sum(B ** 2, 1)[None, :] - 2.0 * A @ B.T
    s = SQRT5 * np.sqrt(np.maximum(d2, 0.0)) / lengthscale
    return signal_var * (1.0 + s + s * s / 3.0) * np.exp(-s)


DEFAULT_LENGTHSCALES = tuple(np.logspace(np.log10(0.1), np.log10(3.0), 8))
DEFAULT_SIGNAL_VARS = (0.25, 1.0, 4.0)


@dataclass
class GpModel:
    X: np.ndarray
    y: np.ndarray
    lengthscale: float
    signal_var: float
    noise_var: float
    y_mean: float
    y_scale: float
    chol: np.ndarray
    alpha: np.ndarray
    log_marginal: float


def _factor(X, ys, lengthscale, signal_var, noise_var, max_noise=1e-1):
    K = matern_matrix(X, X, lengthscale, signal_var)
    noise = noise_var
    while True:
        try:
            L = linalg.cholesky(K + noise * np.eye(len(X)), lower=True)
            return L, noise
        except linalg.LinAlgError:
            if noise >= max_noise:
                cond = np.linalg.cond(K)
                raise linalg.LinAlgError(
                    f"GP covariance not positive definite with noise {noise:g} (cond {cond:.3g})") from None
            noise = max(noise * 10.0, 1e-10)


def gp_fit(X, y, lengthscales=DEFAULT_LENGTHSCALES, signal_vars=DEFAULT_SIGNAL_VARS, noise_var=1e-3):
    """Standardise ``y`` and pick kernel hyperparameters by log marginal likelihood on a grid."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(X) < 1 or len(X) != len(y):
        raise ValueError(f"need matching non-empty X and y, got {len(X)} and {len(y)}")
    if not np.all(np.isfinite(y)):
        raise ValueError("y must be finite")
    y_mean = float(y.mean())
    y_scale = float(y.std()) if len(y) > 1 and y.std() > 0 else 1.0
    ys = (y - y_mean) / y_scale
    n = len(y)
    best = None
    for ell in lengthscales:
        for sf2 in signal_vars:
            L, noise = _factor(X, ys, ell, sf2, noise_var)
            alpha = linalg.cho_solve((L, True), ys)
            lml = -0.5 * ys @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2 * np.pi)
            if best is None or lml > best[0]:
                best = (lml, ell, sf2, noise, L, alpha)
    lml, ell, sf2, noise, L, alpha = best
    return GpModel(X, y, float(ell), float(sf2), float(noise), y_mean, y_scale, L, alpha, float(lml))


def gp_posterior(model, x, standardized=False):
    """Posterior mean and variance of the latent function at ``x`` (rows).

    Values are in the units of ``y`` unless ``standardized`` is set.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    Ks = matern_matrix(x, model.X, model.lengthscale, model.signal_var)
    mean = Ks @ model.alpha
    v = linalg.solve_triangular(model.chol, Ks.T, lower=True)
    var = np.maximum(model.signal_var - np.sum(v * v, axis=0), 0.0)
    if standardized:
        return mean, var
    return model.y_mean + model.y_scale * mean, var * model.y_scale ** 2


def ucb(mean, variance, beta):
    return mean + beta * np.sqrt(np.maximum(variance, 0.0))


def propose(model, box, beta=2.0, rng=None, n_candidates=4096, max_rounds=200):
    """Maximise UCB over ``box`` (``(dims, 2)`` bounds): random search then coordinate ascent."""
    rng = np.random.default_rng(0) if rng is None else rng
    box = np.asarray(box, dtype=float)
    lo, hi = box[:, 0], box[:, 1]

    def acq(pts):
        m, v = gp_posterior(model, pts, standardized=True)
        return ucb(m, v, beta)

    cand = lo + (hi - lo) * rng.random((n_candidates, len(lo)))
    vals = acq(cand)
    x = cand[np.argmax(vals)].copy()
    fx = float(vals.max())
    step = 0.1 * (hi - lo)
    for _ in range(max_rounds):
        improved = False
        for j in range(len(x)):
            for sgn in (1.0, -1.0):
                y = x.copy()
                y[j] = np.clip(y[j] + sgn * step[j], lo[j], hi[j])
                fy = float(acq(y[None, :])[0])
                if fy > fx:
                    x, fx, improved = y, fy, True
        if not improved:
            step = step / 2.0
            if np.all(step < 1e-4 * (hi - lo)):
                break
    return x


@dataclass
class BoConfig:
    init_samples: int = 5
    iterations: int = 15
    rollouts_per_eval: int = 4
    horizon: int = 200
    ucb_beta: float = 2.0
    noise_var: float = 1e-3
    box: list | None = None
    box_margin: float = 1.0
    seed_reset: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.init_samples, self.rollouts_per_eval, self.horizon) < 1 or self.iterations < 0:
            raise ValueError("BO budgets must be >= 1 (iterations >= 0)")


@dataclass
class BoResult:
    best_x: np.ndarray
    best_value: float
    history: list  # (round, x, value, incumbent)


def bayes_opt(objective, box, config: BoConfig, rng=None):
    """Maximise ``objective`` over ``box``: quasi-random start, then GP/UCB rounds."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    box = np.asarray(box, dtype=float)
    lo, hi = box[:, 0], box[:, 1]
    sampler = qmc.Halton(d=len(lo), scramble=True, seed=rng)
    X = list(lo + (hi - lo) * sampler.random(config.init_samples))
    history, raw, fit_y = [], [], []

    def record(x, k):
        value = float(objective(np.asarray(x)))
        raw.append(value)
        finite = [v for v in raw if np.isfinite(v)]
        fit_y.append(value if np.isfinite(value) else (min(finite) if finite else 0.0))
        incumbent = max(finite) if finite else float("nan")
        history.append((k, np.asarray(x, dtype=float).copy(), value, incumbent))

    for k, x in enumerate(X):
        record(x, k)
    for k in range(config.iterations):
        model = gp_fit(np.array(X), np.array(fit_y), noise_var=config.noise_var)
        x = propose(model, box, config.ucb_beta, rng)
        X.append(x)
        record(x, config.init_samples + k)
    values = np.where(np.isfinite(raw), raw, -np.inf)
    best = int(np.argmax(values))
    return BoResult(np.asarray(X[best], dtype=float), float(raw[best]), history)


def default_box(posterior, dims, margin=1.0):
    """Span of the teacher means on ``dims`` widened by ``margin`` posterior std-devs."""
    mu = posterior.mu.data[:, dims]
    sig = posterior.sigma[dims]
    return np.stack([mu.min(0) - margin * sig, mu.max(0) + margin * sig], axis=1)


def embed_latent(x, dims, d, fill=None):
    z = np.zeros(d) if fill is None else np.array(fill, dtype=float)
    z[np.asarray(dims)] = x
    return z


def adapt_bo(params, master, dims, posterior, config: BoConfig, rng=None, counter=None, fill=None):
    """BO over the selected latent dimensions of the master policy in the MDP ``params``.

    Unselected dimensions are pinned to ``fill`` (the prior mean, zero, by
    default). Returns ``(best_z, BoResult)``.
    """
    dims = np.asarray(dims)
    if dims.size == 0:
        raise ValueError("no latent dimensions selected")
    d = posterior.d
    box = np.asarray(config.box, dtype=float) if config.box is not None else \
        default_box(posterior, dims, config.box_margin)
    env_rng = np.random.default_rng(config.seed)

    def objective(x):
        nonlocal env_rng
        if config.seed_reset:
            env_rng = np.random.default_rng(0)
        psi0, psid0 = env.sample_initial_states(env_rng, config.rollouts_per_eval)
        z = embed_latent(x, dims, d, fill)
        returns = env.batch_rollout_returns(master.as_policy(z), params, config.horizon, psi0, psid0, counter)
        return float(returns.mean())

    result = bayes_opt(objective, box, config, rng)
    return embed_latent(result.best_x, dims, d, fill), result

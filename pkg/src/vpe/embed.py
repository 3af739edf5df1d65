"""Joint learning of the latent posterior and the latent-conditioned Q-function.

Each teacher MDP ``i`` gets a Gaussian posterior ``N(mu[i], diag(sigma**2))``
with ``sigma`` shared across MDPs. The Q-network is trained on TD targets
built from slowly tracking target copies of both the network and the
posterior, with Pop-Art normalised targets and Welford normalised inputs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .env import OBS_DIM, ACT_DIM
from .norm import PopArtHead, RunningStats

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    latent_dim: int = 8
    iterations: int = 50_000
    batch_size: int = 32
    lik_weight: float = 10.0
    kl_weight: float = 0.001
    kl_warmup_steps: int = 50_000
    gamma: float = 0.99
    target_update_rate: float = 0.001
    mc_samples: int = 1
    lr: float = 1e-4
    depth: int = 4
    width: int = 64
    popart_rate: float = 3e-4
    val_interval: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.lik_weight < 0 or self.kl_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if not 0.0 < self.target_update_rate <= 1.0:
            raise ValueError(f"target_update_rate must be in (0, 1], got {self.target_update_rate}")
        if self.latent_dim < 1 or self.batch_size < 1 or self.mc_samples < 1:
            raise ValueError("latent_dim, batch_size and mc_samples must be >= 1")


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``checkpoint`` holds the last good state."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class LatentPosterior:
    def __init__(self, mu, log_sigma, requires_grad=True):
        self.mu = T.Tensor(np.array(mu, dtype=float), requires_grad)
        self.log_sigma = T.Tensor(np.array(log_sigma, dtype=float), requires_grad)

    @classmethod
    def prior(cls, K, d):
        return cls(np.zeros((K, d)), np.zeros(d))

    @property
    def K(self):
        return self.mu.shape[0]

    @property
    def d(self):
        return self.mu.shape[1]

    @property
    def sigma(self):
        return np.exp(self.log_sigma.data)

    def parameters(self):
        return [self.mu, self.log_sigma]

    def copy(self, requires_grad=True):
        return LatentPosterior(self.mu.data.copy(), self.log_sigma.data.copy(), requires_grad)

    def to_arrays(self, prefix="posterior"):
        return {f"{prefix}.mu": self.mu.data, f"{prefix}.log_sigma": self.log_sigma.data}

    @classmethod
    def from_arrays(cls, named, prefix="posterior"):
        return cls(named[f"{prefix}.mu"], named[f"{prefix}.log_sigma"])


class QFunction:
    """Q-network over ``[normalised obs | normalised action | z]``; output is Pop-Art normalised."""

    def __init__(self, network, popart, obs_stats, act_stats):
        self.network = network
        self.popart = popart
        self.obs_stats = obs_stats
        self.act_stats = act_stats

    @property
    def latent_dim(self):
        return self.network.input_dim - OBS_DIM - ACT_DIM

    def _act_input(self, act):
        if isinstance(act, T.Tensor):
            std = self.act_stats.std if self.act_stats.count >= 2 else np.ones(ACT_DIM)
            return T.scale(T.sub(act, self.act_stats.mean), 1.0 / np.maximum(std, 1e-6))
        return T.Tensor(self.act_stats.normalize(act))

    def forward(self, obs, act, z, network=None):
        """Normalised prediction as a tape-recorded ``(B, 1)`` tensor."""
        x = T.concat([T.Tensor(self.obs_stats.normalize(obs)), self._act_input(act), z], axis=1)
        return T.mlp_forward(network or self.network, x)

    def value(self, obs, act, z, network=None):
        """Unnormalised Q-values as a plain ``(B,)`` array, no tape."""
        x = np.concatenate([self.obs_stats.normalize(obs), self.act_stats.normalize(act), z], axis=1)
        return self.popart.denormalize(T.mlp_apply(network or self.network, x)[:, 0])

    def to_arrays(self, prefix="q"):
        named = self.network.named_arrays(prefix)
        named |= self.popart.to_arrays(f"{prefix}.popart")
        named |= self.obs_stats.to_arrays(f"{prefix}.obs_stats")
        named |= self.act_stats.to_arrays(f"{prefix}.act_stats")
        named[f"{prefix}.arch"] = np.array([self.network.depth, self.network.width,
                                            self.network.input_dim, self.network.output_dim], dtype=float)
        return named

    @classmethod
    def from_arrays(cls, named, prefix="q"):
        depth, width, input_dim, output_dim = (int(v) for v in named[f"{prefix}.arch"])
        net = T.init_network(input_dim, output_dim, depth, width)
        net.load_arrays(named, prefix)
        popart = PopArtHead([net.head])
        popart.load_arrays(named, f"{prefix}.popart")
        return cls(net, popart, RunningStats.from_arrays(named, f"{prefix}.obs_stats"),
                   RunningStats.from_arrays(named, f"{prefix}.act_stats"))


def sample_latent(posterior, i, rng):
    """Reparameterised draw ``z = mu[i] + sigma * eps`` (one row per entry of ``i``)."""
    idx = np.atleast_1d(np.asarray(i))
    eps = rng.standard_normal((idx.shape[0], posterior.d))
    sigma = T.exp(posterior.log_sigma)
    return T.add(T.take_rows(posterior.mu, idx), T.mul(sigma, T.Tensor(eps)))


def sample_latent_array(posterior, idx, rng):
    eps = rng.standard_normal((len(idx), posterior.d))
    return posterior.mu.data[idx] + posterior.sigma * eps


def td_target(batch, target_q, target_posterior, gamma, rng, network=None):
    """``r + gamma * Q_target(s', a', z)`` with ``z`` drawn from the target posterior.

    Plain arrays throughout, so nothing here is ever differentiated.
    """
    z = sample_latent_array(target_posterior, batch.mdp_index, rng)
    return batch.reward + gamma * target_q.value(batch.next_obs, batch.next_action, z, network)


def kl_closed_form(mu_i, sigma):
    """KL(N(mu, diag sigma^2) || N(0, I))."""
    mu_i = np.asarray(mu_i, dtype=float)
    s2 = np.square(np.asarray(sigma, dtype=float))
    return 0.5 * float(np.sum(s2 + mu_i ** 2 - np.log(s2) - 1.0))


def kl_rows(mu_rows, log_sigma):
    """Per-row KL as a tape tensor; ``mu_rows`` is ``(n, d)``."""
    s2 = T.exp(T.scale(log_sigma, 2.0))
    per_dim = T.sub(T.add(T.square(mu_rows), s2), T.add(T.scale(log_sigma, 2.0), 1.0))
    return T.scale(T.sum(per_dim, axis=1), 0.5)


def elbo_loss(batch, posterior, qf, targets, warmup_factor, config, rng, network=None):
    """Weighted squared TD error plus warmed-up KL, both to be minimised.

    ``targets`` are the Pop-Art normalised TD targets for ``batch``.
    Returns ``(loss_tensor, parts)`` with the scalar components in ``parts``.
    """
    n = config.mc_samples
    idx = np.tile(batch.mdp_index, n)
    obs = np.tile(batch.obs, (n, 1))
    act = np.tile(batch.action, (n, 1))
    tgt = np.tile(np.asarray(targets, dtype=float).reshape(-1, 1), (n, 1))

    z = sample_latent(posterior, idx, rng)
    pred = qf.forward(obs, act, z, network)
    mse = T.mean(T.square(T.sub(pred, tgt)))

    present = np.unique(batch.mdp_index)
    kl = T.scale(T.sum(kl_rows(T.take_rows(posterior.mu, present), posterior.log_sigma)),
                 1.0 / len(present))
    loss = T.add(T.scale(mse, config.lik_weight), T.scale(kl, warmup_factor * config.kl_weight))
    if not np.isfinite(loss.data):
        raise FloatingPointError(
            f"non-finite ELBO loss: mse={mse.data}, kl={kl.data}, "
            f"targets in [{tgt.min()}, {tgt.max()}], mdps={present.tolist()}")
    return loss, {"loss": float(loss.data), "mse": float(mse.data), "kl": float(kl.data)}


def polyak(target_tensors, online_tensors, tau):
    for t, o in zip(target_tensors, online_tensors):
        t.data = (1.0 - tau) * t.data + tau * o.data


def _fit_input_stats(data, dim):
    return RunningStats(dim).update_batch(data)


@dataclass
class TrainResult:
    qf: QFunction
    posterior: LatentPosterior
    log: list
    best_step: int
    initial_val_mse: float
    best_val_mse: float


def _validation(val, posterior, qf, target_q, target_post, target_net, config, seed):
    """Deterministic validation ELBO (full KL weight) and normalised MSE."""
    rng = np.random.default_rng(seed)
    q_bar = td_target(val, target_q, target_post, config.gamma, rng, target_net)
    loss, parts = elbo_loss(val, posterior, qf, qf.popart.normalize(q_bar), 1.0, config, rng)
    return parts["loss"], parts["mse"]


def train_qf(dataset, config: TrainConfig, rng=None):
    """Optimise network, posterior means and shared log-sigma on the ELBO loss.

    Returns a :class:`TrainResult` holding the parameters with the best
    validation ELBO. The log is a list of dicts with keys ``step, train_loss,
    mse, kl, val_elbo, val_mse, sigma``.
    """
    train, val = dataset.train, dataset.val
    if len(train) == 0:
        raise ValueError("empty training set")
    if len(val) == 0:
        val = train.take(slice(0, min(len(train), 512)))
    rng = np.random.default_rng(config.seed) if rng is None else rng
    d = config.latent_dim

    net = T.init_network(OBS_DIM + ACT_DIM + d, 1, config.depth, config.width, rng)
    target_net = net.copy(requires_grad=False)
    posterior = LatentPosterior.prior(dataset.K, d)
    target_post = posterior.copy(requires_grad=False)
    popart = PopArtHead([net.head, target_net.head], config.popart_rate)
    qf = QFunction(net, popart, _fit_input_stats(train.obs, OBS_DIM), _fit_input_stats(train.action, ACT_DIM))

    # start the target statistics at the initial TD targets rather than N(0, 1)
    warm = train.take(rng.integers(0, len(train), size=min(len(train), 4096)))
    q0 = td_target(warm, qf, target_post, config.gamma, rng, target_net)
    popart.set_stats(q0.mean(), q0.std())

    params = net.parameters() + posterior.parameters()
    adam = T.AdamState(params, lr=config.lr)
    val_seed = int(rng.integers(2**32))

    def snapshot():
        return [p.data.copy() for p in params + target_net.parameters() + target_post.parameters()] + \
               [popart.mu, popart.nu]

    def restore(snap):
        for p, a in zip(params + target_net.parameters() + target_post.parameters(), snap):
            p.data = a.copy()
        popart.mu, popart.nu = snap[-2], snap[-1]

    val_elbo, val_mse = _validation(val, posterior, qf, qf, target_post, target_net, config, val_seed)
    initial_val_mse = val_mse
    best = (val_elbo, 0, val_mse, snapshot())
    log_rows = [{"step": 0, "train_loss": float("nan"), "mse": float("nan"), "kl": float("nan"),
                 "val_elbo": val_elbo, "val_mse": val_mse, "sigma": posterior.sigma.copy()}]
    acc = {"loss": 0.0, "mse": 0.0, "kl": 0.0}
    n_acc = 0
    for step in range(1, config.iterations + 1):
        batch = train.take(rng.integers(0, len(train), size=config.batch_size))
        q_bar = td_target(batch, qf, target_post, config.gamma, rng, target_net)
        popart.update(q_bar)
        warmup = min(1.0, step / config.kl_warmup_steps) if config.kl_warmup_steps > 0 else 1.0
        try:
            with T.Tape() as tape:
                loss, parts = elbo_loss(batch, posterior, qf, popart.normalize(q_bar), warmup, config, rng)
            T.adam_step(adam, tape.backward(loss, params))
        except FloatingPointError as exc:
            restore(best[3])
            raise TrainingDiverged(f"step {step}: {exc}", checkpoint=(qf, posterior)) from exc
        polyak(target_net.parameters(), net.parameters(), config.target_update_rate)
        polyak(target_post.parameters(), posterior.parameters(), config.target_update_rate)
        for k in acc:
            acc[k] += parts[k]
        n_acc += 1

        if step % config.val_interval == 0 or step == config.iterations:
            val_elbo, val_mse = _validation(val, posterior, qf, qf, target_post, target_net, config, val_seed)
            log_rows.append({"step": step, "train_loss": acc["loss"] / n_acc, "mse": acc["mse"] / n_acc,
                             "kl": acc["kl"] / n_acc, "val_elbo": val_elbo, "val_mse": val_mse,
                             "sigma": posterior.sigma.copy()})
            acc = dict.fromkeys(acc, 0.0)
            n_acc = 0
            if val_elbo < best[0]:
                best = (val_elbo, step, val_mse, snapshot())
            log.info("qtrain step %d loss %.4g val %.4g", step, log_rows[-1]["train_loss"], val_elbo)

    restore(best[3])
    qf.popart.layers = [net.head]
    return TrainResult(qf, posterior, log_rows, best[1], initial_val_mse, best[2])


def checkpoint_arrays(qf, posterior):
    return qf.to_arrays("q") | posterior.to_arrays("posterior")


def load_qf_checkpoint(named):
    return QFunction.from_arrays(named, "q"), LatentPosterior.from_arrays(named, "posterior")


def config_dict(config):
    return asdict(config)

"""Master policy fitted against the frozen latent-conditioned Q-function."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import env
from . import tensor as T
from .embed import QFunction, LatentPosterior, sample_latent_array, TrainingDiverged
from .env import OBS_DIM, ACT_DIM, MAX_TORQUE
from .norm import RunningStats

log = logging.getLogger(__name__)


@dataclass
class PolicyConfig:
    iterations: int = 100_000
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 0.01
    depth: int = 4
    width: int = 64
    eval_interval: int = 100
    eval_mdps: int = 5
    eval_rollouts: int = 2
    horizon: int = 200
    seed: int = 0


class MasterPolicy:
    """``a = 2 * tanh(net([normalised obs | z]))``."""

    def __init__(self, network, obs_stats):
        self.network = network
        self.obs_stats = obs_stats

    @property
    def latent_dim(self):
        return self.network.input_dim - OBS_DIM

    def forward(self, obs, z):
        x = T.concat([T.Tensor(self.obs_stats.normalize(obs)), T.Tensor(np.asarray(z, dtype=float))], axis=1)
        return T.scale(T.tanh(T.mlp_forward(self.network, x)), MAX_TORQUE)

    def act(self, obs, z):
        obs = np.asarray(obs, dtype=float)
        single = obs.ndim == 1
        obs2 = obs.reshape(-1, OBS_DIM)
        z2 = np.broadcast_to(np.asarray(z, dtype=float), (obs2.shape[0], self.latent_dim))
        x = np.concatenate([self.obs_stats.normalize(obs2), z2], axis=1)
        a = MAX_TORQUE * np.tanh(T.mlp_apply(self.network, x))[:, 0]
        return float(a[0]) if single else a

    def as_policy(self, z):
        """Adapter to the rollout helpers' ``obs -> action`` callable with fixed ``z``."""
        return lambda obs: self.act(obs, z)

    def to_arrays(self, prefix="pi"):
        named = self.network.named_arrays(prefix) | self.obs_stats.to_arrays(f"{prefix}.obs_stats")
        named[f"{prefix}.arch"] = np.array([self.network.depth, self.network.width,
                                            self.network.input_dim, self.network.output_dim], dtype=float)
        return named

    @classmethod
    def from_arrays(cls, named, prefix="pi"):
        depth, width, input_dim, output_dim = (int(v) for v in named[f"{prefix}.arch"])
        net = T.init_network(input_dim, output_dim, depth, width)
        net.load_arrays(named, prefix)
        return cls(net, RunningStats.from_arrays(named, f"{prefix}.obs_stats"))


def act(policy, obs, z):
    return policy.act(obs, z)


def init_policy(qf, latent_dim, config, rng):
    net = T.init_network(OBS_DIM + latent_dim, ACT_DIM, config.depth, config.width, rng, head_scale=0.1)
    return MasterPolicy(net, qf.obs_stats.copy())


def policy_loss(batch, policy, qf, posterior, rng):
    """Negative mean unnormalised Q of the policy's own actions.

    ``qf`` is evaluated through a frozen view, so gradients reach only the
    policy network.
    """
    z = sample_latent_array(posterior, batch.mdp_index, rng)
    a = policy.forward(batch.obs, z)
    q_norm = qf.forward(batch.obs, a, T.Tensor(z), network=qf.network.frozen())
    # -(sigma * mean(q_norm) + mu)
    return T.add(T.scale(T.mean(q_norm), -qf.popart.sigma), -qf.popart.mu)


@dataclass
class PolicyResult:
    policy: MasterPolicy
    log: list
    best_step: int
    best_return: float


def _eval_setup(K, config, rng):
    mdps = np.sort(rng.choice(K, size=min(config.eval_mdps, K), replace=False))
    psi0, psid0 = env.sample_initial_states(rng, config.eval_rollouts)
    return mdps, psi0, psid0


def mean_teacher_return(policy, posterior, family, mdps, psi0, psid0, horizon):
    """Mean return over the evaluation MDPs with ``z`` fixed to each MDP's posterior mean."""
    returns = []
    for i in mdps:
        r = env.batch_rollout_returns(policy.as_policy(posterior.mu.data[i]), family[i], horizon, psi0, psid0)
        returns.append(r)
    return float(np.mean(returns))


def train_policy(dataset, qf: QFunction, posterior: LatentPosterior, family, config: PolicyConfig, rng=None):
    """Adam (with decoupled weight decay) on :func:`policy_loss`.

    Every ``eval_interval`` steps the mean return on a fixed subset of teacher
    MDPs is measured; the best-return parameters are returned.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    train = dataset.train
    if len(family) != posterior.K:
        raise ValueError(f"family has {len(family)} members but the posterior has {posterior.K} rows")
    policy = init_policy(qf, posterior.d, config, rng)
    params = policy.network.parameters()
    adam = T.AdamState(params, lr=config.lr, weight_decay=config.weight_decay)
    mdps, psi0, psid0 = _eval_setup(posterior.K, config, rng)

    best_ret = mean_teacher_return(policy, posterior, family, mdps, psi0, psid0, config.horizon)
    best = (best_ret, 0, [p.data.copy() for p in params])
    log_rows = [{"step": 0, "mean_return": best_ret}]
    for step in range(1, config.iterations + 1):
        batch = train.take(rng.integers(0, len(train), size=config.batch_size))
        with T.Tape() as tape:
            loss = policy_loss(batch, policy, qf, posterior, rng)
        try:
            T.adam_step(adam, tape.backward(loss, params))
        except FloatingPointError as exc:
            for p, a in zip(params, best[2]):
                p.data = a.copy()
            raise TrainingDiverged(f"policy step {step}: {exc}", checkpoint=policy) from exc
        if step % config.eval_interval == 0 or step == config.iterations:
            ret = mean_teacher_return(policy, posterior, family, mdps, psi0, psid0, config.horizon)
            log_rows.append({"step": step, "mean_return": ret})
            if ret > best[0]:
                best = (ret, step, [p.data.copy() for p in params])
            if step % (config.eval_interval * 100) == 0:
                log.info("policy step %d return %.2f (best %.2f @ %d)", step, ret, best[0], best[1])
    for p, a in zip(params, best[2]):
        p.data = a.copy()
    return PolicyResult(policy, log_rows, best[1], best[0])

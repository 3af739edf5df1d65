"""Tabular value-iteration teachers and epsilon-greedy dataset collection."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import env
from .env import PendulumParams

TABLE_MAGIC = b"VPEV"
TABLE_VERSION = 1
DATASET_MAGIC = b"VPED"
DATASET_VERSION = 1

_DATASET_HEADER = struct.Struct("<4sIQIII")
_TABLE_HEADER = struct.Struct("<4sIIIddd")


@dataclass(frozen=True)
class Discretization:
    psi_bins: tuple = (101,)
    psi_dot_bins: tuple = (101,)
    action_bins: int = 17

    def __post_init__(self):
        object.__setattr__(self, "psi_bins", tuple(int(b) for b in self.psi_bins))
        object.__setattr__(self, "psi_dot_bins", tuple(int(b) for b in self.psi_dot_bins))
        if len(self.psi_bins) != len(self.psi_dot_bins) or not self.psi_bins:
            raise ValueError("psi_bins and psi_dot_bins must list one count per tiling")
        if min(self.psi_bins + self.psi_dot_bins) < 3:
            raise ValueError("every bin count must be >= 3")
        if self.action_bins < 3 or self.action_bins % 2 == 0:
            raise ValueError(f"action_bins must be odd and >= 3, got {self.action_bins}")

    @property
    def n_tilings(self):
        return len(self.psi_bins)

    def actions(self):
        return np.linspace(-env.MAX_TORQUE, env.MAX_TORQUE, self.action_bins)


def _grids(n_psi, n_vel):
    return (np.linspace(-np.pi, np.pi, n_psi),
            np.linspace(-env.MAX_SPEED, env.MAX_SPEED, n_vel))


def _nearest_cell(psi, psi_dot, n_psi, n_vel):
    i = np.rint((np.asarray(psi) + np.pi) * ((n_psi - 1) / (2 * np.pi))).astype(np.int64)
    j = np.rint((np.asarray(psi_dot) + env.MAX_SPEED) * ((n_vel - 1) / (2 * env.MAX_SPEED))).astype(np.int64)
    i = np.clip(i, 0, n_psi - 1)
    j = np.clip(j, 0, n_vel - 1)
    return i * n_vel + j


@dataclass
class TabularValueFn:
    tables: list  # one (n_psi, n_vel) array per tiling
    disc: Discretization
    gamma: float
    params: PendulumParams | None = None
    sweeps_run: list = field(default_factory=list)

    def __call__(self, psi, psi_dot):
        """Average of the nearest-cell value over all tilings."""
        total = 0.0
        for table in self.tables:
            n_psi, n_vel = table.shape
            total = total + table.ravel()[_nearest_cell(psi, psi_dot, n_psi, n_vel)]
        return total / len(self.tables)


def bellman_sweeps(rewards, next_index, gamma, sweeps, tolerance=0.0, init=None):
    """Synchronous value iteration on an explicit deterministic tabular MDP.

    Parameters
    ----------
    rewards : (S, A) array
    next_index : (S, A) integer array of successor states
    gamma : discount in [0, 1)
    sweeps : maximum number of full backups
    tolerance : stop once the max-norm update falls below this value

    Returns
    -------
    V : (S,) array
    deltas : list of max-norm update magnitudes, one per sweep
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    if sweeps < 1:
        raise ValueError(f"sweeps must be >= 1, got {sweeps}")
    rewards = np.asarray(rewards, dtype=float)
    if not np.all(np.isfinite(rewards)):
        bad = np.argwhere(~np.isfinite(rewards))
        raise FloatingPointError(f"non-finite reward at (state, action) {bad[:5].tolist()}")
    V = np.zeros(rewards.shape[0]) if init is None else np.array(init, dtype=float)
    deltas = []
    for _ in range(sweeps):
        V_new = (rewards + gamma * V[next_index]).max(axis=1)
        delta = float(np.max(np.abs(V_new - V)))
        V = V_new
        deltas.append(delta)
        if delta < tolerance:
            break
    return V, deltas


def tiling_model(params, n_psi, n_vel, actions):
    """Rewards and nearest-cell successors for every (cell, action) pair of one tiling."""
    psi_grid, vel_grid = _grids(n_psi, n_vel)
    psi, vel = np.meshgrid(psi_grid, vel_grid, indexing="ij")
    psi = psi.ravel()[:, None]
    vel = vel.ravel()[:, None]
    a = np.asarray(actions)[None, :]
    psi_n, vel_n, r = env.step(params, psi, vel, a)
    return r, _nearest_cell(psi_n, vel_n, n_psi, n_vel)


def value_iteration(params, disc=Discretization(), gamma=0.99, sweeps=3000, tolerance=1e-3):
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must be in (0, 1), got {gamma}")
    actions = disc.actions()
    tables, counts = [], []
    for n_psi, n_vel in zip(disc.psi_bins, disc.psi_dot_bins):
        r, nxt = tiling_model(params, n_psi, n_vel, actions)
        V, deltas = bellman_sweeps(r, nxt, gamma, sweeps, tolerance)
        tables.append(V.reshape(n_psi, n_vel))
        counts.append(len(deltas))
    return TabularValueFn(tables, disc, gamma, params, counts)


@dataclass(frozen=True)
class TeacherPolicy:
    value_fn: TabularValueFn
    params: PendulumParams
    noise_std: float = 0.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def teacher_actions(teacher, psi, psi_dot, rng=None):
    """Greedy one-step-lookahead actions for a batch of states.

    Ties go to the lowest action index. With ``noise_std > 0`` Gaussian noise
    is added (``rng`` required) before clipping to the torque bounds.
    """
    psi = np.atleast_1d(np.asarray(psi, dtype=float))
    psi_dot = np.atleast_1d(np.asarray(psi_dot, dtype=float))
    actions = teacher.value_fn.disc.actions()
    gamma = teacher.value_fn.gamma
    psi_n, vel_n, r = env.step(teacher.params, psi[:, None], psi_dot[:, None], actions[None, :])
    q = r + gamma * teacher.value_fn(psi_n, vel_n)
    a = actions[np.argmax(q, axis=1)]
    if teacher.noise_std > 0:
        a = a + teacher.noise_std * rng.standard_normal(a.shape)
    return np.clip(a, -env.MAX_TORQUE, env.MAX_TORQUE)


def teacher_action(teacher, state, rng=None):
    return float(teacher_actions(teacher, state.psi, state.psi_dot, rng)[0])


def as_policy(teacher, rng=None):
    """Adapter to the ``obs -> action`` callable used by the rollout helpers."""
    def policy(obs):
        obs = np.asarray(obs, dtype=float)
        psi = np.arctan2(obs[..., 1], obs[..., 0])
        a = teacher_actions(teacher, np.atleast_1d(psi), np.atleast_1d(obs[..., 2]), rng)
        return a if obs.ndim > 1 else float(a[0])
    return policy


# ---------------------------------------------------------------------------
# transition batches and the binary dataset format

RECORD_DTYPE = np.dtype([
    ("obs", "<f4", (env.OBS_DIM,)),
    ("action", "<f4", (env.ACT_DIM,)),
    ("reward", "<f4"),
    ("next_obs", "<f4", (env.OBS_DIM,)),
    ("next_action", "<f4", (env.ACT_DIM,)),
    ("mdp_index", "<u4"),
])


@dataclass
class TransitionBatch:
    """Struct-of-arrays view of many transitions."""

    obs: np.ndarray          # (N, obs_dim)
    action: np.ndarray       # (N, act_dim)
    reward: np.ndarray       # (N,)
    next_obs: np.ndarray     # (N, obs_dim)
    next_action: np.ndarray  # (N, act_dim)
    mdp_index: np.ndarray    # (N,) int

    def __len__(self):
        return self.reward.shape[0]

    def take(self, idx):
        return TransitionBatch(self.obs[idx], self.action[idx], self.reward[idx],
                               self.next_obs[idx], self.next_action[idx], self.mdp_index[idx])

    @classmethod
    def concat(cls, batches):
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("obs", "action", "reward", "next_obs", "next_action", "mdp_index")))

    def transitions(self):
        for k in range(len(self)):
            yield env.Transition(self.obs[k], float(self.action[k, 0]), float(self.reward[k]),
                                 self.next_obs[k], float(self.next_action[k, 0]), int(self.mdp_index[k]))

    def to_records(self):
        rec = np.zeros(len(self), dtype=RECORD_DTYPE)
        for f in ("obs", "action", "reward", "next_obs", "next_action", "mdp_index"):
            rec[f] = getattr(self, f)
        return rec

    @classmethod
    def from_records(cls, rec):
        return cls(rec["obs"].astype(float), rec["action"].astype(float), rec["reward"].astype(float),
                   rec["next_obs"].astype(float), rec["next_action"].astype(float),
                   rec["mdp_index"].astype(np.int64))


@dataclass
class Dataset:
    train: TransitionBatch
    val: TransitionBatch
    K: int
    obs_dim: int = env.OBS_DIM
    act_dim: int = env.ACT_DIM

    def __post_init__(self):
        for part in (self.train, self.val):
            if len(part) and int(part.mdp_index.max()) >= self.K:
                raise ValueError("mdp_index out of range for K")


def write_transitions(path, batch, K):
    with open(path, "wb") as f:
        f.write(_DATASET_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(batch),
                                     env.OBS_DIM, env.ACT_DIM, K))
        f.write(batch.to_records().tobytes())


def read_transitions(path):
    """Returns ``(TransitionBatch, K)``."""
    with open(path, "rb") as f:
        head = f.read(_DATASET_HEADER.size)
        magic, version, count, obs_dim, act_dim, K = _DATASET_HEADER.unpack(head)
        if magic != DATASET_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != DATASET_VERSION or obs_dim != env.OBS_DIM or act_dim != env.ACT_DIM:
            raise ValueError(f"{path}: unsupported layout v{version} obs={obs_dim} act={act_dim}")
        body = f.read()
    if len(body) != count * RECORD_DTYPE.itemsize:
        raise ValueError(f"{path}: truncated ({len(body)} bytes for {count} records)")
    rec = np.frombuffer(body, dtype=RECORD_DTYPE, count=count)
    return TransitionBatch.from_records(rec), K


def save_dataset(train_path, val_path, ds):
    write_transitions(train_path, ds.train, ds.K)
    write_transitions(val_path, ds.val, ds.K)


def load_dataset(train_path, val_path):
    train, K = read_transitions(train_path)
    val, K_val = read_transitions(val_path)
    if K != K_val:
        raise ValueError(f"train/val disagree on K ({K} vs {K_val})")
    return Dataset(train, val, K)


def save_value_fn(path, vf):
    params = vf.params or PendulumParams(1.0, 0.0)
    with open(path, "wb") as f:
        f.write(_TABLE_HEADER.pack(TABLE_MAGIC, TABLE_VERSION, vf.disc.n_tilings, vf.disc.action_bins,
                                   vf.gamma, params.mass, params.kappa))
        for t in vf.tables:
            f.write(struct.pack("<II", *t.shape))
        for t in vf.tables:
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_value_fn(path):
    with open(path, "rb") as f:
        magic, version, n_tilings, action_bins, gamma, mass, kappa = _TABLE_HEADER.unpack(
            f.read(_TABLE_HEADER.size))
        if magic != TABLE_MAGIC or version != TABLE_VERSION:
            raise ValueError(f"{path}: not a value table (magic {magic!r}, version {version})")
        shapes = [struct.unpack("<II", f.read(8)) for _ in range(n_tilings)]
        tables = [np.frombuffer(f.read(8 * a * b), dtype="<f8").reshape(a, b).copy() for a, b in shapes]
    disc = Discretization(tuple(s[0] for s in shapes), tuple(s[1] for s in shapes), action_bins)
    return TabularValueFn(tables, disc, gamma, PendulumParams(mass, kappa))


# ---------------------------------------------------------------------------
# data collection

def _collect_one(teacher, epsilon, count, horizon, rng, mdp_index):
    """Epsilon-greedy rollouts in one MDP, advanced in lock-step and truncated to ``count``."""
    n_roll = -(-count // horizon)
    psi, psi_dot = env.sample_initial_states(rng, n_roll)
    a_teacher = teacher_actions(teacher, psi, psi_dot, rng)
    cols = {k: [] for k in ("obs", "action", "reward", "next_obs", "next_action")}
    for _ in range(horizon):
        explore = rng.random(n_roll) < epsilon
        uniform = rng.uniform(-env.MAX_TORQUE, env.MAX_TORQUE, n_roll)
        a = np.where(explore, uniform, a_teacher)
        psi_n, vel_n, r = env.step(teacher.params, psi, psi_dot, a)
        a_next = teacher_actions(teacher, psi_n, vel_n, rng)
        cols["obs"].append(env.observe(psi, psi_dot))
        cols["action"].append(a)
        cols["reward"].append(r)
        cols["next_obs"].append(env.observe(psi_n, vel_n))
        cols["next_action"].append(a_next)
        psi, psi_dot, a_teacher = psi_n, vel_n, a_next
    # (horizon, n_roll, ...) -> rollout-major order
    arr = {k: np.swapaxes(np.array(v), 0, 1) for k, v in cols.items()}
    obs = arr["obs"].reshape(-1, env.OBS_DIM)[:count]
    next_obs = arr["next_obs"].reshape(-1, env.OBS_DIM)[:count]
    action = arr["action"].reshape(-1, 1)[:count]
    next_action = arr["next_action"].reshape(-1, 1)[:count]
    reward = arr["reward"].reshape(-1)[:count]
    return TransitionBatch(obs, action, reward, next_obs, next_action,
                           np.full(count, mdp_index, dtype=np.int64))


def collect_dataset(teachers: Sequence[TeacherPolicy], epsilon, total, horizon=200, seed=0,
                    val_fraction=0.02):
    """Gather ``total`` transitions spread evenly over the teacher MDPs.

    The tail ``val_fraction`` of each MDP's transitions is held out as the
    validation split.
    """
    if total < 1:
        raise ValueError("total must be >= 1")
    if not teachers:
        raise ValueError("at least one teacher is required")
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    K = len(teachers)
    base, extra = divmod(total, K)
    seeds = np.random.SeedSequence(seed).spawn(K)
    train, val = [], []
    for i, teacher in enumerate(teachers):
        count = base + (1 if i < extra else 0)
        if count == 0:
            continue
        part = _collect_one(teacher, epsilon, count, horizon, np.random.default_rng(seeds[i]), i)
        n_val = int(round(val_fraction * count))
        n_val = min(n_val, count - 1)
        train.append(part.take(slice(0, count - n_val)))
        val.append(part.take(slice(count - n_val, count)))
    return Dataset(TransitionBatch.concat(train), TransitionBatch.concat(val), K)

"""Pendulum swing-up MDP family.

The angle ``psi`` is measured from upright (0) and the action is a torque-like
command whose effect on angular acceleration scales with ``1 / mass``.  Each
family member differs in pendulum mass (dynamics) and in the action-penalty
coefficient ``kappa`` (reward).

All functions accept scalars or equally-shaped numpy arrays so that many
rollouts can be advanced in lock-step.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from typing import Callable, Sequence

import numpy as np

GRAVITY = 10.0
DT = 0.05
MAX_SPEED = 8.0
MAX_TORQUE = 2.0
MASS_RANGE = (0.4, 1.2)
KAPPA_RANGE = (0.0, 2.0)
OBS_DIM = 3
ACT_DIM = 1


@dataclass(frozen=True)
class PendulumParams:
    mass: float
    kappa: float

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be non-negative, got {self.kappa}")


@dataclass(frozen=True)
class State:
    psi: float
    psi_dot: float


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: float
    reward: float
    next_obs: np.ndarray
    next_action: float
    mdp_index: int


class InteractionCounter:
    """Counts environment steps executed through the rollout helpers."""

    def __init__(self):
        self.steps = 0

    def add(self, n):
        self.steps += int(n)


def sample_family(count, seed):
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    masses = rng.uniform(*MASS_RANGE, size=count)
    kappas = rng.uniform(*KAPPA_RANGE, size=count)
    return [PendulumParams(float(m), float(k)) for m, k in zip(masses, kappas)]


def wrap(psi):
    """Map angles into [-pi, pi]; values already in range are returned untouched."""
    psi = np.asarray(psi, dtype=float)
    wrapped = np.remainder(psi + np.pi, 2 * np.pi) - np.pi
    # remainder sends +pi (and its odd multiples) to -pi; keep the sign of the input
    wrapped = np.where((wrapped == -np.pi) & (psi > 0), np.pi, wrapped)
    out = np.where(np.abs(psi) <= np.pi, psi, wrapped)
    return out if out.ndim else float(out)


def reward(params, psi, psi_dot, a):
    return -(np.square(psi) + 0.1 * np.square(psi_dot) + params.kappa * np.square(a))


def step(params, psi, psi_dot, a):
    """Advance one control interval.

    Returns ``(psi_next, psi_dot_next, r)`` where ``r`` is the reward of the
    pre-step state and the (clipped) action.
    """
    a = np.clip(a, -MAX_TORQUE, MAX_TORQUE)
    r = reward(params, psi, psi_dot, a)
    acc = 1.5 * GRAVITY * np.sin(psi) + 3.0 * a / params.mass
    psi_dot_next = np.clip(psi_dot + acc * DT, -MAX_SPEED, MAX_SPEED)
    psi_next = wrap(psi + psi_dot_next * DT)
    return psi_next, psi_dot_next, r


def step_state(params, state, action):
    psi, psi_dot, r = step(params, state.psi, state.psi_dot, action)
    return State(float(psi), float(psi_dot)), float(r)


def observe(psi, psi_dot):
    """Network-input encoding ``[cos psi, sin psi, psi_dot]`` (last axis)."""
    psi = np.asarray(psi, dtype=float)
    return np.stack([np.cos(psi), np.sin(psi), np.asarray(psi_dot, dtype=float)], axis=-1)


def sample_initial_states(rng, n):
    psi = rng.uniform(-np.pi, np.pi, size=n)
    psi_dot = rng.uniform(-1.0, 1.0, size=n)
    return psi, psi_dot


def rollout(policy, params, horizon, init=None, seed=0, mdp_index=0, counter=None):
    """Run one episode with ``policy: obs -> action``.

    ``init`` is a :class:`State` or ``None`` for a seeded random start.
    Returns the undiscounted return and the list of transitions; each
    transition's ``next_action`` is the policy's action at the next state.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if init is None:
        psi0, psid0 = sample_initial_states(np.random.default_rng(seed), 1)
        psi, psi_dot = float(psi0[0]), float(psid0[0])
    else:
        psi, psi_dot = float(init.psi), float(init.psi_dot)

    trajectory = []
    total = 0.0
    obs = observe(psi, psi_dot)
    a = float(np.clip(policy(obs), -MAX_TORQUE, MAX_TORQUE))
    for _ in range(horizon):
        psi, psi_dot, r = step(params, psi, psi_dot, a)
        next_obs = observe(psi, psi_dot)
        next_a = float(np.clip(policy(next_obs), -MAX_TORQUE, MAX_TORQUE))
        trajectory.append(Transition(obs, a, float(r), next_obs, next_a, mdp_index))
        total += float(r)
        obs, a = next_obs, next_a
    if counter is not None:
        counter.add(horizon)
    return total, trajectory


def batch_rollout_returns(policy, params, horizon, psi0, psi_dot0, counter=None):
    """Vectorised rollouts; ``policy`` maps an ``(n, 3)`` observation array to ``n`` actions.

    Returns the per-rollout undiscounted returns.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    psi = np.array(psi0, dtype=float)
    psi_dot = np.array(psi_dot0, dtype=float)
    returns = np.zeros(psi.shape[0])
    for _ in range(horizon):
        a = np.asarray(policy(observe(psi, psi_dot)), dtype=float).reshape(psi.shape)
        psi, psi_dot, r = step(params, psi, psi_dot, a)
        returns += r
    if counter is not None:
        counter.add(horizon * psi.shape[0])
    return returns


def rollout_states(policy, params, horizon, psi0, psi_dot0):
    """Vectorised rollout returning the ``(horizon + 1, n)`` angle and velocity histories."""
    psi = np.array(psi0, dtype=float)
    psi_dot = np.array(psi_dot0, dtype=float)
    psis, vels = [psi], [psi_dot]
    for _ in range(horizon):
        a = np.asarray(policy(observe(psi, psi_dot)), dtype=float).reshape(psi.shape)
        psi, psi_dot, _ = step(params, psi, psi_dot, a)
        psis.append(psi)
        vels.append(psi_dot)
    return np.array(psis), np.array(vels)


def save_family(path, family: Sequence[PendulumParams]):
    with open(path, "w") as f:
        json.dump([asdict(p) for p in family], f, indent=2)
        f.write("\n")


def load_family(path):
    with open(path) as f:
        items = json.load(f)
    return [PendulumParams(float(p["mass"]), float(p["kappa"])) for p in items]


def write_trajectory_csv(path, trajectory):
    """Dump ``(t, psi, psi_dot, a, r)`` rows; angles are recovered from the observations."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "psi", "psi_dot", "a", "r"])
        for t, tr in enumerate(trajectory):
            psi = math.atan2(tr.obs[1], tr.obs[0])
            w.writerow([t, repr(psi), repr(float(tr.obs[2])), repr(tr.action), repr(tr.reward)])


def zero_policy(obs):
    obs = np.asarray(obs)
    return np.zeros(obs.shape[:-1]) if obs.ndim > 1 else 0.0


PolicyFn = Callable[[np.ndarray], "np.ndarray | float"]

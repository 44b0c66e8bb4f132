"""Built-in MDPs and a seeded random-MDP generator."""

from __future__ import annotations

import re

import numpy as np

from .mdp import DiscreteDistribution, FiniteMdp, MdpError

FAIR_COIN = DiscreteDistribution([(0.0, 0.5), (2.0, 0.5)])
ZERO = DiscreteDistribution.dirac(0.0)


def _self_loop(rewards, gamma, rmax) -> FiniteMdp:
    n_actions = len(rewards)
    return FiniteMdp(1, n_actions, (tuple(rewards),), np.ones((1, n_actions, 1)), gamma, rmax)


def _decision_then_absorb(arm_rewards, gamma, rmax) -> FiniteMdp:
    """State 0 picks an arm, every arm moves to absorbing zero-reward state 1."""
    n_actions = len(arm_rewards)
    trans = np.zeros((2, n_actions, 2))
    trans[:, :, 1] = 1.0
    rewards = (tuple(arm_rewards), (ZERO,) * n_actions)
    return FiniteMdp(2, n_actions, rewards, trans, gamma, rmax)


def m1() -> FiniteMdp:
    """One state, one action, reward 1, self-loop."""
    return _self_loop([DiscreteDistribution.dirac(1.0)], 0.5, 1.0)


def m2() -> FiniteMdp:
    """One state, one action, reward 0 or 2 with equal odds, self-loop."""
    return _self_loop([FAIR_COIN], 0.5, 2.0)


def m3() -> FiniteMdp:
    """Single-arm bandit with deterministic reward 0."""
    return _self_loop([ZERO], 0.5, 1.0)


def m4() -> FiniteMdp:
    """Two deterministic arms (reward 1 and 0) into an absorbing state."""
    return _decision_then_absorb([DiscreteDistribution.dirac(1.0), ZERO], 0.5, 1.0)


def m5() -> FiniteMdp:
    """Arm 0 pays 0 or 2, arm 1 pays 0.5; both lead to an absorbing state."""
    return _decision_then_absorb([FAIR_COIN, DiscreteDistribution.dirac(0.5)], 0.5, 2.0)


def m5_tied() -> FiniteMdp:
    """Both arms pay 0 or 2; sampled returns tie half the time."""
    return _decision_then_absorb([FAIR_COIN, FAIR_COIN], 0.5, 2.0)


def m6() -> FiniteMdp:
    """One state, two identical noisy actions, self-loops."""
    return _self_loop([FAIR_COIN, FAIR_COIN], 0.5, 2.0)


def two_state_symmetric(flip: float = 0.3, gamma: float = 0.5) -> FiniteMdp:
    trans = np.array([[[1 - flip, flip]], [[flip, 1 - flip]]])
    return FiniteMdp(2, 1, ((ZERO,), (ZERO,)), trans, gamma, 1.0)


def random_mdp(
    seed: int,
    n_states: int = 5,
    n_actions: int = 3,
    gamma: float = 0.9,
    rmax: float = 1.0,
) -> FiniteMdp:
    """Random MDP with exponential-normalized transition rows and 2-atom rewards."""
    rng = np.random.default_rng(seed)
    trans = rng.exponential(size=(n_states, n_actions, n_states))
    trans /= trans.sum(axis=-1, keepdims=True)
    rewards = []
    for _ in range(n_states):
        row = []
        for _ in range(n_actions):
            lo, hi = np.sort(rng.uniform(0.0, rmax, size=2))
            p = rng.uniform(0.1, 0.9)
            row.append(DiscreteDistribution([(lo, p), (hi, 1.0 - p)]))
        rewards.append(tuple(row))
    return FiniteMdp(n_states, n_actions, tuple(rewards), trans, gamma, rmax)


BUILTIN = {"M1": m1, "M2": m2, "M3": m3, "M4": m4, "M5": m5, "M5-tied": m5_tied, "M6": m6}

_RANDOM = re.compile(r"random:(\d+)((?:,\w+=[\d.]+)*)$")


def builtin_mdp(name: str) -> FiniteMdp:
    """Look up ``M1``..``M6`` or ``random:<seed>[,states=..,actions=..,gamma=..]``."""
    if name in BUILTIN:
        return BUILTIN[name]()
    m = _RANDOM.match(name)
    if not m:
        raise MdpError(f"unknown built-in MDP '{name}'")
    kwargs = {}
    for part in filter(None, m.group(2).split(",")):
        key, value = part.split("=")
        if key == "states":
            kwargs["n_states"] = int(value)
        elif key == "actions":
            kwargs["n_actions"] = int(value)
        elif key in ("gamma", "rmax"):
            kwargs[key] = float(value)
        else:
            raise MdpError(f"unknown random-MDP option '{key}'")
    return random_mdp(int(m.group(1)), **kwargs)

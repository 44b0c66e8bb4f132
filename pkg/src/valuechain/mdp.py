"""Finite MDPs and their exact Bellman machinery.

Value functions are plain numpy arrays: shape ``(S,)`` for state values and
``(S, A)`` for action values. Flattened coordinates are row-major ``s * A + a``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_TOL = 1e-9


class MdpError(ValueError):
    """Raised for malformed MDP documents or inconsistent inputs."""


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finite-support distribution given as ``(value, probability)`` atoms."""

    atoms: tuple[tuple[float, float], ...]

    def __init__(self, atoms: Sequence[Sequence[float]]):
        object.__setattr__(self, "atoms", tuple((float(v), float(p)) for v, p in atoms))

    @classmethod
    def dirac(cls, value: float) -> DiscreteDistribution:
        return cls([(value, 1.0)])

    @property
    def values(self) -> np.ndarray:
        return np.array([v for v, _ in self.atoms])

    @property
    def probs(self) -> np.ndarray:
        return np.array([p for _, p in self.atoms])

    def mean(self) -> float:
        return float(self.values @ self.probs)

    def second_moment(self) -> float:
        return float(self.values**2 @ self.probs)

    def variance(self) -> float:
        m = self.mean()
        return float(((self.values - m) ** 2) @ self.probs)


@dataclass(frozen=True)
class Policy:
    """A policy as an ``(S, A)`` matrix of action probabilities.

    ``actions`` is set when the policy is deterministic.
    """

    probs: np.ndarray
    actions: tuple[int, ...] | None = None

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> Policy:
        actions = tuple(int(a) for a in actions)
        if any(a < 0 or a >= n_actions for a in actions):
            raise MdpError(f"action index out of range [0, {n_actions}) in {actions}")
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        probs.setflags(write=False)
        return cls(probs, actions)

    @classmethod
    def stochastic(cls, probs) -> Policy:
        probs = np.array(probs, dtype=float)
        if probs.ndim != 2:
            raise MdpError("stochastic policy must be an (S, A) matrix")
        if (probs < 0).any() or not np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=PROB_TOL):
            raise MdpError("policy rows must be nonnegative and sum to 1")
        probs.setflags(write=False)
        return cls(probs, None)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> Policy:
        return cls.stochastic(np.full((n_states, n_actions), 1.0 / n_actions))

    @property
    def is_deterministic(self) -> bool:
        return self.actions is not None

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Policy):
            return NotImplemented
        return self.probs.shape == other.probs.shape and bool(np.array_equal(self.probs, other.probs))

    def __hash__(self):
        return hash((self.probs.shape, self.probs.tobytes()))


@dataclass(frozen=True, eq=False)
class FiniteMdp:
    """The tuple (S, A, R, P, gamma) with finite-support rewards.

    Construction never raises on invariant violations; call :func:`validate_mdp`
    (or use :func:`load_mdp`, which does) to check them.
    """

    n_states: int
    n_actions: int
    rewards: tuple[tuple[DiscreteDistribution, ...], ...]
    transitions: np.ndarray
    gamma: float
    rmax: float

    def __post_init__(self):
        rewards = tuple(
            tuple(r if isinstance(r, DiscreteDistribution) else DiscreteDistribution(r) for r in row)
            for row in self.rewards
        )
        object.__setattr__(self, "rewards", rewards)
        trans = np.array(self.transitions, dtype=float)
        trans.setflags(write=False)
        object.__setattr__(self, "transitions", trans)
        if len(rewards) != self.n_states or any(len(row) != self.n_actions for row in rewards):
            raise MdpError(f"rewards must be {self.n_states}x{self.n_actions}")
        if trans.shape != (self.n_states, self.n_actions, self.n_states):
            raise MdpError(
                f"transitions must have shape {(self.n_states, self.n_actions, self.n_states)}, got {trans.shape}"
            )

    @cached_property
    def mean_rewards(self) -> np.ndarray:
        return np.array([[r.mean() for r in row] for row in self.rewards])

    @cached_property
    def reward_second_moments(self) -> np.ndarray:
        return np.array([[r.second_moment() for r in row] for row in self.rewards])

    @cached_property
    def reward_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """Padded ``(S, A, K)`` atom values and cumulative probabilities."""
        k = max(len(r.atoms) for row in self.rewards for r in row)
        values = np.zeros((self.n_states, self.n_actions, k))
        cum = np.ones((self.n_states, self.n_actions, k))
        for s, row in enumerate(self.rewards):
            for a, r in enumerate(row):
                n = len(r.atoms)
                values[s, a, :n] = r.values
                cum[s, a, :n] = np.cumsum(r.probs)
        return values, cum

    @cached_property
    def transition_cdf(self) -> np.ndarray:
        return np.cumsum(self.transitions, axis=-1)

    @property
    def vmax(self) -> float:
        return self.rmax / (1.0 - self.gamma)

    @cached_property
    def null_states(self) -> np.ndarray:
        """Absorbing zero-reward states (every action self-loops with reward 0)."""
        out = np.zeros(self.n_states, dtype=bool)
        for s in range(self.n_states):
            out[s] = all(
                self.transitions[s, a, s] == 1.0 and all(v == 0.0 for v, p in self.rewards[s][a].atoms if p > 0)
                for a in range(self.n_actions)
            )
        return out

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "rmax": self.rmax,
            "rewards": [[[list(atom) for atom in r.atoms] for r in row] for row in self.rewards],
            "transitions": self.transitions.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> FiniteMdp:
        for name in ("n_states", "n_actions", "gamma", "rmax", "rewards", "transitions"):
            if name not in doc:
                raise MdpError(f"missing field '{name}'")
        try:
            return cls(
                n_states=int(doc["n_states"]),
                n_actions=int(doc["n_actions"]),
                rewards=tuple(tuple(DiscreteDistribution(r) for r in row) for row in doc["rewards"]),
                transitions=np.array(doc["transitions"], dtype=float),
                gamma=float(doc["gamma"]),
                rmax=float(doc["rmax"]),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, MdpError):
                raise
            raise MdpError(f"malformed field: {exc}") from exc


def validate_mdp(mdp: FiniteMdp) -> list[str]:
    """List every invariant violation; an empty list means the MDP is valid."""
    problems = []
    if mdp.n_states < 1 or mdp.n_actions < 1:
        problems.append("n_states and n_actions must be positive")
    if not 0.0 <= mdp.gamma < 1.0:
        problems.append(f"gamma {mdp.gamma} not in [0, 1)")
    if mdp.rmax < 0:
        problems.append(f"rmax {mdp.rmax} < 0")
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            row = mdp.transitions[s, a]
            if (row < 0).any():
                problems.append(f"negative transition probability at ({s},{a})")
            total = row.sum()
            if abs(total - 1.0) > PROB_TOL:
                problems.append(f"row sum {total:g} != 1 at ({s},{a})")
            dist = mdp.rewards[s][a]
            if not dist.atoms:
                problems.append(f"empty reward distribution at ({s},{a})")
                continue
            if (dist.probs < 0).any():
                problems.append(f"negative reward probability at ({s},{a})")
            if abs(dist.probs.sum() - 1.0) > PROB_TOL:
                problems.append(f"reward probabilities sum {dist.probs.sum():g} != 1 at ({s},{a})")
            for v, _ in dist.atoms:
                if v > mdp.rmax:
                    problems.append(f"reward atom {v:g} > rmax {mdp.rmax:g} at ({s},{a})")
                elif v < 0:
                    problems.append(f"reward atom {v:g} < 0 at ({s},{a})")
    return problems


def load_mdp(path) -> FiniteMdp:
    """Read and validate an MDP JSON document."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MdpError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MdpError(f"{path}: JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    mdp = FiniteMdp.from_dict(doc)
    problems = validate_mdp(mdp)
    if problems:
        raise MdpError(f"{path}: invalid MDP:\n  " + "\n  ".join(problems))
    return mdp


def _check_values(mdp: FiniteMdp, f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape not in ((mdp.n_states,), (mdp.n_states, mdp.n_actions)):
        raise MdpError(
            f"value function shape {f.shape} matches neither ({mdp.n_states},) nor ({mdp.n_states}, {mdp.n_actions})"
        )
    if not np.isfinite(f).all():
        raise MdpError("value function has non-finite entries")
    return f


def policy_reward(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    return (policy.probs * mdp.mean_rewards).sum(axis=1)


def policy_transition_matrix(mdp: FiniteMdp, policy: Policy, action_values: bool = False) -> np.ndarray:
    """``P^pi`` over states, or over state-action pairs when ``action_values``."""
    if not action_values:
        return np.einsum("sa,sat->st", policy.probs, mdp.transitions)
    S, A = mdp.n_states, mdp.n_actions
    # (s,a) -> (s',a') with probability P(s'|s,a) pi(a'|s')
    return np.einsum("sat,tb->satb", mdp.transitions, policy.probs).reshape(S * A, S * A)


def bellman_policy_backup(mdp: FiniteMdp, policy: Policy, f) -> np.ndarray:
    f = _check_values(mdp, f)
    if f.ndim == 1:
        q = mdp.mean_rewards + mdp.gamma * mdp.transitions @ f
        return (policy.probs * q).sum(axis=1)
    v_next = (policy.probs * f).sum(axis=1)
    return mdp.mean_rewards + mdp.gamma * mdp.transitions @ v_next


def bellman_optimality_backup(mdp: FiniteMdp, f) -> np.ndarray:
    f = _check_values(mdp, f)
    if f.ndim == 1:
        return (mdp.mean_rewards + mdp.gamma * mdp.transitions @ f).max(axis=1)
    return mdp.mean_rewards + mdp.gamma * mdp.transitions @ f.max(axis=1)


def exact_policy_values(mdp: FiniteMdp, policy: Policy) -> tuple[np.ndarray, np.ndarray]:
    """Solve ``(I - gamma P^pi) v = r^pi`` and derive ``q^pi``."""
    p = policy_transition_matrix(mdp, policy)
    lhs = np.eye(mdp.n_states) - mdp.gamma * p
    try:
        v = np.linalg.solve(lhs, policy_reward(mdp, policy))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - impossible for gamma < 1
        raise RuntimeError("singular policy evaluation system") from exc
    q = mdp.mean_rewards + mdp.gamma * mdp.transitions @ v
    return v, q


def greedy_policy(q) -> Policy:
    """Deterministic greedy policy; ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 2:
        raise MdpError("greedy_policy needs an (S, A) action-value table")
    if not np.isfinite(q).all():
        raise MdpError("action values have non-finite entries")
    return Policy.deterministic(np.argmax(q, axis=1), q.shape[1])


def policy_iteration(mdp: FiniteMdp, pi0: Policy) -> list[tuple[Policy, np.ndarray]]:
    """Classical policy iteration; returns ``[(pi_k, q^{pi_k}), ...]`` ending at the optimum."""
    if not pi0.is_deterministic:
        raise MdpError("policy iteration starts from a deterministic policy")
    path = []
    pi = pi0
    for _ in range(mdp.n_actions**mdp.n_states + 1):
        _, q = exact_policy_values(mdp, pi)
        path.append((pi, q))
        nxt = greedy_policy(q)
        if nxt == pi:
            return path
        pi = nxt
    raise RuntimeError("policy iteration did not terminate")  # pragma: no cover

"""Sampled (empirical) Bellman operators and their exact oracles.

All evaluation targets (TD(0), Monte Carlo, TD(lambda)) are linear functionals
of one sampled trajectory per state::

    target(s) = sum_t reward_w[t] * r_t + sum_{t>=1} state_w[t] * f(s_t)

which lets one rollout routine sample them and one backward moment recursion
compute their exact mean and variance.

Random draws are addressed by ``(particle, coordinate slot, draw index)``.
Within a slot the draw layout is fixed: trajectory step ``t`` uses draws
``3t`` (action), ``3t + 1`` (reward) and ``3t + 2`` (successor); one-step
action-value targets use draw 1 for the reward, 2 for the successor, 3 for
the SARSA branch coin and 4 for the SARSA exploratory action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .mdp import FiniteMdp, MdpError, Policy, policy_reward, policy_transition_matrix
from . import _kernels
from .rng import RngStream, uniform_from_keys

EVALUATION = ("TD0", "MC", "TDLambda")
CONTROL = ("QLearning", "Sarsa", "ExpectedSarsa")
ALGORITHMS = EVALUATION + CONTROL + ("DoubleQLearning", "OPI")

DEFAULT_HORIZON_TOL = 1e-6

_REQUIRED = {
    "TD0": {"base_policy"},
    "MC": {"base_policy", "horizon_tolerance"},
    "TDLambda": {"base_policy", "lam", "horizon_tolerance"},
    "QLearning": set(),
    "Sarsa": {"base_policy", "epsilon"},
    "ExpectedSarsa": {"base_policy", "epsilon"},
    "DoubleQLearning": {"p"},
    "OPI": {"horizon_tolerance"},
}
_OPTIONAL_PARAMS = ("lam", "epsilon", "p", "base_policy", "horizon_tolerance")

_DRAW_ACTION, _DRAW_REWARD, _DRAW_NEXT, _DRAW_COIN, _DRAW_EXPLORE = 0, 1, 2, 3, 4


class ExtendedPoint(NamedTuple):
    """The pair of tables kept by Double Q-learning."""

    qa: np.ndarray
    qb: np.ndarray


@dataclass(frozen=True)
class AlgorithmSpec:
    """Which sampled operator to apply, with its parameters.

    ``base_policy`` may be a :class:`Policy` or the string ``"uniform"``.
    ``horizon_tolerance`` defaults to 1e-6 for the algorithms that truncate
    returns.
    """

    algorithm: str
    alpha: float
    lam: float | None = None
    epsilon: float | None = None
    p: float | None = None
    base_policy: Policy | str | None = None
    horizon_tolerance: float | None = field(default=None)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm '{self.algorithm}'; expected one of {ALGORITHMS}")
        if not 0.0 < self.alpha <= 1.0 and not (self.algorithm == "OPI" and self.alpha == 0.0):
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        required = _REQUIRED[self.algorithm]
        if "horizon_tolerance" in required and self.horizon_tolerance is None:
            object.__setattr__(self, "horizon_tolerance", DEFAULT_HORIZON_TOL)
        for name in _OPTIONAL_PARAMS:
            present = getattr(self, name) is not None
            if name in required and not present:
                raise ValueError(f"{self.algorithm} requires parameter '{name}'")
            if name not in required and present:
                raise ValueError(f"{self.algorithm} does not take parameter '{name}'")
        if self.lam is not None and not 0.0 <= self.lam < 1.0:
            raise ValueError(f"lambda must lie in [0, 1), got {self.lam}")
        if self.epsilon is not None and not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.p is not None and not 0.0 < self.p < 1.0:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        if self.horizon_tolerance is not None and self.horizon_tolerance <= 0:
            raise ValueError("horizon_tolerance must be positive")
        if isinstance(self.base_policy, str) and self.base_policy != "uniform":
            raise ValueError(f"unknown base policy '{self.base_policy}'")

    @property
    def kind(self) -> str:
        if self.algorithm in EVALUATION:
            return "state"
        if self.algorithm == "DoubleQLearning":
            return "pair"
        return "action"

    def policy_for(self, mdp: FiniteMdp) -> Policy:
        if self.base_policy is None:
            raise ValueError(f"{self.algorithm} has no base policy")
        if isinstance(self.base_policy, str):
            return Policy.uniform(mdp.n_states, mdp.n_actions)
        if self.base_policy.probs.shape != (mdp.n_states, mdp.n_actions):
            raise MdpError("base policy shape does not match the MDP")
        return self.base_policy

    def horizon(self, mdp: FiniteMdp) -> int:
        return truncation_horizon(mdp.gamma, mdp.rmax, self.horizon_tolerance or DEFAULT_HORIZON_TOL)

    def point_shape(self, mdp: FiniteMdp) -> tuple[int, ...]:
        return {
            "state": (mdp.n_states,),
            "action": (mdp.n_states, mdp.n_actions),
            "pair": (2, mdp.n_states, mdp.n_actions),
        }[self.kind]

    def to_dict(self) -> dict:
        doc = {"algorithm": self.algorithm, "alpha": self.alpha}
        for name in _OPTIONAL_PARAMS:
            value = getattr(self, name)
            if value is None:
                continue
            if isinstance(value, Policy):
                value = list(value.actions) if value.is_deterministic else value.probs.tolist()
            doc["lambda" if name == "lam" else name] = value
        return doc

    @classmethod
    def from_dict(cls, doc: dict, n_actions: int | None = None) -> AlgorithmSpec:
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        unknown = set(doc) - {"algorithm", "alpha", *_OPTIONAL_PARAMS}
        if unknown:
            raise ValueError(f"unknown algorithm fields {sorted(unknown)}")
        policy = doc.get("base_policy")
        if isinstance(policy, list):
            if policy and isinstance(policy[0], list):
                doc["base_policy"] = Policy.stochastic(policy)
            else:
                if n_actions is None:
                    raise ValueError("deterministic base policy needs the MDP's action count")
                doc["base_policy"] = Policy.deterministic(policy, n_actions)
        return cls(**doc)


def truncation_horizon(gamma: float, rmax: float, tol: float) -> int:
    """Smallest ``H`` with ``gamma**H * rmax / (1 - gamma) < tol``."""
    if gamma == 0.0 or rmax <= 0.0:
        return 1
    h = max(1, math.ceil(math.log(tol * (1.0 - gamma) / rmax) / math.log(gamma)))
    while gamma**h * rmax / (1.0 - gamma) >= tol:
        h += 1
    return h


# ---------------------------------------------------------------- sampling


def _categorical(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling along the last axis of ``cdf``; zero-mass atoms are never hit."""
    return (cdf[..., :-1] <= u[..., None]).sum(axis=-1)


def _sample_reward(mdp: FiniteMdp, s, a, u) -> np.ndarray:
    values, cum = mdp.reward_tables
    k = _categorical(cum[s, a], u)
    return values[s, a, k]


def _rollout(
    mdp: FiniteMdp,
    keys: np.ndarray,
    start: np.ndarray,
    horizon: int,
    reward_w: np.ndarray,
    state_w: np.ndarray | None = None,
    values: np.ndarray | None = None,
    policy: Policy | None = None,
    actions: np.ndarray | None = None,
    first_action: np.ndarray | None = None,
) -> np.ndarray:
    """Sample one trajectory per key and return the weighted functional.

    ``keys`` has shape ``(N, M)``; ``start`` and ``first_action`` broadcast to
    it. Actions come from a shared ``policy`` or from per-particle
    deterministic ``actions`` of shape ``(N, S)``. ``values`` holds state
    values ``(K, N, S)`` read by ``state_w``; all K tables see the same
    trajectory. Returns ``(K, N, M)``.
    """
    n, m = keys.shape
    S = mdp.n_states
    if values is None:
        values = np.zeros((1, n, S))
    if state_w is None:
        state_w = np.zeros(horizon + 1)
    if first_action is None:
        first = np.full((n, m), -1, dtype=np.int64)
    else:
        first = np.ascontiguousarray(np.broadcast_to(first_action, (n, m)), dtype=np.int64)
    if policy is None:
        policy_cdf = np.ones((S, 1))
        random_actions = False
    else:
        policy_cdf = np.cumsum(policy.probs, axis=1)
        random_actions = not policy.is_deterministic
    acts = np.zeros((0, S), dtype=np.int64) if actions is None else np.ascontiguousarray(actions, dtype=np.int64)
    reward_values, reward_cum = mdp.reward_tables
    return _kernels.rollout(
        np.ascontiguousarray(keys, dtype=np.uint64),
        np.ascontiguousarray(np.broadcast_to(start, (n, m)), dtype=np.int64),
        first,
        int(horizon),
        np.asarray(reward_w, dtype=float),
        np.asarray(state_w, dtype=float),
        np.ascontiguousarray(values, dtype=float),
        policy_cdf,
        random_actions,
        acts,
        reward_values,
        reward_cum,
        mdp.transition_cdf,
    )


def _trajectory_weights(spec: AlgorithmSpec, mdp: FiniteMdp) -> tuple[int, np.ndarray, np.ndarray]:
    """Horizon, reward weights ``(H,)`` and state weights ``(H+1,)`` of an evaluation target."""
    g = mdp.gamma
    if spec.algorithm == "TD0":
        return 1, np.array([1.0]), np.array([0.0, g])
    h = spec.horizon(mdp)
    t = np.arange(h)
    if spec.algorithm == "MC":
        return h, g**t, np.zeros(h + 1)
    lam = spec.lam
    n = np.arange(1, h + 1)
    w = (1.0 - lam) * lam ** (n - 1)
    w[-1] = lam ** (h - 1)
    state_w = np.concatenate([[0.0], w * g**n])
    return h, (g * lam) ** t, state_w


def batch_targets(
    spec: AlgorithmSpec, mdp: FiniteMdp, sides: list[np.ndarray], keys: np.ndarray
) -> list[np.ndarray]:
    """Targets for batches of points under shared per-slot ``keys``.

    Each entry of ``sides`` is an ``(N, *point_shape)`` array; all of them see
    the same random draws, which is exactly the identical-samples coupling.
    """
    S, A, g = mdp.n_states, mdp.n_actions, mdp.gamma
    n = keys.shape[0]
    if spec.kind == "state":
        h, reward_w, state_w = _trajectory_weights(spec, mdp)
        out = _rollout(
            mdp, keys[:, :S], np.arange(S), h, reward_w, state_w, np.stack(sides), policy=spec.policy_for(mdp)
        )
        return list(out)

    s_idx = np.repeat(np.arange(S), A)
    a_idx = np.tile(np.arange(A), S)
    k = keys[:, : S * A]
    r = _sample_reward(mdp, s_idx, a_idx, uniform_from_keys(k, _DRAW_REWARD))
    nxt = _categorical(mdp.transition_cdf[s_idx, a_idx], uniform_from_keys(k, _DRAW_NEXT))
    rows = np.arange(n)[:, None]

    if spec.algorithm == "DoubleQLearning":
        pick_a = uniform_from_keys(keys[:, S * A], 0) < spec.p
        results = []
        for F in sides:
            sel = np.where(pick_a[:, None, None], F[:, 0], F[:, 1])
            other = np.where(pick_a[:, None, None], F[:, 1], F[:, 0])
            best = np.argmax(sel[rows, nxt], axis=-1)
            new = (r + g * other[rows, nxt, best]).reshape(n, S, A)
            out = F.copy()
            out[pick_a, 0] = new[pick_a]
            out[~pick_a, 1] = new[~pick_a]
            results.append(out)
        return results

    if spec.algorithm == "Sarsa":
        base = spec.policy_for(mdp)
        explore = uniform_from_keys(k, _DRAW_COIN) < spec.epsilon
        a_next = _categorical(np.cumsum(base.probs, axis=1)[nxt], uniform_from_keys(k, _DRAW_EXPLORE))
    results = []
    for F in sides:
        q_next = F[rows, nxt]  # (n, S*A, A)
        greedy_val = q_next.max(axis=-1)
        if spec.algorithm == "QLearning":
            cont = greedy_val
        elif spec.algorithm == "Sarsa":
            explored = np.take_along_axis(q_next, a_next[..., None], axis=-1)[..., 0]
            cont = np.where(explore, explored, greedy_val)
        else:
            eps = spec.epsilon
            base = spec.policy_for(mdp)
            cont = (1.0 - eps) * greedy_val + eps * (base.probs[nxt] * q_next).sum(axis=-1)
        results.append((r + g * cont).reshape(n, S, A))
    return results


def _as_array(spec: AlgorithmSpec, mdp: FiniteMdp, f) -> np.ndarray:
    if isinstance(f, ExtendedPoint):
        f = np.stack([f.qa, f.qb])
    f = np.asarray(f, dtype=float)
    shape = spec.point_shape(mdp)
    if f.shape != shape:
        raise MdpError(f"{spec.algorithm} acts on points of shape {shape}, got {f.shape}")
    if not np.isfinite(f).all():
        raise MdpError("point has non-finite entries")
    return f


def n_slots(spec: AlgorithmSpec, mdp: FiniteMdp) -> int:
    """Number of keyed sub-streams one point consumes per step."""
    d = int(np.prod(spec.point_shape(mdp)))
    return d // 2 + 1 if spec.kind == "pair" else d


def apply_empirical_operator(spec: AlgorithmSpec, mdp: FiniteMdp, f, rng: RngStream):
    """One draw of the sampled target, fresh independent samples at every coordinate."""
    if spec.algorithm == "OPI":
        raise ValueError("OPI targets depend on the greedy policy; use valuechain.opi.opi_step")
    arr = _as_array(spec, mdp, f)
    keys = rng.keys(np.arange(n_slots(spec, mdp)))[None, :]
    out = batch_targets(spec, mdp, [arr[None]], keys)[0][0]
    if spec.kind == "pair":
        return ExtendedPoint(out[0], out[1])
    return out


def blend(f, target, alpha: float):
    """``f + alpha (target - f)``, returning the target itself at ``alpha = 1``
    so that a full step carries no rounding residue of ``f``."""
    if alpha == 1.0:
        return np.array(target, dtype=float)
    return f + alpha * (target - f)


def synchronous_update(f, target, alpha: float):
    """``(1 - alpha) f + alpha target``, written so that ``target == f`` leaves ``f`` bit-exact."""
    if isinstance(f, ExtendedPoint):
        if not isinstance(target, ExtendedPoint):
            raise MdpError("target must be an ExtendedPoint")
        return ExtendedPoint(
            synchronous_update(f.qa, target.qa, alpha), synchronous_update(f.qb, target.qb, alpha)
        )
    f = np.asarray(f, dtype=float)
    target = np.asarray(target, dtype=float)
    if f.shape != target.shape:
        raise MdpError(f"shape mismatch {f.shape} vs {target.shape}")
    return blend(f, target, alpha)


def sample_return(mdp: FiniteMdp, policy: Policy, s: int, a: int, H: int, rng: RngStream) -> float:
    """Discounted return of one ``H``-step trajectory taking ``a`` in ``s``, then ``policy``."""
    if H < 1:
        raise ValueError("horizon must be at least 1")
    keys = rng.keys(np.array([0]))[None, :]
    out = _rollout(
        mdp, keys, np.array([s]), H, mdp.gamma ** np.arange(H), policy=policy, first_action=np.array([a])
    )
    return float(out[0, 0, 0])


# ---------------------------------------------------------------- exact oracles


def _expect_next(P: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``E[x(s') | s, a]`` for ``x`` of shape ``(..., S)``; returns ``(..., S, A)``."""
    return np.tensordot(x, P, axes=([-1], [2]))


def _functional_moments(
    mdp: FiniteMdp,
    policy: Policy,
    horizon: int,
    reward_w: np.ndarray,
    state_w: np.ndarray,
    f: np.ndarray | None,
    first_action: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact first and second moments of the trajectory functional.

    ``f`` may carry leading batch axes. Returns per-state arrays ``(..., S)``,
    or per state-action ``(..., S, A)`` when the first action is fixed.
    """
    S = mdp.n_states
    f = np.zeros(S) if f is None else f
    m1 = np.zeros_like(f)
    m2 = np.zeros_like(f)
    r1, r2, P = mdp.mean_rewards, mdp.reward_second_moments, mdp.transitions
    for t in range(horizon - 1, -1, -1):
        sw, c = state_w[t + 1], reward_w[t]
        eg = sw * f + m1
        eg2 = sw**2 * f**2 + 2 * sw * f * m1 + m2
        pg = _expect_next(P, eg)
        x1 = c * r1 + pg
        x2 = c**2 * r2 + 2 * c * r1 * pg + _expect_next(P, eg2)
        if t == 0 and first_action:
            return x1, x2
        m1 = (policy.probs * x1).sum(axis=-1)
        m2 = (policy.probs * x2).sum(axis=-1)
    return m1, m2


def _one_step_moments(mdp: FiniteMdp, spec: AlgorithmSpec, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact moments of ``r + gamma * Y(s')`` for the one-step action-value targets.

    ``q`` is ``(..., S, A)``.
    """
    g = mdp.gamma
    greedy_val = q.max(axis=-1)
    if spec.algorithm == "QLearning":
        ey, ey2 = greedy_val, greedy_val**2
    else:
        base = spec.policy_for(mdp).probs
        eps = spec.epsilon
        if spec.algorithm == "Sarsa":
            ey = (1 - eps) * greedy_val + eps * (base * q).sum(axis=-1)
            ey2 = (1 - eps) * greedy_val**2 + eps * (base * q**2).sum(axis=-1)
        else:
            greedy = np.zeros_like(q)
            np.put_along_axis(greedy, np.argmax(q, axis=-1)[..., None], 1.0, axis=-1)
            ey = (((1 - eps) * greedy + eps * base) * q).sum(axis=-1)
            ey2 = ey**2
    P = mdp.transitions
    r1, r2 = mdp.mean_rewards, mdp.reward_second_moments
    pe = _expect_next(P, ey)
    x1 = r1 + g * pe
    x2 = r2 + 2 * g * r1 * pe + g**2 * _expect_next(P, ey2)
    return x1, x2


def _target_moments(spec: AlgorithmSpec, mdp: FiniteMdp, f, batched: bool = False) -> tuple[np.ndarray, np.ndarray]:
    if spec.algorithm in ("DoubleQLearning", "OPI"):
        raise ValueError(f"no exact target oracle for {spec.algorithm}")
    if batched:
        f = np.asarray(f, dtype=float)
        if f.shape[1:] != spec.point_shape(mdp):
            raise MdpError(f"{spec.algorithm} acts on points of shape {spec.point_shape(mdp)}, got {f.shape[1:]}")
    else:
        f = _as_array(spec, mdp, f)
    if spec.kind == "state":
        h, reward_w, state_w = _trajectory_weights(spec, mdp)
        return _functional_moments(mdp, spec.policy_for(mdp), h, reward_w, state_w, f)
    return _one_step_moments(mdp, spec, f)


def expected_target(spec: AlgorithmSpec, mdp: FiniteMdp, f) -> np.ndarray:
    """``E[target(f)]`` computed exactly from the MDP tables."""
    return _target_moments(spec, mdp, f)[0]


def noise_covariance(spec: AlgorithmSpec, mdp: FiniteMdp, f) -> np.ndarray:
    """Exact covariance of ``target(f) - E[target(f)]``.

    Diagonal, because every coordinate draws its own independent samples.
    """
    m1, m2 = _target_moments(spec, mdp, f)
    var = np.maximum(m2 - m1**2, 0.0).ravel()
    return np.diag(var)


def noise_variances(spec: AlgorithmSpec, mdp: FiniteMdp, F: np.ndarray) -> np.ndarray:
    """Diagonals of :func:`noise_covariance` for a batch ``(N, *shape)``; returns ``(N, d)``."""
    m1, m2 = _target_moments(spec, mdp, F, batched=True)
    return np.maximum(m2 - m1**2, 0.0).reshape(len(m1), -1)


def contraction_factor(spec: AlgorithmSpec, gamma: float) -> float:
    """Wasserstein Lipschitz constant of one kernel step."""
    a, alg = spec.alpha, spec.algorithm
    if alg == "MC":
        return 1.0 - a
    if alg == "TD0":
        return 1.0 - a + a * gamma
    if alg == "TDLambda":
        lam = spec.lam
        return 1.0 - a + a * gamma * (1.0 - lam) / (1.0 - lam * gamma)
    if alg in CONTROL:
        return 1.0 - a + a * gamma
    if alg == "DoubleQLearning":
        return 0.5 * (2.0 - a + a * gamma)
    raise ValueError(f"{alg} has no contraction factor")


def effective_affine_map(
    spec: AlgorithmSpec, mdp: FiniteMdp, policy: Policy | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """``(A, b)`` with ``expected_target(f) == b + A f`` for evaluation algorithms."""
    if spec.algorithm not in EVALUATION:
        raise ValueError(f"{spec.algorithm} does not have an affine expected target")
    policy = policy or spec.policy_for(mdp)
    P = policy_transition_matrix(mdp, policy)
    r = policy_reward(mdp, policy)
    h, reward_w, state_w = _trajectory_weights(spec, mdp)
    S = mdp.n_states
    A = np.zeros((S, S))
    b = np.zeros(S)
    Pt = np.eye(S)
    for t in range(h):
        b += reward_w[t] * (Pt @ r)
        Pt = Pt @ P
        A += state_w[t + 1] * Pt
    return A, b

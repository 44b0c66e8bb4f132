"""Optimistic policy iteration and the Markov chain it induces on policies.

At ``alpha = 1`` the next greedy policy depends only on the current one, so
OPI is a finite Markov chain on deterministic policies with kernel
``K(pi, pi')`` = probability that ``pi'`` is greedy for one table of
sampled returns of ``pi``.

Policies only differ where they matter: at null states (absorbing, zero
reward under every action) every action is equivalent and the policy is
pinned to action 0, which is also what greedy extraction picks there.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .mdp import FiniteMdp, MdpError, Policy, exact_policy_values, greedy_policy, policy_iteration
from .operators import _rollout, blend
from .rng import RngStream

MAX_POLICIES = 100_000
MAX_ATOMS = 1_000_000
SE_MULTIPLIER = 4.0


class PolicyIndex:
    """Lexicographic enumeration of the deterministic policies of an MDP."""

    def __init__(self, mdp: FiniteMdp):
        self.mdp = mdp
        self.free = np.flatnonzero(~mdp.null_states)
        count = mdp.n_actions ** len(self.free)
        if count > MAX_POLICIES:
            raise MdpError(f"{count} deterministic policies exceed the enumeration limit {MAX_POLICIES}")
        self.size = count
        self._radix = mdp.n_actions ** np.arange(len(self.free) - 1, -1, -1)

    def actions(self, index: int) -> tuple[int, ...]:
        acts = np.zeros(self.mdp.n_states, dtype=np.int64)
        acts[self.free] = (index // self._radix) % self.mdp.n_actions
        return tuple(int(a) for a in acts)

    def policy(self, index: int) -> Policy:
        return Policy.deterministic(self.actions(index), self.mdp.n_actions)

    def index_of(self, actions) -> np.ndarray | int:
        """Index of action tuples ``(..., S)``; actions at null states are ignored."""
        acts = np.asarray(actions)
        idx = (acts[..., self.free] * self._radix).sum(axis=-1)
        return int(idx) if np.ndim(idx) == 0 else idx

    def __len__(self) -> int:
        return self.size


def enumerate_policies(mdp: FiniteMdp) -> list[Policy]:
    """All deterministic policies, lexicographic in their action tuples."""
    index = PolicyIndex(mdp)
    return [index.policy(i) for i in range(len(index))]


def _return_weights(mdp: FiniteMdp, horizon: int) -> np.ndarray:
    return mdp.gamma ** np.arange(horizon)


def _sa_slots(mdp: FiniteMdp) -> tuple[np.ndarray, np.ndarray]:
    S, A = mdp.n_states, mdp.n_actions
    return np.repeat(np.arange(S), A), np.tile(np.arange(A), S)


def _sample_return_tables(mdp: FiniteMdp, actions: np.ndarray, horizon: int, keys: np.ndarray) -> np.ndarray:
    """One sampled return per (particle, s, a), following per-particle ``actions`` ``(N, S)``
    after the fixed first action. Returns ``(N, S, A)``.
    """
    s_idx, a_idx = _sa_slots(mdp)
    n = keys.shape[0]
    out = _rollout(
        mdp,
        keys,
        s_idx[None, :],
        horizon,
        _return_weights(mdp, horizon),
        actions=actions,
        first_action=a_idx[None, :],
    )
    return out[0].reshape(n, mdp.n_states, mdp.n_actions)


def opi_step(q, mdp: FiniteMdp, alpha: float, horizon: int, rng: RngStream) -> tuple[np.ndarray, Policy]:
    """One OPI update of the table ``q``; returns ``(q', greedy(q'))``."""
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise MdpError(f"OPI acts on (S, A) tables, got shape {q.shape}")
    pi = greedy_policy(q)
    keys = rng.keys(np.arange(mdp.n_states * mdp.n_actions))[None, :]
    returns = _sample_return_tables(mdp, np.array(pi.actions)[None, :], horizon, keys)[0]
    q_new = blend(q, returns, alpha)
    return q_new, greedy_policy(q_new)


@dataclass(frozen=True)
class PolicyKernel:
    """Row-stochastic kernel on the enumerated policies.

    ``provenance`` is ``{"method": "monte-carlo", "M": .., "H": ..}`` or
    ``{"method": "exact-enumeration", "H": ..}``; ``se`` is only set for
    Monte Carlo kernels.
    """

    policies: list[tuple[int, ...]]
    K: np.ndarray
    provenance: dict
    se: np.ndarray | None = None

    @property
    def exact(self) -> bool:
        return self.provenance["method"] == "exact-enumeration"

    def positive(self, i: int, j: int, k: float = SE_MULTIPLIER) -> bool:
        """``K[i, j] > 0``, or more than ``k`` standard errors above 0 for sampled kernels."""
        if self.se is None:
            return bool(self.K[i, j] > 0.0)
        return bool(self.K[i, j] > k * self.se[i, j])

    def export_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["policy", "actions"] + [f"to_{j}" for j in range(len(self.policies))])
            for i, acts in enumerate(self.policies):
                w.writerow([i, " ".join(map(str, acts))] + [repr(float(x)) for x in self.K[i]])
        return path


def estimate_policy_kernel(mdp: FiniteMdp, M: int, horizon: int, seed: int) -> PolicyKernel:
    """Monte Carlo kernel from ``M`` sampled return tables per policy."""
    if M < 1:
        raise ValueError("M must be at least 1")
    index = PolicyIndex(mdp)
    n = len(index)
    K = np.zeros((n, n))
    slots = np.arange(mdp.n_states * mdp.n_actions)
    stream = RngStream(seed)
    for i in range(n):
        acts = np.broadcast_to(np.array(index.actions(i)), (M, mdp.n_states))
        keys = stream.child(i).keys(np.arange(M)[:, None], slots[None, :])
        tables = _sample_return_tables(mdp, acts, horizon, keys)
        nxt = index.index_of(np.argmax(tables, axis=-1))
        K[i] = np.bincount(nxt, minlength=n) / M
    se = np.sqrt(K * (1.0 - K) / M)
    policies = [index.actions(i) for i in range(n)]
    return PolicyKernel(policies, K, {"method": "monte-carlo", "M": int(M), "H": int(horizon)}, se)


def return_distribution(mdp: FiniteMdp, actions, s: int, a: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact law of the return from ``(s, a)`` then ``actions``, as sorted atoms and probabilities.

    Every trajectory must reach a null state within ``horizon`` steps.
    """
    null = mdp.null_states
    live: dict[tuple[int, float], float] = {(s, 0.0): 1.0}
    done: dict[float, float] = {}
    disc = 1.0
    for t in range(horizon):
        nxt: dict[tuple[int, float], float] = {}
        for (state, ret), p in live.items():
            if null[state]:
                done[ret] = done.get(ret, 0.0) + p
                continue
            act = a if t == 0 else actions[state]
            for v, pv in mdp.rewards[state][act].atoms:
                if pv <= 0.0:
                    continue
                r = ret + disc * v
                for s2 in np.flatnonzero(mdp.transitions[state, act] > 0):
                    key = (int(s2), r)
                    nxt[key] = nxt.get(key, 0.0) + p * pv * mdp.transitions[state, act, s2]
        live = nxt
        if len(live) > MAX_ATOMS:
            raise MdpError(f"return enumeration exceeds {MAX_ATOMS} atoms")
        disc *= mdp.gamma
        if not live:
            break
    for (state, ret), p in live.items():
        if not null[state]:
            raise MdpError(f"trajectories from ({s},{a}) do not reach an absorbing zero-reward state within H={horizon}")
        done[ret] = done.get(ret, 0.0) + p
    atoms = np.array(sorted(done))
    return atoms, np.array([done[x] for x in atoms])


def _greedy_probabilities(dists: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """P(action b is the lowest-index argmax) for independent returns per action."""
    A = len(dists)
    out = np.zeros(A)
    for b, (xb, pb) in enumerate(dists):
        total = pb.copy()
        for a, (xa, pa) in enumerate(dists):
            if a == b:
                continue
            cdf = np.concatenate([[0.0], np.cumsum(pa)])
            side = "left" if a < b else "right"  # lower indices must lose strictly
            total = total * cdf[np.searchsorted(xa, xb, side=side)]
        out[b] = total.sum()
    return out


def exact_policy_kernel(mdp: FiniteMdp, horizon: int) -> PolicyKernel:
    """Kernel from exact return laws; returns at different states are independent,
    so each row is a product of per-state greedy probabilities.
    """
    index = PolicyIndex(mdp)
    n = len(index)
    K = np.ones((n, n))
    targets = [index.actions(j) for j in range(n)]
    if mdp.n_actions == 1:
        return PolicyKernel(targets, K, {"method": "exact-enumeration", "H": int(horizon)})
    for i in range(n):
        acts = index.actions(i)
        for s in index.free:
            dists = [return_distribution(mdp, acts, s, a, horizon) for a in range(mdp.n_actions)]
            probs = _greedy_probabilities(dists)
            K[i] *= np.array([probs[t[s]] for t in targets])
    return PolicyKernel(targets, K, {"method": "exact-enumeration", "H": int(horizon)})


def optimal_policy_index(mdp: FiniteMdp, index: PolicyIndex | None = None) -> int:
    """Policy iteration from the first enumerated policy."""
    index = index or PolicyIndex(mdp)
    return index.index_of(policy_iteration(mdp, index.policy(0))[-1][0].actions)


@dataclass(frozen=True)
class ImprovementReport:
    targets: list[int]
    probabilities: list[float]
    passed: list[bool]

    @property
    def all_passed(self) -> bool:
        return all(self.passed)


def check_probabilistic_improvement(kernel: PolicyKernel, mdp: FiniteMdp) -> ImprovementReport:
    """Does each policy move to its classical improvement with positive probability?"""
    index = PolicyIndex(mdp)
    targets, probs, passed = [], [], []
    for i in range(len(index)):
        _, q = exact_policy_values(mdp, index.policy(i))
        j = index.index_of(greedy_policy(q).actions)
        targets.append(j)
        probs.append(float(kernel.K[i, j]))
        passed.append(kernel.positive(i, j))
    return ImprovementReport(targets, probs, passed)


@dataclass(frozen=True)
class ReachabilityReport:
    paths: list[list[int]]
    link_probabilities: list[list[float]]
    passed: list[bool]

    @property
    def path_lengths(self) -> list[int]:
        return [len(p) - 1 for p in self.paths]

    @property
    def all_passed(self) -> bool:
        return all(self.passed)


def check_reachability(kernel: PolicyKernel, mdp: FiniteMdp) -> ReachabilityReport:
    """Follow classical policy iteration from every policy and check each link has positive mass."""
    index = PolicyIndex(mdp)
    paths, links, passed = [], [], []
    for i in range(len(index)):
        path = [index.index_of(pi.actions) for pi, _ in policy_iteration(mdp, index.policy(i))]
        paths.append(path)
        links.append([float(kernel.K[u, v]) for u, v in zip(path, path[1:])])
        passed.append(all(kernel.positive(u, v) for u, v in zip(path, path[1:])))
    return ReachabilityReport(paths, links, passed)


@dataclass(frozen=True)
class PolicyChainReport:
    phi1: np.ndarray
    classes: list[dict] = field(default_factory=list)
    star: int = 0
    aperiodic_star: bool = False
    identity_residual: float = 0.0

    def to_dict(self) -> dict:
        return {
            "phi1": self.phi1.tolist(),
            "classes": self.classes,
            "star": self.star,
            "aperiodic_star": self.aperiodic_star,
            "identity_residual": self.identity_residual,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def communicating_classes(K: np.ndarray) -> list[dict]:
    """Strongly connected components of the positive-entry graph, with a recurrence flag."""
    n_comp, labels = connected_components(K > 0, directed=True, connection="strong")
    classes = []
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        leaks = K[np.ix_(members, np.flatnonzero(labels != c))]
        classes.append({"members": members.tolist(), "recurrent": bool(not (leaks > 0).any())})
    classes.sort(key=lambda c: c["members"][0])
    return classes


def policy_chain_stationary(kernel: PolicyKernel, mdp: FiniteMdp) -> PolicyChainReport:
    """Stationary law on the recurrent class of the optimal policy."""
    K = kernel.K
    star = optimal_policy_index(mdp)
    classes = communicating_classes(K)
    home = next(c for c in classes if star in c["members"])
    if not home["recurrent"]:
        raise MdpError("the optimal policy is not in a recurrent class; kernel estimate looks wrong")
    members = np.array(home["members"])
    sub = K[np.ix_(members, members)]
    m = len(members)
    system = np.vstack([(sub - np.eye(m)).T, np.ones((1, m))])
    rhs = np.zeros(m + 1)
    rhs[-1] = 1.0
    phi_c = np.linalg.lstsq(system, rhs, rcond=None)[0]
    phi = np.zeros(K.shape[0])
    phi[members] = np.clip(phi_c, 0.0, None)
    phi /= phi.sum()
    inflow = sum(phi[i] * K[i, star] for i in range(len(phi)) if i != star)
    residual = abs(phi[star] * (1.0 - K[star, star]) - inflow)
    return PolicyChainReport(phi, classes, star, bool(K[star, star] > 0), float(residual))


@dataclass(frozen=True)
class OpiRun:
    """``frequencies[t, j]`` is the share of chains whose greedy policy after step ``t`` is ``j``."""

    frequencies: np.ndarray
    final_q: np.ndarray
    policies: list[tuple[int, ...]]

    def final_se(self) -> np.ndarray:
        n = self.final_q.shape[0]
        p = self.frequencies[-1]
        return np.sqrt(p * (1.0 - p) / n)


def simulate_opi(mdp: FiniteMdp, alpha: float, n_steps: int, N: int, horizon: int, seed: int, q0=None) -> OpiRun:
    """Run ``N`` independent OPI chains from ``q0`` (zeros by default)."""
    if n_steps < 1 or N < 1:
        raise ValueError("n_steps and N must be positive")
    index = PolicyIndex(mdp)
    S, A = mdp.n_states, mdp.n_actions
    q = np.zeros((N, S, A)) if q0 is None else np.broadcast_to(np.asarray(q0, dtype=float), (N, S, A)).copy()
    slots = np.arange(S * A)[None, :]
    ids = np.arange(N)[:, None]
    stream = RngStream(seed)
    freqs = np.zeros((n_steps, len(index)))
    for t in range(n_steps):
        acts = np.argmax(q, axis=-1)
        returns = _sample_return_tables(mdp, acts, horizon, stream.child(t).keys(ids, slots))
        q = blend(q, returns, alpha)
        freqs[t] = np.bincount(index.index_of(np.argmax(q, axis=-1)), minlength=len(index)) / N
    return OpiRun(freqs, q, [index.actions(j) for j in range(len(index))])


def stationary_frequency_check(run: OpiRun, phi1: np.ndarray, k: float = SE_MULTIPLIER) -> tuple[bool, float]:
    """Final-step policy frequencies against ``phi1``; returns (pass, max |gap| / SE)."""
    gap = np.abs(run.frequencies[-1] - phi1)
    se = np.sqrt(np.maximum(phi1 * (1.0 - phi1), 0.0) / run.final_q.shape[0])
    ok = bool(np.all(gap <= k * se + 1e-12))
    z = float(np.max(np.where(se > 0, gap / np.where(se > 0, se, 1.0), np.where(gap > 1e-12, math.inf, 0.0))))
    return ok, z

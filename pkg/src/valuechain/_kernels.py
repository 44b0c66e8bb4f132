"""Compiled trajectory sampler.

Uses the same key-absorption hash as :mod:`valuechain.rng`, so a draw here
equals ``uniform_from_keys(key, draw)``.
"""

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


@nb.njit(cache=True, inline="always")
def _draw(key, d):
    x = key + np.uint64(d + 1) * _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    x = x ^ (x >> np.uint64(31))
    return np.float64(x >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@nb.njit(cache=True, inline="always")
def _pick(cdf, row, u):
    """Inverse-CDF index along the last axis of ``cdf`` at leading index ``row``."""
    k = 0
    for j in range(cdf.shape[-1] - 1):
        k += cdf[row + (j,)] <= u
    return k


@nb.njit(cache=True)
def rollout(
    keys,
    start,
    first_action,
    horizon,
    reward_w,
    state_w,
    values,
    policy_cdf,
    random_actions,
    actions,
    reward_values,
    reward_cum,
    trans_cdf,
):
    """Weighted trajectory functionals for every (particle, slot).

    ``values`` is ``(K, N, S)``: K value tables per particle read along the
    same trajectory (K >= 1). Returns ``(K, N, M)``.
    """
    n, m = keys.shape
    n_sides = values.shape[0]
    use_actions = actions.shape[0] > 0
    out = np.zeros((n_sides, n, m))
    acc = np.zeros(n_sides)
    for i in range(n):
        for j in range(m):
            key = keys[i, j]
            s = start[i, j]
            acc[:] = 0.0
            ret = 0.0
            for t in range(horizon):
                if t == 0 and first_action[i, j] >= 0:
                    a = first_action[i, j]
                elif use_actions:
                    a = actions[i, s]
                elif random_actions:
                    a = _pick(policy_cdf, (s,), _draw(key, 3 * t))
                else:
                    a = _pick(policy_cdf, (s,), 0.0)
                c = reward_w[t]
                if c != 0.0:
                    ret += c * reward_values[s, a, _pick(reward_cum, (s, a), _draw(key, 3 * t + 1))]
                s = _pick(trans_cdf, (s, a), _draw(key, 3 * t + 2))
                w = state_w[t + 1]
                if w != 0.0:
                    for k in range(n_sides):
                        acc[k] += w * values[k, i, s]
            for k in range(n_sides):
                out[k, i, j] = ret + acc[k]
    return out

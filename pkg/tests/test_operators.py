import itertools

import numpy as np
import pytest

from valuechain.ensemble import init_ensemble, step_ensemble
from valuechain.library import m1, m2, m3, m4, m6, random_mdp
from valuechain.mdp import FiniteMdp, DiscreteDistribution, MdpError, Policy, bellman_optimality_backup, bellman_policy_backup
from valuechain.operators import (
    AlgorithmSpec,
    ExtendedPoint,
    _trajectory_weights,
    apply_empirical_operator,
    batch_targets,
    contraction_factor,
    effective_affine_map,
    expected_target,
    noise_covariance,
    sample_return,
    synchronous_update,
    truncation_horizon,
)
from valuechain.rng import RngStream, uniform_from_keys

UNIFORM = "uniform"


def evaluation_specs(alpha=0.5, tol=None):
    extra = {} if tol is None else {"horizon_tolerance": tol}
    return [
        AlgorithmSpec("TD0", alpha, base_policy=UNIFORM),
        AlgorithmSpec("MC", alpha, base_policy=UNIFORM, **extra),
        AlgorithmSpec("TDLambda", alpha, lam=0.5, base_policy=UNIFORM, **extra),
    ]


def control_specs(alpha=0.5):
    return [
        AlgorithmSpec("QLearning", alpha),
        AlgorithmSpec("Sarsa", alpha, epsilon=0.3, base_policy=UNIFORM),
        AlgorithmSpec("ExpectedSarsa", alpha, epsilon=0.3, base_policy=UNIFORM),
    ]


# ---------------------------------------------------------------- brute-force oracles


def _atoms(dist):
    return [(v, p) for v, p in dist.atoms if p > 0]


def enumerate_functional(mdp, policy, s, horizon, reward_w, state_w, f):
    """Exact (mean, variance) of the trajectory functional by listing every outcome."""
    S, A = mdp.n_states, mdp.n_actions
    outcomes = [(1.0, s, 0.0)]
    for t in range(horizon):
        nxt = []
        for prob, state, acc in outcomes:
            for a in range(A):
                pa = policy.probs[state, a]
                if pa == 0:
                    continue
                for r, pr in _atoms(mdp.rewards[state][a]):
                    for s2 in range(S):
                        ps = mdp.transitions[state, a, s2]
                        if ps == 0:
                            continue
                        nxt.append((prob * pa * pr * ps, s2, acc + reward_w[t] * r + state_w[t + 1] * f[s2]))
        outcomes = nxt
    p = np.array([o[0] for o in outcomes])
    x = np.array([o[2] for o in outcomes])
    mean = (p * x).sum()
    return mean, (p * (x - mean) ** 2).sum()


def enumerate_control(spec, mdp, q, s, a):
    """Exact (mean, variance) of a one-step action-value target at (s, a)."""
    g = mdp.gamma
    outcomes = []
    base = spec.policy_for(mdp).probs if spec.base_policy is not None else None
    for r, pr in _atoms(mdp.rewards[s][a]):
        for s2 in range(mdp.n_states):
            ps = mdp.transitions[s, a, s2]
            if ps == 0:
                continue
            greedy = q[s2].max()
            if spec.algorithm == "QLearning":
                outcomes.append((pr * ps, r + g * greedy))
            elif spec.algorithm == "Sarsa":
                eps = spec.epsilon
                outcomes.append((pr * ps * (1 - eps), r + g * greedy))
                for a2 in range(mdp.n_actions):
                    outcomes.append((pr * ps * eps * base[s2, a2], r + g * q[s2, a2]))
            else:
                pi = spec.epsilon * base[s2].copy()
                pi[np.argmax(q[s2])] += 1 - spec.epsilon
                outcomes.append((pr * ps, r + g * (pi * q[s2]).sum()))
    p = np.array([o[0] for o in outcomes])
    x = np.array([o[1] for o in outcomes])
    mean = (p * x).sum()
    return mean, (p * (x - mean) ** 2).sum()


def replay_rollout(mdp, key, s, policy, horizon, reward_w, state_w, f):
    """Pure-python trajectory from the documented draw layout."""
    values, cum = mdp.reward_tables
    pcdf = np.cumsum(policy.probs, axis=1)
    ret, acc = 0.0, 0.0
    keys = np.array([key], dtype=np.uint64)
    for t in range(horizon):
        u = uniform_from_keys(keys, 3 * t)[0]
        a = int((pcdf[s, :-1] <= u).sum())
        u = uniform_from_keys(keys, 3 * t + 1)[0]
        r = values[s, a, int((cum[s, a, :-1] <= u).sum())]
        if reward_w[t] != 0.0:
            ret += reward_w[t] * r
        u = uniform_from_keys(keys, 3 * t + 2)[0]
        s = int((mdp.transition_cdf[s, a, :-1] <= u).sum())
        if state_w[t + 1] != 0.0:
            acc += state_w[t + 1] * f[s]
    return ret + acc


# ---------------------------------------------------------------- examples


def test_truncation_horizon_examples():
    assert truncation_horizon(0.5, 1.0, 1e-6) == 21
    assert truncation_horizon(0.0, 1.0, 1e-6) == 1
    assert truncation_horizon(0.9, 1.0, 1e-4) == 110


@pytest.mark.parametrize("gamma,rmax,tol", [(0.5, 2.0, 1e-6), (0.9, 1.0, 1e-3), (0.99, 3.0, 1e-2), (0.3, 1.0, 0.5)])
def test_truncation_horizon_is_smallest(gamma, rmax, tol):
    h = truncation_horizon(gamma, rmax, tol)
    assert gamma**h * rmax / (1 - gamma) < tol
    assert h == 1 or gamma ** (h - 1) * rmax / (1 - gamma) >= tol


def test_sample_return_examples():
    assert sample_return(m1(), Policy.deterministic([0], 1), 0, 0, 21, RngStream(0)) == pytest.approx(2 * (1 - 2**-21), abs=1e-15)
    pi = Policy.deterministic([0, 0], 2)
    assert sample_return(m4(), pi, 0, 1, 30, RngStream(3)) == 0.0
    draws = [sample_return(m2(), Policy.deterministic([0], 1), 0, 0, 1, RngStream(k)) for k in range(2000)]
    assert set(draws) == {0.0, 2.0}
    assert abs(np.mean(draws) - 1.0) < 4 * np.sqrt(1 / 2000)


def test_apply_examples():
    td0 = AlgorithmSpec("TD0", 0.5, base_policy=UNIFORM)
    assert apply_empirical_operator(td0, m1(), [0.0], RngStream(1)) == pytest.approx([1.0])
    draws = np.array([apply_empirical_operator(td0, m2(), [4.0], RngStream(k))[0] for k in range(1000)])
    assert set(draws) == {2.0, 4.0}
    assert abs((draws == 2.0).mean() - 0.5) < 4 * np.sqrt(0.25 / 1000)
    ql = AlgorithmSpec("QLearning", 0.5)
    assert np.array_equal(apply_empirical_operator(ql, m4(), np.zeros((2, 2)), RngStream(2)), [[1.0, 0.0], [0.0, 0.0]])


def test_apply_rejects_wrong_kind():
    with pytest.raises(MdpError):
        apply_empirical_operator(AlgorithmSpec("QLearning", 0.5), m4(), np.zeros(2), RngStream(0))
    with pytest.raises(ValueError):
        apply_empirical_operator(AlgorithmSpec("OPI", 1.0), m4(), np.zeros((2, 2)), RngStream(0))


def test_synchronous_update_examples():
    assert synchronous_update([0.0], [1.0], 1.0) == pytest.approx([1.0])
    assert synchronous_update([4.0], [2.0], 0.5) == pytest.approx([3.0])
    for a in (0.1, 0.37, 1.0):
        assert synchronous_update([2.0], [2.0], a)[0] == 2.0
    with pytest.raises(MdpError):
        synchronous_update([1.0, 2.0], [1.0], 0.5)


def test_expected_target_examples():
    assert expected_target(AlgorithmSpec("TD0", 0.5, base_policy=UNIFORM), m1(), [0.0]) == pytest.approx([1.0])
    assert expected_target(AlgorithmSpec("QLearning", 0.5), m6(), np.array([[2.0, 2.0]])) == pytest.approx(np.array([[2.0, 2.0]]))
    mc = AlgorithmSpec("MC", 0.5, base_policy=UNIFORM, horizon_tolerance=2e-6)
    assert mc.horizon(m2()) == 21
    assert expected_target(mc, m2(), [123.0])[0] == pytest.approx(2 * (1 - 2**-21), abs=1e-15)


def test_noise_covariance_examples():
    td0 = AlgorithmSpec("TD0", 0.5, base_policy=UNIFORM)
    assert noise_covariance(td0, m1(), [5.0]) == pytest.approx(np.zeros((1, 1)))
    assert noise_covariance(td0, m2(), [-3.0]) == pytest.approx(np.ones((1, 1)))
    zero = DiscreteDistribution.dirac(0.0)
    mdp = FiniteMdp(2, 1, ((zero,), (zero,)), np.full((2, 1, 2), 0.5), 0.5, 1.0)
    assert noise_covariance(td0, mdp, [0.0, 2.0]) == pytest.approx(np.diag([0.25, 0.25]))
    mc = AlgorithmSpec("MC", 0.1, base_policy=UNIFORM)
    assert noise_covariance(mc, m2(), [0.0])[0, 0] == pytest.approx(4 / 3, abs=1e-6)


def test_contraction_factor_examples():
    assert contraction_factor(AlgorithmSpec("TD0", 0.1, base_policy=UNIFORM), 0.9) == pytest.approx(0.99)
    assert contraction_factor(AlgorithmSpec("TDLambda", 0.1, lam=0.0, base_policy=UNIFORM), 0.9) == pytest.approx(0.99)
    assert contraction_factor(AlgorithmSpec("TDLambda", 0.5, lam=0.5, base_policy=UNIFORM), 0.8) == pytest.approx(0.8333333333)
    assert contraction_factor(AlgorithmSpec("DoubleQLearning", 0.2, p=0.5), 0.5) == pytest.approx(0.95)
    with pytest.raises(ValueError):
        contraction_factor(AlgorithmSpec("OPI", 1.0), 0.5)


def test_affine_map_examples():
    A, b = effective_affine_map(AlgorithmSpec("TD0", 0.5, base_policy=UNIFORM), m1())
    assert A == pytest.approx(np.array([[0.5]])) and b == pytest.approx([1.0])
    A, b = effective_affine_map(AlgorithmSpec("MC", 0.5, base_policy=UNIFORM), m2())
    assert A == pytest.approx(np.array([[0.0]])) and b[0] == pytest.approx(2.0, abs=1e-6)
    A, _ = effective_affine_map(AlgorithmSpec("TDLambda", 0.5, lam=0.5, base_policy=UNIFORM, horizon_tolerance=1e-12), m1())
    assert A[0, 0] == pytest.approx(1 / 3, abs=1e-9)
    with pytest.raises(ValueError):
        effective_affine_map(AlgorithmSpec("QLearning", 0.5), m4())


def test_spec_parameter_validation():
    with pytest.raises(ValueError, match="requires"):
        AlgorithmSpec("TDLambda", 0.5, base_policy=UNIFORM)
    with pytest.raises(ValueError, match="does not take"):
        AlgorithmSpec("QLearning", 0.5, epsilon=0.1)
    with pytest.raises(ValueError):
        AlgorithmSpec("TD0", 0.0, base_policy=UNIFORM)
    with pytest.raises(ValueError):
        AlgorithmSpec("Nope", 0.5)
    spec = AlgorithmSpec("Sarsa", 0.3, epsilon=0.2, base_policy=Policy.deterministic([1, 0], 2))
    assert AlgorithmSpec.from_dict(spec.to_dict(), 2) == spec


# ---------------------------------------------------------------- oracle agreement


@pytest.mark.parametrize("spec", evaluation_specs(tol=0.2), ids=lambda s: s.algorithm)
def test_evaluation_moments_match_enumeration(spec, small_mdp):
    mdp = small_mdp
    h, reward_w, state_w = _trajectory_weights(spec, mdp)
    assert h <= 6
    f = np.array([0.3, 1.7, -0.4])
    mean = expected_target(spec, mdp, f)
    var = np.diag(noise_covariance(spec, mdp, f))
    for s in range(mdp.n_states):
        m, v = enumerate_functional(mdp, spec.policy_for(mdp), s, h, reward_w, state_w, f)
        assert mean[s] == pytest.approx(m, abs=1e-12)
        assert var[s] == pytest.approx(v, abs=1e-12)


@pytest.mark.parametrize("spec", control_specs(), ids=lambda s: s.algorithm)
def test_control_moments_match_enumeration(spec, small_mdp):
    mdp = small_mdp
    q = np.array([[0.2, 1.1], [0.9, -0.3], [0.5, 0.5]])
    mean = expected_target(spec, mdp, q)
    var = np.diag(noise_covariance(spec, mdp, q)).reshape(q.shape)
    for s, a in itertools.product(range(3), range(2)):
        m, v = enumerate_control(spec, mdp, q, s, a)
        assert mean[s, a] == pytest.approx(m, abs=1e-12)
        assert var[s, a] == pytest.approx(v, abs=1e-12)


def test_expected_target_matches_bellman_backups():
    mdp = random_mdp(6)
    rng = np.random.default_rng(0)
    v, q = rng.normal(size=5), rng.normal(size=(5, 3))
    td0 = AlgorithmSpec("TD0", 0.5, base_policy=UNIFORM)
    assert expected_target(td0, mdp, v) == pytest.approx(bellman_policy_backup(mdp, Policy.uniform(5, 3), v), abs=1e-12)
    assert expected_target(AlgorithmSpec("QLearning", 0.5), mdp, q) == pytest.approx(bellman_optimality_backup(mdp, q), abs=1e-12)


@pytest.mark.parametrize("spec", evaluation_specs(tol=1e-3), ids=lambda s: s.algorithm)
def test_compiled_rollout_matches_replay(spec):
    mdp = random_mdp(8, n_states=4, n_actions=3, gamma=0.7)
    h, reward_w, state_w = _trajectory_weights(spec, mdp)
    f = np.random.default_rng(1).normal(size=(6, 4))
    keys = RngStream(42).child(9).keys(np.arange(6)[:, None], np.arange(4)[None, :])
    got = batch_targets(spec, mdp, [f], keys)[0]
    for i, s in itertools.product(range(6), range(4)):
        ref = replay_rollout(mdp, keys[i, s], s, spec.policy_for(mdp), h, reward_w, state_w, f[i])
        assert got[i, s] == pytest.approx(ref, abs=1e-13)


def _batch_of_targets(spec, mdp, f, n, seed):
    e = init_ensemble(("point", f), n, spec, seed)
    return step_ensemble(e, mdp).particles if spec.alpha == 1.0 else None


@pytest.mark.parametrize(
    "spec",
    evaluation_specs(alpha=1.0) + control_specs(alpha=1.0),
    ids=lambda s: s.algorithm,
)
def test_sampled_targets_are_unbiased(spec):
    mdp = random_mdp(3, n_states=4, n_actions=2, gamma=0.7)
    f = np.random.default_rng(2).uniform(0, 3, size=spec.point_shape(mdp))
    n = 100_000
    targets = _batch_of_targets(spec, mdp, f, n, seed=17)
    se = targets.std(axis=0, ddof=1) / np.sqrt(n)
    gap = np.abs(targets.mean(axis=0) - expected_target(spec, mdp, f))
    assert np.all(gap <= 5 * se + 1e-12)
    var = np.diag(noise_covariance(spec, mdp, f)).reshape(f.shape)
    assert np.all(np.abs(targets.var(axis=0) - var) <= 0.05 * var + 1e-12)


def test_coordinates_draw_independent_samples():
    spec = AlgorithmSpec("TD0", 1.0, base_policy=UNIFORM)
    mdp = random_mdp(5, n_states=3, n_actions=2)
    targets = _batch_of_targets(spec, mdp, np.array([0.0, 5.0, 10.0]), 50_000, seed=3)
    corr = np.corrcoef(targets, rowvar=False)
    assert np.all(np.abs(corr[np.triu_indices(3, 1)]) < 0.03)


def test_deterministic_mdp_collapses_noise():
    mdp = m4()
    q = np.array([[0.5, 2.0], [1.0, 3.0]])
    for spec in (AlgorithmSpec("QLearning", 1.0), AlgorithmSpec("ExpectedSarsa", 1.0, epsilon=0.2, base_policy=UNIFORM)):
        assert np.array_equal(apply_empirical_operator(spec, mdp, q, RngStream(5)), expected_target(spec, mdp, q))
    det = Policy.deterministic([1, 0], 2)
    for spec in (
        AlgorithmSpec("TD0", 1.0, base_policy=det),
        AlgorithmSpec("MC", 1.0, base_policy=det),
        AlgorithmSpec("TDLambda", 1.0, lam=0.3, base_policy=det),
    ):
        out = apply_empirical_operator(spec, mdp, np.array([0.7, 0.2]), RngStream(5))
        assert out == pytest.approx(expected_target(spec, mdp, np.array([0.7, 0.2])), abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_affine_map_matches_expected_target_and_factor(seed):
    mdp = random_mdp(seed, gamma=0.85)
    rng = np.random.default_rng(seed)
    for spec in evaluation_specs(alpha=0.3):
        A, b = effective_affine_map(spec, mdp)
        for _ in range(10):
            f = rng.normal(size=5) * 3
            assert b + A @ f == pytest.approx(expected_target(spec, mdp, f), abs=1e-9)
        norm = np.abs(A).sum(axis=1).max()
        assert norm <= (contraction_factor(spec, mdp.gamma) - (1 - spec.alpha)) / spec.alpha + 1e-9


def test_reproducible_bit_exact():
    mdp = random_mdp(1)
    for spec in evaluation_specs() + control_specs() + [AlgorithmSpec("DoubleQLearning", 0.5, p=0.3)]:
        shape = spec.point_shape(mdp)
        f = np.random.default_rng(0).normal(size=shape)
        a = apply_empirical_operator(spec, mdp, f, RngStream(77).child(3))
        b = apply_empirical_operator(spec, mdp, f, RngStream(77).child(3))
        assert np.array_equal(np.asarray(a), np.asarray(b))


def test_noise_covariance_is_diagonal_psd():
    mdp = random_mdp(2)
    for spec in evaluation_specs() + control_specs():
        C = noise_covariance(spec, mdp, np.random.default_rng(1).normal(size=spec.point_shape(mdp)))
        assert np.array_equal(C, np.diag(np.diag(C)))
        assert np.all(np.diag(C) >= 0)


def test_double_q_updates_one_table_per_step():
    mdp = random_mdp(4, n_states=3, n_actions=2)
    spec = AlgorithmSpec("DoubleQLearning", 1.0, p=0.3)
    rng = np.random.default_rng(0)
    qa, qb = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    picked_a = 0
    for k in range(4000):
        out = apply_empirical_operator(spec, mdp, ExtendedPoint(qa, qb), RngStream(k))
        a_same, b_same = np.array_equal(out.qa, qa), np.array_equal(out.qb, qb)
        assert a_same != b_same
        picked_a += b_same
    assert abs(picked_a / 4000 - 0.3) < 4 * np.sqrt(0.21 / 4000)


def test_double_q_target_uses_other_table_at_selected_argmax():
    mdp = m4()
    spec = AlgorithmSpec("DoubleQLearning", 1.0, p=0.5)
    qa = np.array([[0.0, 0.0], [1.0, 5.0]])
    qb = np.array([[0.0, 0.0], [7.0, 2.0]])
    seen = set()
    for k in range(64):
        out = apply_empirical_operator(spec, mdp, ExtendedPoint(qa, qb), RngStream(k))
        if not np.array_equal(out.qa, qa):
            # A selected: argmax of qa at z is action 1, evaluated by qb
            assert out.qa == pytest.approx(np.array([[1 + 0.5 * 2.0, 0.5 * 2.0], [0.5 * 2.0, 0.5 * 2.0]]))
            seen.add("a")
        else:
            assert out.qb == pytest.approx(np.array([[1 + 0.5 * 1.0, 0.5 * 1.0], [0.5 * 1.0, 0.5 * 1.0]]))
            seen.add("b")
    assert seen == {"a", "b"}


def test_td0_stationary_example_m3():
    spec = AlgorithmSpec("TD0", 0.5, base_policy=UNIFORM)
    target = apply_empirical_operator(spec, m3(), [8.0], RngStream(0))
    assert synchronous_update([8.0], target, 0.5) == pytest.approx([6.0])

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from valuechain.ensemble import CoupledEnsemble, ParticleEnsemble
from valuechain.operators import AlgorithmSpec, ExtendedPoint
from valuechain.transport import (
    coupled_distance,
    product_metric_d1,
    sup_norm,
    tv_distance_atoms,
    wasserstein_exact,
)

TD0 = AlgorithmSpec("TD0", 0.5, base_policy="uniform")


def brute_force_w(X, Y):
    X, Y = np.asarray(X, float).reshape(len(X), -1), np.asarray(Y, float).reshape(len(Y), -1)
    n = len(X)
    return min(sum(np.max(np.abs(X[i] - Y[p[i]])) for i in range(n)) / n for p in itertools.permutations(range(n)))


def test_sup_norm_examples():
    assert sup_norm([0, 0], [1, 3]) == 3.0
    assert sup_norm([1.5, -2], [1.5, -2]) == 0.0
    assert sup_norm([2], [-1]) == 3.0
    with pytest.raises(ValueError):
        sup_norm([1, 2], [1])


def test_product_metric_examples():
    assert product_metric_d1(ExtendedPoint(np.array([0.0]), np.array([0.0])), ExtendedPoint(np.array([1.0]), np.array([3.0]))) == 4.0
    p = ExtendedPoint(np.array([2.0]), np.array([1.0]))
    assert product_metric_d1(p, p) == 0.0
    assert product_metric_d1(ExtendedPoint(np.array([2.0]), np.array([0.0])), ExtendedPoint(np.array([2.0]), np.array([5.0]))) == 5.0


def test_wasserstein_examples():
    d, match = wasserstein_exact([[0.0], [2.0]], [[1.0], [3.0]])
    assert d == 1.0 and match.tolist() == [0, 1]
    X = np.random.default_rng(0).normal(size=(6, 3))
    d, match = wasserstein_exact(X, X)
    assert d == 0.0 and match.tolist() == list(range(6))
    d, _ = wasserstein_exact(np.tile([1.0, 4.0], (5, 1)), np.tile([2.0, 1.0], (5, 1)))
    assert d == 3.0


def test_wasserstein_errors():
    with pytest.raises(ValueError):
        wasserstein_exact(np.zeros((3, 1)), np.zeros((4, 1)))
    with pytest.raises(ValueError):
        wasserstein_exact(np.zeros((4097, 1)), np.zeros((4097, 1)))


def test_coupled_distance_examples():
    def ens(x, seed=0):
        return ParticleEnsemble(np.array(x, dtype=float), 0, TD0, seed)

    e = ens([[0.0], [1.0]])
    assert coupled_distance(CoupledEnsemble(e, e)) == 0.0
    assert coupled_distance(CoupledEnsemble(ens([[0.0]]), ens([[3.0]]))) == 3.0
    c = CoupledEnsemble(ens([[0.0], [2.0]]), ens([[3.0], [1.0]]))
    assert coupled_distance(c) == 2.0
    assert wasserstein_exact(c.left.particles, c.right.particles)[0] == 1.0


def test_coupled_distance_uses_product_metric_for_pairs():
    spec = AlgorithmSpec("DoubleQLearning", 0.5, p=0.5)
    L = ParticleEnsemble(np.zeros((1, 2, 1, 1)), 0, spec, 0)
    R = ParticleEnsemble(np.array([[[[1.0]], [[3.0]]]]), 0, spec, 1)
    assert coupled_distance(CoupledEnsemble(L, R)) == 4.0


def test_tv_examples():
    assert tv_distance_atoms([[8.0]], [[0.0]]) == 1.0
    X = np.random.default_rng(1).normal(size=(5, 2))
    assert tv_distance_atoms(X, X) == 0.0
    assert tv_distance_atoms([[0.0], [0.0], [1.0], [1.0]], [[0.0], [1.0], [1.0], [1.0]]) == 0.25


def test_tv_match_tolerance():
    assert tv_distance_atoms([[0.0]], [[1e-12]]) == 0.0
    assert tv_distance_atoms([[0.0]], [[1e-6]]) == 1.0
    assert tv_distance_atoms([[0.0]], [[1e-6]], match_tol=1e-5) == 0.0


@pytest.mark.parametrize("n", range(1, 8))
def test_wasserstein_matches_brute_force(n):
    rng = np.random.default_rng(n)
    for _ in range(3):
        X, Y = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        d, match = wasserstein_exact(X, Y)
        assert d == pytest.approx(brute_force_w(X, Y), abs=1e-12)
        assert sorted(match.tolist()) == list(range(n))
        assert np.mean(np.max(np.abs(X - Y[match]), axis=1)) == pytest.approx(d, abs=1e-12)


def test_wasserstein_below_any_coupling():
    rng = np.random.default_rng(5)
    for _ in range(20):
        X, Y = rng.normal(size=(30, 4)), rng.normal(size=(30, 4))
        c = CoupledEnsemble(ParticleEnsemble(X, 0, TD0, 0), ParticleEnsemble(Y, 0, TD0, 1))
        assert wasserstein_exact(X, Y)[0] <= coupled_distance(c) + 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), shift=st.floats(-10, 10), scale=st.floats(0, 5))
def test_wasserstein_translation_and_scaling(seed, shift, scale):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    d = wasserstein_exact(X, Y)[0]
    v = np.full(3, shift)
    assert wasserstein_exact(X + v, Y + v)[0] == pytest.approx(d, abs=1e-9)
    assert wasserstein_exact(scale * X, scale * Y)[0] == pytest.approx(scale * d, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_tv_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 3, size=(10, 2)).astype(float)
    Y = rng.integers(0, 3, size=(10, 2)).astype(float)
    assert 0.0 <= tv_distance_atoms(X, Y) <= 1.0

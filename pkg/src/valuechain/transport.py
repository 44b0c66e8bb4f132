"""Distances between value functions and between ensembles of them.

The ground cost is the sup-norm. Between two uniform empirical measures of
equal size an optimal coupling is a permutation, so the Wasserstein distance
reduces to a linear assignment problem.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .ensemble import CoupledEnsemble
from .operators import ExtendedPoint

MAX_EXACT_N = 4096
DEFAULT_MATCH_TOL = 1e-9


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def sup_norm(f, g) -> float:
    f, g = _pair(f, g)
    if f.size == 0:
        return 0.0
    return float(np.max(np.abs(f - g)))


def product_metric_d1(a: ExtendedPoint, b: ExtendedPoint) -> float:
    """Sum of the sup-norm gaps of the two tables."""
    return sup_norm(a.qa, b.qa) + sup_norm(a.qb, b.qb)


def _flat_ensemble(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X.reshape(X.shape[0], -1)


def cost_matrix(X, Y, pair_metric: bool = False) -> np.ndarray:
    """Entry ``(i, j)`` is the distance between ``X[i]`` and ``Y[j]``.

    With ``pair_metric`` the points are ``(N, 2, ...)`` Double Q tables and
    the cost is the product metric.
    """
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    if X.shape[1:] != Y.shape[1:]:
        raise ValueError(f"point shapes differ: {X.shape[1:]} vs {Y.shape[1:]}")
    if pair_metric:
        return cost_matrix(X[:, 0], Y[:, 0]) + cost_matrix(X[:, 1], Y[:, 1])
    x, y = _flat_ensemble(X), _flat_ensemble(Y)
    C = np.zeros((x.shape[0], y.shape[0]))
    for k in range(x.shape[1]):
        np.maximum(C, np.abs(x[:, k, None] - y[None, :, k]), out=C)
    return C


def wasserstein_exact(X, Y, pair_metric: bool = False) -> tuple[float, np.ndarray]:
    """Exact W1 between two uniform ensembles of equal size.

    Returns the distance and ``matching`` with ``X[i]`` paired to
    ``Y[matching[i]]``.
    """
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    n = X.shape[0]
    if Y.shape[0] != n:
        raise ValueError(f"ensembles must have equal size, got {n} and {Y.shape[0]}")
    if n > MAX_EXACT_N:
        raise ValueError(f"N = {n} exceeds the exact-solver limit {MAX_EXACT_N}")
    if n == 0:
        raise ValueError("empty ensembles")
    C = cost_matrix(X, Y, pair_metric)
    rows, cols = linear_sum_assignment(C)
    matching = np.empty(n, dtype=np.int64)
    matching[rows] = cols
    # sorted summation keeps the result independent of the solver's row order
    return float(np.sort(C[rows, cols]).sum() / n), matching


def coupled_distance(c: CoupledEnsemble) -> float:
    """Mean distance between paired particles; an upper bound on W1."""
    L, R = c.left.particles, c.right.particles
    n = L.shape[0]
    if c.left.spec.kind == "pair":
        gap = np.abs(L - R).reshape(n, 2, -1).max(axis=-1).sum(axis=-1)
    else:
        gap = np.abs(L - R).reshape(n, -1).max(axis=-1)
    return float(gap.mean())


def tv_distance_atoms(X, Y, match_tol: float = DEFAULT_MATCH_TOL) -> float:
    """Total variation between two uniform atomic measures.

    Atoms within ``match_tol`` of each other in sup-norm (transitively) form
    one class.
    """
    x, y = _flat_ensemble(X), _flat_ensemble(Y)
    if x.shape[1] != y.shape[1]:
        raise ValueError("point shapes differ")
    pts = np.concatenate([x, y])
    weights = np.concatenate([np.full(len(x), 1.0 / len(x)), np.full(len(y), -1.0 / len(y))])
    pairs = cKDTree(pts).query_pairs(match_tol, p=np.inf, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(pts), len(pts)))
    n_classes, labels = connected_components(graph, directed=False)
    diff = np.bincount(labels, weights=weights, minlength=n_classes)
    return float(min(1.0, 0.5 * np.abs(diff).sum()))

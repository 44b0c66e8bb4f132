"""Mean, covariance and concentration of the stationary law of a chain.

The covariance solver works with any affine expected target
``E[target(f)] = b + A f``: with ``B = (1 - alpha) I + alpha A`` the
stationary covariance satisfies ``Sigma = B Sigma B^T + alpha^2 Cbar``,
which is solved as one dense linear system in ``vec(Sigma)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .ensemble import ParticleEnsemble
from .mdp import FiniteMdp
from .operators import AlgorithmSpec, effective_affine_map, noise_variances

SE_MULTIPLIER = 4.0


@dataclass(frozen=True)
class MeanReport:
    deviation: np.ndarray
    standard_error: np.ndarray
    max_deviation: float
    allowance: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "deviation": self.deviation.ravel().tolist(),
            "standard_error": self.standard_error.ravel().tolist(),
            "max_deviation": self.max_deviation,
            "allowance": self.allowance,
            "pass": self.passed,
        }


def stationary_mean_check(
    e: ParticleEnsemble, reference, allowance: float = 0.0, k: float = SE_MULTIPLIER
) -> MeanReport:
    """Compare the ensemble mean with the exact fixed point coordinatewise.

    Passes iff every ``|mean_i - ref_i| <= k * SE_i + allowance``.
    """
    ref = np.asarray(reference, dtype=float)
    dev = np.abs(e.mean() - ref)
    se = e.standard_error()
    return MeanReport(dev, se, float(dev.max()), allowance, bool(np.all(dev <= k * se + allowance)))


def estimate_noise_integral(e: ParticleEnsemble, spec: AlgorithmSpec, mdp: FiniteMdp) -> np.ndarray:
    """Average of the exact per-particle noise covariance over the ensemble."""
    return np.diag(noise_variances(spec, mdp, e.particles).mean(axis=0))


def covariance_opnorm(M) -> float:
    """Induced infinity norm: largest absolute row sum."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"square matrix expected, got {M.shape}")
    return float(np.abs(M).sum(axis=1).max())


def solve_stationary_covariance(A, alpha: float, cbar) -> np.ndarray:
    """Solve ``[I - B kron B] vec(Sigma) = alpha^2 vec(Cbar)`` with ``B = (1-alpha) I + alpha A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    cbar = np.atleast_2d(np.asarray(cbar, dtype=float))
    d = A.shape[0]
    if A.shape != (d, d) or cbar.shape != (d, d):
        raise ValueError(f"A and cbar must be square of equal size, got {A.shape} and {cbar.shape}")
    B = (1.0 - alpha) * np.eye(d) + alpha * A
    if covariance_opnorm(B) >= 1.0:
        raise np.linalg.LinAlgError(f"(1-alpha)I + alpha A has norm {covariance_opnorm(B):.6g} >= 1")
    system = np.eye(d * d) - np.kron(B, B)
    try:
        sigma = np.linalg.solve(system, alpha**2 * cbar.ravel()).reshape(d, d)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"stationary covariance system is singular: {exc}") from None
    sigma = 0.5 * (sigma + sigma.T)
    residual = np.abs(sigma - B @ sigma @ B.T - alpha**2 * cbar).max()
    if residual > 1e-8 * max(1.0, np.abs(sigma).max()):
        raise np.linalg.LinAlgError(f"stationary covariance residual {residual:.3g} too large")
    return sigma


def scalar_variance_factor(alpha: float, gamma: float) -> float:
    """``alpha^2 / (1 - (1 - alpha + alpha gamma)^2)``."""
    rho = 1.0 - alpha + alpha * gamma
    return alpha**2 / (1.0 - rho**2)


def concentration_bound(alpha: float, gamma: float, rmax: float, d: int, eps: float) -> float:
    """Chebyshev-type bound on ``P(min_i |f(i) - f^pi(i)| >= eps)``, clamped to 1."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if math.isinf(eps):
        return 0.0
    c = (2.0 * rmax / (1.0 - gamma)) ** 2
    return min(1.0, c / (d * eps**2) * scalar_variance_factor(alpha, gamma))


def empirical_concentration(e: ParticleEnsemble, reference, eps: float) -> float:
    """Fraction of particles whose smallest coordinate deviation is at least ``eps``."""
    dev = np.abs(e.flat() - np.asarray(reference, dtype=float).ravel())
    return float(np.mean(dev.min(axis=1) >= eps))


def binomial_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


@dataclass(frozen=True)
class BiasReport:
    excess: np.ndarray
    standard_error: np.ndarray
    dominates: bool
    strict: bool

    def to_dict(self) -> dict:
        return {
            "excess": self.excess.ravel().tolist(),
            "standard_error": self.standard_error.ravel().tolist(),
            "dominates": self.dominates,
            "strict": self.strict,
        }


def control_bias_check(e: ParticleEnsemble, qstar, k: float = SE_MULTIPLIER) -> BiasReport:
    """Mean minus ``q*``; dominates iff ``mean >= q* - k SE`` everywhere, strict iff
    some coordinate exceeds ``q*`` by at least ``k SE`` (and by a positive amount).
    """
    excess = e.mean() - np.asarray(qstar, dtype=float)
    se = e.standard_error()
    dominates = bool(np.all(excess >= -k * se))
    strict = bool(np.any((excess >= k * se) & (excess > 0)))
    return BiasReport(excess, se, dominates, strict)


@dataclass(frozen=True)
class CovarianceReport:
    sigma_solved: np.ndarray
    sigma_empirical: np.ndarray
    cbar: np.ndarray
    opnorm_solved: float
    relative_frobenius_error: float

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("sigma_solved", "sigma_empirical", "cbar"):
            out[key] = out[key].tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def covariance_report(e: ParticleEnsemble, mdp: FiniteMdp) -> CovarianceReport:
    """Solved versus empirical stationary covariance of a burned-in evaluation ensemble."""
    spec = e.spec
    A, _ = effective_affine_map(spec, mdp)
    cbar = estimate_noise_integral(e, spec, mdp)
    solved = solve_stationary_covariance(A, spec.alpha, cbar)
    empirical = e.covariance()
    err = np.linalg.norm(solved - empirical) / max(np.linalg.norm(empirical), 1e-300)
    return CovarianceReport(solved, empirical, cbar, covariance_opnorm(solved), float(err))

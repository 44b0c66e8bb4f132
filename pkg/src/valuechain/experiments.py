"""Named experiments, their configuration and their on-disk reports.

Every experiment returns a list of criteria ``{name, value, bound,
tolerance, pass}`` and a set of CSV series. Reports are deterministic given
the configuration: no timestamps, sorted keys, ``repr`` floats.
"""

from __future__ import annotations

import csv
import json
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ensemble import CoupledEnsemble, burn_in_stationary, coupled_step, init_ensemble, step_ensemble
from .library import builtin_mdp
from .mdp import FiniteMdp, MdpError, Policy, exact_policy_values, load_mdp, policy_iteration
from .opi import (
    check_probabilistic_improvement,
    check_reachability,
    estimate_policy_kernel,
    exact_policy_kernel,
    policy_chain_stationary,
    simulate_opi,
    stationary_frequency_check,
)
from .operators import AlgorithmSpec, contraction_factor, effective_affine_map, truncation_horizon
from .stationary import (
    binomial_se,
    concentration_bound,
    control_bias_check,
    covariance_opnorm,
    covariance_report,
    empirical_concentration,
    estimate_noise_integral,
    solve_stationary_covariance,
    stationary_mean_check,
)
from .transport import coupled_distance, tv_distance_atoms, wasserstein_exact

EXPERIMENTS = ("contract", "stationary-mean", "covariance", "concentration", "control-bias", "opi", "bandit-tv")

_DEFAULT_SPEC = {
    "contract": {"algorithm": "TD0", "alpha": 0.1, "base_policy": "uniform"},
    "stationary-mean": {"algorithm": "TD0", "alpha": 0.1, "base_policy": "uniform"},
    "covariance": {"algorithm": "TD0", "alpha": 0.1, "base_policy": "uniform"},
    "concentration": {"algorithm": "TD0", "alpha": 0.1, "base_policy": "uniform"},
    "control-bias": {"algorithm": "QLearning", "alpha": 0.2},
    "opi": {"algorithm": "OPI", "alpha": 1.0},
    "bandit-tv": {"algorithm": "TD0", "alpha": 0.5, "base_policy": "uniform"},
}

_DEFAULT_PARAMS = {
    "contract": {"N": 1000, "n_steps": 50, "tolerance": 0.02},
    "stationary-mean": {"N": 10_000, "burn_in_accuracy": 1e-6, "allowance": 1e-5},
    "covariance": {"N": 100_000, "burn_in_accuracy": 1e-3, "tolerance": 0.10},
    "concentration": {
        "N": 100_000,
        "burn_in_accuracy": 1e-4,
        "alpha_grid": [0.01, 0.05, 0.1, 0.2],
        "epsilon_grid": [0.25, 0.5, 1.0],
    },
    "control-bias": {"N": 100_000, "burn_in_accuracy": 1e-6, "require_strict": False},
    "opi": {"M": 10_000, "N": 10_000, "n_steps": 20, "horizon_tolerance": 1e-6, "residual_tolerance": 1e-9},
    "bandit-tv": {"N": 16, "n_steps": 40, "V0": 8.0, "tolerance": 1e-12},
}


@dataclass
class ExperimentConfig:
    experiment: str
    mdp: str
    seed: int
    spec: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    output_dir: str | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment '{self.experiment}'; expected one of {EXPERIMENTS}")
        if self.seed is None:
            raise ValueError("a seed is required")
        self.seed = int(self.seed)
        unknown = set(self.params) - set(_DEFAULT_PARAMS[self.experiment])
        if unknown:
            raise ValueError(f"unknown parameters for {self.experiment}: {sorted(unknown)}")
        self.params = {**_DEFAULT_PARAMS[self.experiment], **self.params}
        self.spec = dict(self.spec) if self.spec else dict(_DEFAULT_SPEC[self.experiment])

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        doc = dict(doc)
        known = {"experiment", "mdp", "seed", "spec", "output_dir"}
        params = {k: doc.pop(k) for k in list(doc) if k not in known}
        return cls(params=params, **doc)

    def echo(self) -> dict:
        return {"experiment": self.experiment, "mdp": self.mdp, "seed": self.seed, "spec": self.spec, **self.params}


@dataclass
class ExperimentResult:
    experiment: str
    config: dict
    criteria: list[dict] = field(default_factory=list)
    series: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.criteria)

    def add(self, name: str, value: float, bound: float, tolerance: float, passed: bool) -> None:
        self.criteria.append(
            {"name": name, "value": float(value), "bound": float(bound), "tolerance": float(tolerance), "pass": bool(passed)}
        )


def resolve_mdp(name_or_path: str) -> FiniteMdp:
    """A built-in name (``M1``..``M6``, ``random:<seed>...``) or a JSON file path."""
    if os.path.exists(name_or_path):
        return load_mdp(name_or_path)
    try:
        return builtin_mdp(name_or_path)
    except MdpError:
        raise MdpError(f"'{name_or_path}' is neither a file nor a built-in MDP") from None


# ---------------------------------------------------------------- measurements


def measure_contraction(
    spec: AlgorithmSpec, mdp: FiniteMdp, N: int, n_steps: int, seed: int
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean per-step ratio of coupled distances under identical samples.

    Two independent realizable-uniform ensembles are coupled and stepped
    together; steps whose previous distance is already 0 carry no
    information and are skipped. Returns ``(mean ratio, distances, ratios)``.
    """
    left = init_ensemble("realizable-uniform", N, spec, 2 * seed + 1, mdp)
    right = init_ensemble("realizable-uniform", N, spec, 2 * seed + 2, mdp)
    c = CoupledEnsemble(left, right)
    dist = [coupled_distance(c)]
    ratios = []
    for _ in range(n_steps):
        c = coupled_step(c, mdp)
        dist.append(coupled_distance(c))
        if dist[-2] > 0.0:
            ratios.append(dist[-1] / dist[-2])
    ratios = np.array(ratios)
    return (float(ratios.mean()) if len(ratios) else 0.0), np.array(dist), ratios


def _reference_values(spec: AlgorithmSpec, mdp: FiniteMdp) -> np.ndarray:
    if spec.kind == "state":
        return exact_policy_values(mdp, spec.policy_for(mdp))[0]
    return policy_iteration(mdp, Policy.deterministic([0] * mdp.n_states, mdp.n_actions))[-1][1]


def _run_contract(cfg: ExperimentConfig, mdp: FiniteMdp, spec: AlgorithmSpec, res: ExperimentResult) -> None:
    p = cfg.params
    mean_ratio, dist, ratios = measure_contraction(spec, mdp, p["N"], p["n_steps"], cfg.seed)
    factor = contraction_factor(spec, mdp.gamma)
    res.add("mean-coupled-ratio", mean_ratio, factor, p["tolerance"], mean_ratio <= factor + p["tolerance"])
    se = float(ratios.std(ddof=1) / math.sqrt(len(ratios))) if len(ratios) > 1 else 0.0
    res.extra["ratio_standard_error"] = se
    rows = [[n, dist[n], (dist[n] / dist[n - 1]) if n > 0 and dist[n - 1] > 0 else ""] for n in range(len(dist))]
    res.series["coupled_distance"] = (["step", "coupled_distance", "ratio"], rows)


def _run_stationary_mean(cfg, mdp, spec, res) -> None:
    p = cfg.params
    if spec.kind == "pair":
        raise ValueError("stationary-mean supports evaluation and single-table control algorithms")
    e = burn_in_stationary(spec, mdp, p["N"], cfg.seed, p["burn_in_accuracy"])
    ref = _reference_values(spec, mdp)
    if spec.kind == "state":
        report = stationary_mean_check(e, ref, p["allowance"])
        worst = int(np.argmax(report.deviation.ravel() - 4.0 * report.standard_error.ravel()))
        bound = 4.0 * float(report.standard_error.ravel()[worst])
        res.add("mean-identity", float(report.deviation.ravel()[worst]), bound, p["allowance"], report.passed)
    else:
        bias = control_bias_check(e, ref)
        res.add("mean-dominates-optimum", float(bias.excess.min()), 0.0, 0.0, bias.dominates)
        report = stationary_mean_check(e, ref, p["allowance"])
    res.extra["mean"] = report.to_dict()
    rows = [[i, m, r, s] for i, (m, r, s) in enumerate(zip(e.mean().ravel(), np.ravel(ref), e.standard_error().ravel()))]
    res.series["stationary_mean"] = (["coordinate", "mean", "reference", "standard_error"], rows)


def _run_covariance(cfg, mdp, spec, res) -> None:
    p = cfg.params
    e = burn_in_stationary(spec, mdp, p["N"], cfg.seed, p["burn_in_accuracy"])
    rep = covariance_report(e, mdp)
    res.add("relative-frobenius-error", rep.relative_frobenius_error, 0.0, p["tolerance"], rep.relative_frobenius_error <= p["tolerance"])
    res.extra["covariance"] = rep.to_dict()
    d = rep.sigma_solved.shape[0]
    rows = [[i, j, rep.sigma_solved[i, j], rep.sigma_empirical[i, j], rep.cbar[i, j]] for i in range(d) for j in range(d)]
    res.series["covariance"] = (["i", "j", "sigma_solved", "sigma_empirical", "cbar"], rows)


def concentration_sweep(spec: AlgorithmSpec, mdp: FiniteMdp, alphas, epsilons, N: int, seed: int, accuracy: float):
    """Per ``alpha``: solved-covariance norm and, per ``eps``, empirical frequency and bound."""
    out = []
    d = mdp.n_states
    for k, alpha in enumerate(alphas):
        s = replace(spec, alpha=float(alpha))
        e = burn_in_stationary(s, mdp, N, seed + k, accuracy)
        A, _ = effective_affine_map(s, mdp)
        sigma = solve_stationary_covariance(A, s.alpha, estimate_noise_integral(e, s, mdp))
        ref = exact_policy_values(mdp, s.policy_for(mdp))[0]
        cells = []
        for eps in epsilons:
            freq = empirical_concentration(e, ref, eps)
            bound = concentration_bound(s.alpha, mdp.gamma, mdp.rmax, d, eps)
            cells.append({"eps": float(eps), "freq": freq, "bound": bound, "se": binomial_se(freq, N)})
        out.append({"alpha": float(alpha), "opnorm": covariance_opnorm(sigma), "cells": cells})
    return out


def _run_concentration(cfg, mdp, spec, res) -> None:
    p = cfg.params
    sweep = concentration_sweep(spec, mdp, p["alpha_grid"], p["epsilon_grid"], p["N"], cfg.seed, p["burn_in_accuracy"])
    for row in sweep:
        for cell in row["cells"]:
            ok = cell["freq"] <= cell["bound"] + 4.0 * cell["se"]
            res.add(f"bound-alpha={row['alpha']:g}-eps={cell['eps']:g}", cell["freq"], cell["bound"], 4.0 * cell["se"], ok)
    norms = [row["opnorm"] for row in sweep]
    order = np.argsort([row["alpha"] for row in sweep], kind="stable")
    steps = np.diff(np.array(norms)[order])
    res.add("opnorm-nondecreasing-in-alpha", float(steps.min()) if len(steps) else 0.0, 0.0, 0.0, bool(np.all(steps >= 0)))
    for j, eps in enumerate(p["epsilon_grid"]):
        rows = [[row["alpha"], row["opnorm"], row["cells"][j]["freq"], row["cells"][j]["bound"]] for row in sweep]
        res.series[f"concentration_eps={eps:g}"] = (["alpha", "opnorm_solved", "empirical_freq", "bound"], rows)


def _run_control_bias(cfg, mdp, spec, res) -> None:
    p = cfg.params
    e = burn_in_stationary(spec, mdp, p["N"], cfg.seed, p["burn_in_accuracy"])
    qstar = _reference_values(spec, mdp)
    bias = control_bias_check(e, qstar)
    res.add("mean-dominates-optimum", float((bias.excess + 4 * bias.standard_error).min()), 0.0, 0.0, bias.dominates)
    if p["require_strict"]:
        z = bias.excess / np.where(bias.standard_error > 0, bias.standard_error, np.inf)
        res.add("strict-overestimation", float(z.max()), 4.0, 0.0, bias.strict)
    res.extra["bias"] = bias.to_dict()
    rows = [[i, m, q, x, s] for i, (m, q, x, s) in enumerate(zip(e.mean().ravel(), qstar.ravel(), bias.excess.ravel(), bias.standard_error.ravel()))]
    res.series["control_bias"] = (["coordinate", "mean", "qstar", "excess", "standard_error"], rows)


def _run_opi(cfg, mdp, spec, res) -> None:
    p = cfg.params
    H = truncation_horizon(mdp.gamma, mdp.rmax, p["horizon_tolerance"])
    mc = estimate_policy_kernel(mdp, p["M"], H, cfg.seed)
    try:
        exact = exact_policy_kernel(mdp, H)
    except MdpError as exc:
        exact = None
        res.extra["exact_kernel"] = str(exc)
    kernel = exact or mc
    if exact is not None:
        gap = np.abs(mc.K - exact.K)
        res.add("monte-carlo-vs-exact", float(gap.max()), 0.0, 0.0, bool(np.all(gap <= 4.0 * mc.se + 1e-12)))
    imp = check_probabilistic_improvement(kernel, mdp)
    res.add("probabilistic-improvement", min(imp.probabilities), 0.0, 0.0, imp.all_passed)
    reach = check_reachability(kernel, mdp)
    res.add("reachability", float(max(reach.path_lengths)), 0.0, 0.0, reach.all_passed)
    chain = policy_chain_stationary(kernel, mdp)
    res.add("aperiodic-optimum", float(kernel.K[chain.star, chain.star]), 0.0, 0.0, chain.aperiodic_star)
    tol = p["residual_tolerance"] if exact is not None else 4.0 * float(mc.se.max())
    res.add("stationary-identity-residual", chain.identity_residual, 0.0, tol, chain.identity_residual <= tol)
    if spec.alpha == 1.0:
        run = simulate_opi(mdp, 1.0, p["n_steps"], p["N"], H, cfg.seed + 1)
        ok, z = stationary_frequency_check(run, chain.phi1)
        res.add("visit-frequencies-match-phi1", z, 4.0, 0.0, ok)
    else:
        run = simulate_opi(mdp, spec.alpha, p["n_steps"], p["N"], H, cfg.seed + 1)
    res.extra["chain"] = chain.to_dict()
    res.extra["horizon"] = H
    res.extra["policies"] = [list(a) for a in kernel.policies]
    n = len(kernel.policies)
    res.series["kernel"] = (["from"] + [f"to_{j}" for j in range(n)], [[i, *kernel.K[i]] for i in range(n)])
    res.series["kernel_monte_carlo"] = (["from"] + [f"to_{j}" for j in range(n)], [[i, *mc.K[i]] for i in range(n)])
    res.series["policy_frequencies"] = (
        ["step"] + [f"policy_{j}" for j in range(n)],
        [[t + 1, *run.frequencies[t]] for t in range(len(run.frequencies))],
    )


def bandit_tv_series(spec: AlgorithmSpec, mdp: FiniteMdp, V0: float, N: int, n_steps: int, seed: int):
    """Wasserstein and total-variation distance from a point-started chain to the Dirac at ``v^pi``."""
    vpi = exact_policy_values(mdp, spec.policy_for(mdp))[0]
    target = np.broadcast_to(vpi, (N, mdp.n_states))
    e = init_ensemble(("point", np.full(mdp.n_states, float(V0))), N, spec, seed)
    rows = []
    for n in range(n_steps + 1):
        w = wasserstein_exact(e.particles, target)[0]
        rows.append((n, w, tv_distance_atoms(e.particles, target)))
        if n < n_steps:
            e = step_ensemble(e, mdp)
    return rows


def _run_bandit_tv(cfg, mdp, spec, res) -> None:
    p = cfg.params
    rows = bandit_tv_series(spec, mdp, p["V0"], p["N"], p["n_steps"], cfg.seed)
    vpi = exact_policy_values(mdp, spec.policy_for(mdp))[0]
    d0 = float(np.max(np.abs(p["V0"] - vpi)))
    rho = contraction_factor(spec, mdp.gamma)
    closed = [rho**n * d0 for n, _, _ in rows]
    wgap = max(abs(w - c) for (_, w, _), c in zip(rows, closed))
    res.add("wasserstein-closed-form", wgap, 0.0, p["tolerance"], wgap <= p["tolerance"])
    tv_expected = 1.0 if d0 > 0 else 0.0
    tvgap = max(abs(tv - tv_expected) for _, _, tv in rows)
    res.add("tv-constant", tvgap, tv_expected, 0.0, tvgap == 0.0)
    res.series["bandit_tv"] = (["n", "wasserstein", "tv", "closed_form"], [[n, w, tv, c] for (n, w, tv), c in zip(rows, closed)])


_RUNNERS = {
    "contract": _run_contract,
    "stationary-mean": _run_stationary_mean,
    "covariance": _run_covariance,
    "concentration": _run_concentration,
    "control-bias": _run_control_bias,
    "opi": _run_opi,
    "bandit-tv": _run_bandit_tv,
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    mdp = resolve_mdp(cfg.mdp)
    spec = AlgorithmSpec.from_dict(cfg.spec, mdp.n_actions)
    res = ExperimentResult(cfg.experiment, cfg.echo())
    _RUNNERS[cfg.experiment](cfg, mdp, spec, res)
    return res


# ---------------------------------------------------------------- reports


def _cell(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    return x


def emit_report(res: ExperimentResult, output_dir) -> list[Path]:
    """Write ``report.json`` and one CSV per series; nothing is left behind on failure."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=out))
    try:
        doc = {"experiment": res.experiment, "config": res.config, "criteria": res.criteria, "pass": res.passed, "details": res.extra}
        (tmp / "report.json").write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
        for name, (header, rows) in sorted(res.series.items()):
            with (tmp / f"{name}.csv").open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                w.writerows([[_cell(x) for x in row] for row in rows])
        written = []
        try:
            for f in sorted(tmp.iterdir()):
                dest = out / f.name
                os.replace(f, dest)
                written.append(dest)
        except OSError:
            for dest in written:
                dest.unlink(missing_ok=True)
            raise
        return written
    finally:
        shutil.rmtree(tmp, ignore_errors=True)

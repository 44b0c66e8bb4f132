"""Particle ensembles of value functions evolving under a sampled kernel.

An ensemble of ``N`` particles stands for the law of the iterate; one call to
:func:`step_ensemble` applies the kernel once to every particle. Particle
``i`` at step ``n`` reads its randomness from the key ``(seed, n, i, slot)``,
so results never depend on evaluation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .mdp import FiniteMdp
from .operators import AlgorithmSpec, batch_targets, blend, contraction_factor, n_slots
from .rng import RngStream

COUPLINGS = ("identical-samples", "independent")


@dataclass(frozen=True)
class ParticleEnsemble:
    """``particles`` has shape ``(N, *point_shape)``."""

    particles: np.ndarray
    step_index: int
    spec: AlgorithmSpec
    seed: int

    def __post_init__(self):
        if self.particles.ndim < 2 or self.particles.shape[0] < 1:
            raise ValueError("an ensemble needs at least one particle")
        if self.step_index < 0:
            raise ValueError("step_index must be nonnegative")
        self.particles.setflags(write=False)

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    def flat(self) -> np.ndarray:
        """Particles as ``(N, d)`` coordinate vectors."""
        return self.particles.reshape(self.n, -1)

    def mean(self) -> np.ndarray:
        return self.particles.mean(axis=0)

    def standard_error(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros(self.particles.shape[1:])
        return self.particles.std(axis=0, ddof=1) / math.sqrt(self.n)

    def covariance(self) -> np.ndarray:
        x = self.flat()
        if self.n < 2:
            return np.zeros((x.shape[1], x.shape[1]))
        return np.atleast_2d(np.cov(x, rowvar=False))


@dataclass(frozen=True)
class CoupledEnsemble:
    left: ParticleEnsemble
    right: ParticleEnsemble
    coupling: str = "identical-samples"

    def __post_init__(self):
        if self.coupling not in COUPLINGS:
            raise ValueError(f"unknown coupling '{self.coupling}'")
        if self.left.particles.shape != self.right.particles.shape:
            raise ValueError("coupled ensembles must have equal size and shape")
        if self.left.step_index != self.right.step_index:
            raise ValueError("coupled ensembles must share step_index")


def init_ensemble(
    init: str | tuple,
    n: int,
    spec: AlgorithmSpec,
    seed: int,
    mdp: FiniteMdp | None = None,
) -> ParticleEnsemble:
    """Draw ``n`` starting particles.

    ``init`` is ``("point", f0)``, ``("uniform-box", lo, hi)`` or
    ``"realizable-uniform"`` (the box ``[0, rmax / (1 - gamma)]``, needs ``mdp``).
    """
    if n < 1:
        raise ValueError("N must be at least 1")
    kind = init if isinstance(init, str) else init[0]
    if kind == "point":
        f0 = np.asarray(init[1], dtype=float)
        particles = np.broadcast_to(f0, (n, *f0.shape)).copy()
    elif kind in ("uniform-box", "realizable-uniform"):
        if kind == "uniform-box":
            lo, hi = float(init[1]), float(init[2])
            if mdp is None:
                raise ValueError("uniform-box needs the MDP to know the particle shape")
        else:
            if mdp is None:
                raise ValueError("realizable-uniform needs the MDP")
            lo, hi = 0.0, mdp.vmax
        if lo > hi:
            raise ValueError(f"empty box: lo {lo} > hi {hi}")
        shape = spec.point_shape(mdp)
        rng = np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), 0x1717]))
        particles = rng.uniform(lo, hi, size=(n, *shape))
    else:
        raise ValueError(f"unknown initializer '{kind}'")
    return ParticleEnsemble(particles, 0, spec, seed)


def _step_sides(
    sides: list[np.ndarray], spec: AlgorithmSpec, mdp: FiniteMdp, stream: RngStream, chunk: int = 1 << 15
) -> list[np.ndarray]:
    """One kernel step for each array in ``sides``, all reading the same streams."""
    n = sides[0].shape[0]
    outs = [np.empty_like(x) for x in sides]
    slots = np.arange(n_slots(spec, mdp))[None, :]
    for start in range(0, n, chunk):
        ids = np.arange(start, min(start + chunk, n))
        keys = stream.keys(ids[:, None], slots)
        batch = [x[ids] for x in sides]
        for out, x, t in zip(outs, batch, batch_targets(spec, mdp, batch, keys)):
            out[ids] = blend(x, t, spec.alpha)
    return outs


def step_ensemble(e: ParticleEnsemble, mdp: FiniteMdp) -> ParticleEnsemble:
    """Apply the kernel once to every particle."""
    if e.spec.algorithm == "OPI":
        raise ValueError("OPI chains are simulated by valuechain.opi.simulate_opi")
    (out,) = _step_sides([e.particles], e.spec, mdp, RngStream(e.seed).child(e.step_index))
    return replace(e, particles=out, step_index=e.step_index + 1)


def run_chain(e: ParticleEnsemble, mdp: FiniteMdp, n_steps: int, record_every: int = 1) -> list[ParticleEnsemble]:
    """Snapshots every ``record_every`` steps; the last one is always included."""
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    snaps = [e]
    for k in range(1, n_steps + 1):
        e = step_ensemble(e, mdp)
        if k % record_every == 0 or k == n_steps:
            snaps.append(e)
    return snaps


def coupled_step(c: CoupledEnsemble, mdp: FiniteMdp) -> CoupledEnsemble:
    """Advance both sides one step.

    Under identical-samples coupling particle ``i`` on both sides reads the
    left side's stream, so both see the same rewards, successors and coin
    flips. The independent coupling uses each side's own seed.
    """
    if c.coupling == "identical-samples":
        stream = RngStream(c.left.seed).child(c.left.step_index)
        left, right = _step_sides([c.left.particles, c.right.particles], c.left.spec, mdp, stream)
        nxt = c.left.step_index + 1
        return CoupledEnsemble(
            replace(c.left, particles=left, step_index=nxt),
            replace(c.right, particles=right, step_index=nxt),
            c.coupling,
        )
    if c.right.seed == c.left.seed:
        raise ValueError("independent coupling needs distinct seeds")
    return CoupledEnsemble(step_ensemble(c.left, mdp), step_ensemble(c.right, mdp), c.coupling)


def burn_in_steps(spec: AlgorithmSpec, mdp: FiniteMdp, target_accuracy: float) -> int:
    rho = contraction_factor(spec, mdp.gamma)
    d0 = mdp.vmax * (2.0 if spec.kind == "pair" else 1.0)
    if rho == 0.0:
        return 1
    if target_accuracy >= d0:
        return 0
    return math.ceil(math.log(target_accuracy / d0) / math.log(rho))


def burn_in_stationary(
    spec: AlgorithmSpec, mdp: FiniteMdp, n: int, seed: int, target_accuracy: float = 1e-6
) -> ParticleEnsemble:
    """Run a realizable-uniform ensemble long enough to sit within
    ``target_accuracy`` (Wasserstein) of the stationary law.
    """
    e = init_ensemble("realizable-uniform", n, spec, seed, mdp)
    for _ in range(burn_in_steps(spec, mdp, target_accuracy)):
        e = step_ensemble(e, mdp)
    return e


def export_snapshot(e: ParticleEnsemble, path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (one row per particle) and ``<path>.json`` (metadata)."""
    path = Path(path)
    csv_path, meta_path = path.with_suffix(".csv"), path.with_suffix(".json")
    flat = e.flat()
    header = ",".join(f"x{i}" for i in range(flat.shape[1]))
    np.savetxt(csv_path, flat, delimiter=",", header=header, comments="", fmt="%.17g")
    meta = {
        "spec": e.spec.to_dict(),
        "seed": e.seed,
        "step_index": e.step_index,
        "shape": list(e.particles.shape[1:]),
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return csv_path, meta_path

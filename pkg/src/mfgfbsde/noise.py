"""Deterministic counter-based random streams for the particle solvers.

Streams are Philox generators keyed by (seed, purpose-tag) and, for
per-step arrays, by (seed, purpose-tag, step). The keying makes every
array reproducible independent of evaluation order or worker count, and
extending the time grid keeps the already-generated columns unchanged
(needed by the horizon-doubling check).
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key64(*parts) -> int:
    h = hashlib.blake2b("/".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, *tags) -> np.random.Generator:
    """Independent generator keyed by seed and purpose tags."""
    return np.random.Generator(np.random.Philox(key=[seed & (2**64 - 1), _key64(*tags)]))


def brownian_increments(seed: int, n_particles: int, n_steps: int, dt: float,
                        tag: str = "brownian") -> np.ndarray:
    """(n_particles, n_steps) increments with variance dt, Fortran layout.

    Column k comes from its own (seed, tag, k)-keyed stream, so the array
    for a longer grid is a column extension of the shorter one.
    """
    out = np.empty((n_particles, n_steps), order="F")
    scale = np.sqrt(dt)
    for k in range(n_steps):
        stream(seed, tag, "step", k).standard_normal(n_particles, out=out[:, k])
    out *= scale
    return out


class NoiseBundle:
    """Brownian increments plus initial-condition sampler streams for one solve."""

    def __init__(self, n_particles: int, grid, seed: int, tag: str = "brownian"):
        self.n_particles = n_particles
        self.grid = grid
        self.seed = seed
        self.tag = tag
        self.dB = brownian_increments(seed, n_particles, grid.n_steps, grid.dt, tag=tag)

    def initial_stream(self, tag: str = "initial") -> np.random.Generator:
        return stream(self.seed, self.tag, tag)

    def derived(self, *tags) -> np.random.Generator:
        return stream(self.seed, self.tag, *tags)


def make_noise(n_particles: int, grid, seed: int, tag: str = "brownian") -> NoiseBundle:
    return NoiseBundle(n_particles, grid, seed, tag=tag)


def sample_truncated_normal(gen: np.random.Generator, n: int, mean: float,
                            variance: float, n_sigmas: float = 4.0) -> np.ndarray:
    """Inverse-CDF sample of Normal(mean, variance) truncated to +-n_sigmas."""
    from scipy.stats import truncnorm

    sd = np.sqrt(variance)
    u = gen.uniform(size=n)
    lo, hi = -n_sigmas, n_sigmas
    return mean + sd * truncnorm.ppf(u, lo, hi)


def discrete_atoms_sample(atoms, n: int) -> np.ndarray:
    """Deterministic equal-proportion sample of a small atom set (cyclic fill)."""
    atoms = np.asarray(atoms, dtype=float)
    reps = -(-n // atoms.size)
    return np.tile(atoms, reps)[:n].astype(float)

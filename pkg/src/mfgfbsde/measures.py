"""Empirical probability measures on the real line.

Everything in the pipeline is an equal-weight particle cloud, so measures
are stored as sorted atom vectors and the quadratic Wasserstein distance
reduces to the exact sorted coupling.
"""

from __future__ import annotations

import numpy as np


class MeasureError(ValueError):
    pass


class EmpiricalMeasure:
    """Equal-weight atoms, kept sorted ascending. Immutable after construction."""

    __slots__ = ("atoms", "_mean", "_moment2")

    def __init__(self, atoms, assume_sorted: bool = False):
        a = np.asarray(atoms, dtype=float)
        if a.ndim != 1 or a.size < 1:
            raise MeasureError("measure needs a nonempty 1-D atom vector")
        if not np.all(np.isfinite(a)):
            raise MeasureError("measure atoms must be finite")
        if not assume_sorted:
            a = np.sort(a)
        a.flags.writeable = False
        self.atoms = a
        self._mean = None
        self._moment2 = None

    @property
    def n(self) -> int:
        return self.atoms.size

    def mean(self) -> float:
        if self._mean is None:
            self._mean = float(self.atoms.mean())
        return self._mean

    def moment2(self) -> float:
        if self._moment2 is None:
            self._moment2 = float(np.mean(self.atoms**2))
        return self._moment2

    def variance(self) -> float:
        return self.moment2() - self.mean() ** 2

    def shifted(self, c: float) -> "EmpiricalMeasure":
        return EmpiricalMeasure(self.atoms + c, assume_sorted=True)

    def dilated(self, factor: float) -> "EmpiricalMeasure":
        """Atomwise dilation about the mean by `factor` (> 0 keeps order)."""
        if factor <= 0:
            raise MeasureError("dilation factor must be positive")
        m = self.mean()
        return EmpiricalMeasure(m + factor * (self.atoms - m), assume_sorted=True)

    def __repr__(self):
        return f"EmpiricalMeasure(n={self.n}, mean={self.mean():.4g})"


def mean(mu: EmpiricalMeasure) -> float:
    return mu.mean()


def moment2(mu: EmpiricalMeasure) -> float:
    return mu.moment2()


def w2_distance(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact quadratic Wasserstein distance between equal-count clouds.

    In one dimension the optimal coupling pairs sorted atoms, so the
    distance is the root-mean-square gap of the order statistics.
    """
    if mu.n != nu.n:
        raise MeasureError(f"atom counts differ: {mu.n} vs {nu.n}")
    d = mu.atoms - nu.atoms
    return float(np.sqrt(np.mean(d * d)))


class LawFlow:
    """Per-time-step empirical measures, one sorted row per grid time.

    Backed by a single (n_times, n_atoms) array with sorted rows; rows are
    exposed as EmpiricalMeasure views.
    """

    __slots__ = ("atoms", "_means")

    def __init__(self, atoms, assume_sorted: bool = False):
        a = np.ascontiguousarray(atoms, dtype=float)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise MeasureError("law flow needs a (n_times, n_atoms) array")
        if not np.all(np.isfinite(a)):
            raise MeasureError("law flow atoms must be finite")
        if not assume_sorted:
            a = np.sort(a, axis=1)
        self.atoms = a
        self._means = None

    @classmethod
    def from_paths(cls, x_paths) -> "LawFlow":
        """Empirical law per time step of an ensemble indexed (particle, step)."""
        return cls(np.sort(np.asarray(x_paths, dtype=float).T, axis=1), assume_sorted=True)

    @property
    def n_times(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    def __len__(self):
        return self.n_times

    def __getitem__(self, k: int) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.atoms[k], assume_sorted=True)

    def means(self) -> np.ndarray:
        if self._means is None:
            self._means = self.atoms.mean(axis=1)
        return self._means

    def shifted(self, c: float) -> "LawFlow":
        return LawFlow(self.atoms + c, assume_sorted=True)

    def time_sliced(self, k0: int) -> "LawFlow":
        """The flow restarted at grid index k0 (shares storage)."""
        if not 0 <= k0 < self.n_times:
            raise MeasureError(f"slice index {k0} out of range")
        return LawFlow(self.atoms[k0:], assume_sorted=True)

    def relax_toward(self, other: "LawFlow", theta: float) -> "LawFlow":
        """Atomwise convex combination (1-theta)*self + theta*other.

        On sorted equal-size clouds this is the W2 geodesic interpolation.
        """
        if other.atoms.shape != self.atoms.shape:
            raise MeasureError("law flows have mismatched shapes")
        return LawFlow((1.0 - theta) * self.atoms + theta * other.atoms, assume_sorted=True)


def flow_distance(a: LawFlow, b: LawFlow, grid, K: float) -> float:
    """Discounted squared-W2 distance between two flows on the same grid.

    Left-endpoint quadrature of exp(-K t) * W2^2(a_t, b_t) over the grid.
    """
    if a.atoms.shape != b.atoms.shape:
        raise MeasureError("law flows have mismatched shapes")
    if a.n_times != grid.n_steps + 1:
        raise MeasureError(
            f"law flow length {a.n_times} does not match grid ({grid.n_steps + 1})"
        )
    d2 = np.mean((a.atoms - b.atoms) ** 2, axis=1)  # squared W2 per step
    w = np.exp(-K * grid.times()[: grid.n_steps])
    return float(np.sum(w * d2[: grid.n_steps]) * grid.dt)


def dump_law_flow_csv(flow: LawFlow, grid, path) -> None:
    """Diagnostic CSV: t followed by the sorted atoms of each step."""
    t = grid.times()
    header = "t," + ",".join(f"atom{i}" for i in range(flow.n_atoms))
    data = np.column_stack([t, flow.atoms])
    np.savetxt(path, data, delimiter=",", header=header, comments="")

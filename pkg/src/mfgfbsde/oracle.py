"""Closed-form benchmark for the linear-quadratic game.

Substituting the affine costate ansatz Y = p X + q m into the equilibrium
system and matching coefficients on X and on the ensemble mean m gives two
scalar quadratics,

    p^2 + r p - (c_x + c_m) = 0,
    q^2 + (2p + r) q + c_m s = 0,

solved here by bisection. The stable branch has p > 0 and p + q > 0, so
the mean decays as m_t = m_0 exp(-(p+q) t), the volatility is the constant
p, and the pinned tangent is exp(-p t). The quadratic form of the
equilibrium value closes the master equation with mean-curvature
alpha = (c_m s^2 - q^2) / (r + 2(p+q)) and constant p / (2 r).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class OracleError(RuntimeError):
    pass


def _bisect(fn, lo: float, hi: float, tol: float = 1e-12, max_iter: int = 200) -> float:
    flo, fhi = fn(lo), fn(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0:
        raise OracleError(f"no sign change on [{lo}, {hi}]")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = fn(mid)
        if fm == 0.0 or hi - lo < tol:
            return mid
        if flo * fm < 0:
            hi = mid
        else:
            lo, flo = mid, fm
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class LqOracle:
    c_x: float
    c_m: float
    s: float
    r: float
    p: float
    q: float

    def mean_path(self, m0: float, t) -> np.ndarray:
        return m0 * np.exp(-(self.p + self.q) * np.asarray(t, dtype=float))

    def costate(self, x, m) -> np.ndarray:
        return self.p * np.asarray(x, dtype=float) + self.q * m

    def tangent_x(self, t) -> np.ndarray:
        return np.exp(-self.p * np.asarray(t, dtype=float))

    def tangent_y(self, t) -> np.ndarray:
        return self.p * self.tangent_x(t)

    @property
    def z_const(self) -> float:
        return self.p

    def grad_value(self, x0: float, m0: float) -> float:
        return self.p * x0 + self.q * m0

    @property
    def mean_curvature(self) -> float:
        """Coefficient alpha of m^2/2 in the closed-form master solution."""
        return (self.c_m * self.s**2 - self.q**2) / (self.r + 2 * (self.p + self.q))

    def value(self, x, mu) -> float:
        """Closed-form classical solution of the master equation at (x, mu)."""
        m = mu.mean()
        return float(0.5 * self.p * x**2 + self.q * x * m
                     + 0.5 * self.mean_curvature * m**2 + self.p / (2 * self.r))

    def grad_value_fn(self):
        """The gradient map (x, mu) -> p x + q mean(mu)."""
        def grad(x, mu):
            return self.p * np.asarray(x, dtype=float) + self.q * mu.mean()
        return grad


def lq_oracle(c_x: float, c_m: float, s: float, r: float) -> LqOracle:
    """Roots of the two defining quadratics by bisection, stable branch only."""
    if c_x <= 0 or c_m < 0 or r <= 0:
        raise OracleError("need c_x > 0, c_m >= 0, r > 0")
    C = c_x + c_m
    p = _bisect(lambda v: v * v + r * v - C, 0.0, 1.0 + C + r)

    cs = c_m * s
    if cs == 0.0:
        q = 0.0
    else:
        B = 2 * p + r
        disc = B * B - 4 * cs
        if disc < 0:
            raise OracleError("mean-coupling quadratic has no real root")
        # the stable root is the one closer to zero (both roots are negative)
        lo = -B / 2
        q = _bisect(lambda v: v * v + B * v + cs, lo, 0.0)
    if p <= 0 or p + q <= 0:
        raise OracleError(f"no stable branch: p={p}, q={q}")
    return LqOracle(c_x=c_x, c_m=c_m, s=s, r=r, p=p, q=q)

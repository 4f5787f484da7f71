"""Global polynomial least squares for the backward sweeps.

Features are standardized powers of the state; the normal equations are
factored once per step and reused across targets. Fits are winsorized:
particles outside the inner quantile band are excluded from the fit and
every evaluation clamps the state to that band, because polynomial tails
evaluated at stray particles destabilize the Euler feedback loop.
Degenerate states (point-mass steps, discrete supports) fall back to
lower degrees instead of failing, since pinned solves start from a point
mass by construction.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class RegressionRankError(RuntimeError):
    """Normal equations unusable even at degree zero; lower the basis degree."""


TAIL_FRACTION = 0.005


def _quantile_band(x: np.ndarray, frac: float) -> tuple[float, float]:
    k = int(frac * x.size)
    if k == 0:
        return float(x.min()), float(x.max())
    part = np.partition(x, [k, x.size - 1 - k])
    return float(part[k]), float(part[x.size - 1 - k])


class PolyFit:
    """Least-squares polynomial fit of one or more targets on a shared state."""

    def __init__(self, x: np.ndarray, degree: int, tail_fraction: float = TAIL_FRACTION):
        x = np.asarray(x, dtype=float)
        self.x_lo, self.x_hi = _quantile_band(x, tail_fraction)
        self._mask = (x >= self.x_lo) & (x <= self.x_hi)
        kept = x[self._mask]
        self.n_kept = kept.size
        self.xm = float(kept.mean())
        xs = float(kept.std())
        # a (numerically) constant state supports only the constant feature
        if xs < 1e-12 * (1.0 + abs(self.xm)):
            degree = 0
            xs = 1.0
        self.xs = xs
        self.degree = degree
        self._z_all = (np.clip(x, self.x_lo, self.x_hi) - self.xm) / xs
        n = x.size
        A = np.empty((n, degree + 1))
        A[:, 0] = self._mask.astype(float)
        for j in range(1, degree + 1):
            A[:, j] = A[:, j - 1] * self._z_all
        self.A = A
        self._factor_normal_equations()

    def _factor_normal_equations(self):
        A = self.A
        while True:
            G = A.T @ A
            # relative ridge keeps borderline supports (few distinct atoms) solvable
            G += np.eye(G.shape[0]) * (1e-13 * np.trace(G))
            try:
                self._cho = cho_factor(G)
                self.A = A
                self.degree = A.shape[1] - 1
                return
            except np.linalg.LinAlgError:
                if A.shape[1] == 1:
                    raise RegressionRankError(
                        "normal equations singular at degree 0"
                    ) from None
                A = A[:, :-1]

    def coefficients(self, target: np.ndarray) -> np.ndarray:
        # rows outside the band are zero in A, so they drop out of the fit
        return cho_solve(self._cho, self.A.T @ np.where(self._mask, target, 0.0))

    def fitted(self, target: np.ndarray) -> np.ndarray:
        """Fitted values at every particle, band-clamped for excluded ones."""
        return self._horner(self.coefficients(target), self._z_all)

    def evaluate(self, coef: np.ndarray, x_new) -> np.ndarray:
        x_cl = np.clip(np.asarray(x_new, dtype=float), self.x_lo, self.x_hi)
        return self._horner(coef, (x_cl - self.xm) / self.xs)

    def _horner(self, coef, z):
        out = np.zeros_like(z, dtype=float)
        for c in coef[::-1]:
            out = out * z + c
        return out

    def value_std_error(self, coef: np.ndarray, target: np.ndarray, x_new) -> float:
        """OLS standard error of the fitted value at a single point."""
        resid = np.where(self._mask, target - self.A @ coef, 0.0)
        dof = max(self.n_kept - (self.degree + 1), 1)
        s2 = float(resid @ resid) / dof
        z = (np.clip(float(x_new), self.x_lo, self.x_hi) - self.xm) / self.xs
        phi = np.array([z**j for j in range(self.degree + 1)])
        var = float(phi @ cho_solve(self._cho, phi)) * s2
        return float(np.sqrt(max(var, 0.0)))


def fit_eval(x: np.ndarray, target: np.ndarray, degree: int) -> np.ndarray:
    """One-shot convenience: fitted values of target regressed on poly(x)."""
    fit = PolyFit(x, degree)
    return fit.evaluate(fit.coefficients(target), x)


def _raw_coefficients(fit: PolyFit, coef: np.ndarray, degree: int) -> np.ndarray:
    """Standardized-basis coefficients expanded to raw monomials in x."""
    lin = np.array([-fit.xm / fit.xs, 1.0 / fit.xs])
    raw = np.zeros(degree + 1)
    basis = np.array([1.0])
    for j, c in enumerate(coef):
        raw[: basis.size] += c * basis
        if j < coef.size - 1:
            basis = np.polynomial.polynomial.polymul(basis, lin)
    return raw


class FitTable:
    """Per-step fitted state functions y_k(.), stored as raw monomial rows.

    The compact representation lets Picard feed the previous sweep's
    conditional-expectation functions back into the forward simulation and
    blend successive iterates coefficient-wise. Evaluation clamps the state
    to the per-step fitted band before applying the polynomial.
    """

    def __init__(self, n_times: int, degree: int):
        self.coefs = np.zeros((n_times, degree + 1))
        self.x_lo = np.full(n_times, -np.inf)
        self.x_hi = np.full(n_times, np.inf)

    def set_step(self, k: int, fit: PolyFit, coef: np.ndarray):
        raw = _raw_coefficients(fit, coef, fit.degree)
        self.coefs[k, :] = 0.0
        self.coefs[k, : raw.size] = raw
        self.x_lo[k] = fit.x_lo
        self.x_hi[k] = fit.x_hi

    def eval(self, k: int, x) -> np.ndarray:
        x_cl = np.clip(np.asarray(x, dtype=float), self.x_lo[k], self.x_hi[k])
        out = np.zeros_like(x_cl)
        for c in self.coefs[k, ::-1]:
            out = out * x_cl + c
        return out

    def eval_along(self, x_paths) -> np.ndarray:
        out = np.empty_like(x_paths)
        for k in range(self.coefs.shape[0]):
            out[:, k] = self.eval(k, x_paths[:, k])
        return out

"""Game models: Hamiltonian, its derivatives, optimal control and running cost.

A model is the tuple (H, first/second derivatives, measure derivative,
optimal control map, running cost, discount, diffusion). The control map
never sees the measure: drift and cost are separable, so the minimizer
depends on (x, y) only. All callables are pure and take vectorized x/y.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .measures import EmpiricalMeasure


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class HamiltonianModel:
    r: float
    sigma: float
    eval_H: Callable
    dH_dx: Callable
    dH_dy: Callable
    dH_dxx: Callable
    dH_dxy: Callable
    dH_dyy: Callable
    dH_dmu: Callable            # (x, mu, y, x_tilde) -> scalar
    alpha_hat: Callable         # (x, y) -> control
    running_cost: Callable      # (x, mu, a) -> scalar
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.r <= 0:
            raise ModelError("discount rate r must be positive")


@dataclass(frozen=True)
class ModelConstants:
    """Claimed structure constants; the checker certifies them by sampling."""

    ell: float
    kappa: float
    c0: float
    lambda1: float
    lambda2: float
    lambda3: float
    K: float

    def validate(self, r: float) -> None:
        if self.kappa <= self.K / 2:
            raise ModelError(
                f"kappa must exceed K/2: kappa={self.kappa}, K/2={self.K / 2}"
            )
        if self.c0 + r / 2 >= self.kappa:
            raise ModelError(
                f"need C0 + r/2 < kappa: C0={self.c0}, r/2={r / 2}, kappa={self.kappa}"
            )
        if not (self.lambda1 > 0 and self.lambda2 > 0 and self.lambda3 > 0):
            raise ModelError("curvature constants must be positive")
        if -self.lambda1 + self.lambda2 >= -r / 2:
            raise ModelError(
                f"need -lambda1 + lambda2 < -r/2: got {-self.lambda1 + self.lambda2}"
                f" vs {-r / 2}"
            )


def make_lq_model(c_x: float, c_m: float, s: float, r: float) -> HamiltonianModel:
    """Linear-quadratic model: drift = control, cost = 0.5 a^2 + quadratic state costs.

    Minimizing a*y + a^2/2 gives the control -y, hence
    H(x, mu, y) = -y^2/2 + c_x x^2 / 2 + c_m (x - s*mean(mu))^2 / 2.
    """
    if c_x <= 0 or c_m < 0 or not (0.0 <= s <= 1.0) or r <= 0:
        raise ModelError("need c_x > 0, c_m >= 0, s in [0,1], r > 0")
    # monotonicity margin: kappa = min(c_x + c_m - c_m*s/2, 1) must beat c_m*s/2 + r/2
    lhs = c_x + c_m - c_m * s / 2
    rhs = c_m * s / 2 + r / 2
    if lhs <= rhs:
        raise ModelError(
            "displaced monotonicity fails: need c_x + c_m - c_m*s/2 > c_m*s/2 + r/2 "
            f"({lhs:.6g} <= {rhs:.6g})"
        )

    def f0(x, mu):
        m = mu.mean()
        return 0.5 * c_x * x**2 + 0.5 * c_m * (x - s * m) ** 2

    def eval_H(x, mu, y):
        return -0.5 * y**2 + f0(x, mu)

    def dH_dx(x, mu, y):
        m = mu.mean()
        return c_x * x + c_m * (x - s * m) + 0.0 * y

    def dH_dy(x, mu, y):
        return -y + 0.0 * x

    def dH_dxx(x, mu, y):
        return np.broadcast_to(c_x + c_m, np.broadcast_shapes(np.shape(x), np.shape(y)))

    def dH_dxy(x, mu, y):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y)))

    def dH_dyy(x, mu, y):
        return np.broadcast_to(-1.0, np.broadcast_shapes(np.shape(x), np.shape(y)))

    def dH_dmu(x, mu, y, x_tilde):
        m = mu.mean()
        return -c_m * s * (x - s * m) + 0.0 * np.asarray(x_tilde, dtype=float)

    def alpha_hat(x, y):
        return -y + 0.0 * x

    def running_cost(x, mu, a):
        return 0.5 * a**2 + f0(x, mu)

    return HamiltonianModel(
        r=r, sigma=1.0,
        eval_H=eval_H, dH_dx=dH_dx, dH_dy=dH_dy,
        dH_dxx=dH_dxx, dH_dxy=dH_dxy, dH_dyy=dH_dyy,
        dH_dmu=dH_dmu, alpha_hat=alpha_hat, running_cost=running_cost,
        name="lq", params={"c_x": c_x, "c_m": c_m, "s": s, "r": r},
    )


def lq_constants(c_x: float, c_m: float, s: float, r: float) -> ModelConstants:
    """Structure constants certified by hand for the LQ family (K = r)."""
    kappa = min(c_x + c_m - c_m * s / 2, 1.0)
    ell = max(c_x + c_m, c_m * s, 1.0)
    return ModelConstants(
        ell=ell, kappa=kappa, c0=c_m * s / 2,
        lambda1=min(c_x + c_m, 1.0), lambda2=0.01, lambda3=max(c_x + c_m, 1.0),
        K=r,
    )


def make_perturbed_lq_model(c_x: float, c_m: float, s: float, r: float,
                            eps: float = 0.2) -> HamiltonianModel:
    """LQ model plus a smooth convex state-cost bump eps*(sqrt(1+x^2)-1).

    Keeps the quadratic control cost (so the control map stays -y) while
    breaking exact linearity of the state gradient; used to exercise the
    solvers away from the closed-form family.
    """
    base = make_lq_model(c_x, c_m, s, r)
    if eps < 0:
        raise ModelError("eps must be nonnegative")

    def bump(x):
        return eps * (np.sqrt(1.0 + x**2) - 1.0)

    def dbump(x):
        return eps * x / np.sqrt(1.0 + x**2)

    def d2bump(x):
        return eps * (1.0 + x**2) ** -1.5

    def eval_H(x, mu, y):
        return base.eval_H(x, mu, y) + bump(x)

    def dH_dx(x, mu, y):
        return base.dH_dx(x, mu, y) + dbump(x)

    def dH_dxx(x, mu, y):
        return base.dH_dxx(x, mu, y) + d2bump(x) + 0.0 * np.asarray(x, dtype=float)

    def running_cost(x, mu, a):
        return base.running_cost(x, mu, a) + bump(x)

    return HamiltonianModel(
        r=r, sigma=1.0,
        eval_H=eval_H, dH_dx=dH_dx, dH_dy=base.dH_dy,
        dH_dxx=dH_dxx, dH_dxy=base.dH_dxy, dH_dyy=base.dH_dyy,
        dH_dmu=base.dH_dmu, alpha_hat=base.alpha_hat, running_cost=running_cost,
        name="lq_perturbed",
        params={"c_x": c_x, "c_m": c_m, "s": s, "r": r, "eps": eps},
    )


def _fd_step(v) -> float:
    return 1e-4 * (1.0 + abs(float(v)))


def make_model_from_costs(b1: Callable, b0: Callable, f1: Callable, f0: Callable,
                          r: float, sigma: float,
                          search_bracket: tuple[float, float],
                          name: str = "from_costs") -> HamiltonianModel:
    """Build a model from separable drift/cost pieces by scalar minimization.

    b(x, mu, a) = b0(x, mu) + b1(x, a),  f(x, mu, a) = f0(x, mu) + f1(x, a).
    The Hamiltonian minimizes b*y + f over a in the bracket; first
    derivatives come from the envelope theorem, second derivatives from
    centered differences of the first.
    """
    lo, hi = float(search_bracket[0]), float(search_bracket[1])
    if not lo < hi:
        raise ModelError("search bracket must be a nondegenerate interval")
    atol = 1e-10
    edge = max(1e-6 * (hi - lo), 10 * atol)

    # strict convexity of f1(x, .) on the bracket, sampled at construction
    a_grid = np.linspace(lo, hi, 33)
    for x_chk in (-2.0, 0.0, 2.0):
        vals = np.array([f1(x_chk, a) for a in a_grid])
        if np.any(np.diff(vals, 2) <= -1e-10 * (1 + np.abs(vals[1:-1]))):
            raise ModelError(f"f1(x={x_chk}, .) is not convex on the bracket")

    def _minimize_scalar_control(x, y):
        obj = lambda a: b1(x, a) * y + f1(x, a)
        res = minimize_scalar(obj, bounds=(lo, hi), method="bounded",
                              options={"xatol": atol})
        a = float(res.x)
        if a - lo < edge or hi - a < edge:
            raise ModelError(
                f"minimizer {a:.6g} at bracket boundary [{lo}, {hi}]; enlarge the bracket"
            )
        h = _fd_step(a)
        curv = obj(a + h) - 2 * obj(a) + obj(a - h)
        if curv < 0:
            raise ModelError(f"interior local maximum detected at a={a:.6g}")
        return a, float(res.fun)

    def alpha_hat(x, y):
        xs, ys = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        out = np.empty(xs.shape)
        for i in np.ndindex(xs.shape):
            out[i] = _minimize_scalar_control(float(xs[i]), float(ys[i]))[0]
        return out if out.shape else float(out)

    def eval_H(x, mu, y):
        xs, ys = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        out = np.empty(xs.shape)
        for i in np.ndindex(xs.shape):
            out[i] = _minimize_scalar_control(float(xs[i]), float(ys[i]))[1]
        inner = out if out.shape else float(out)
        return inner + b0(x, mu) * y + f0(x, mu)

    def dH_dy(x, mu, y):
        # envelope: dH/dy = b at the minimizer
        a = alpha_hat(x, y)
        return b0(x, mu) + _vec2(b1, x, a)

    def dH_dx(x, mu, y):
        # envelope in x at fixed minimizer, with centered differences on b, f
        a = alpha_hat(x, y)
        xs = np.asarray(x, float)
        h = 1e-4 * (1.0 + np.abs(xs))
        d_b1 = (_vec2(b1, xs + h, a) - _vec2(b1, xs - h, a)) / (2 * h)
        d_f1 = (_vec2(f1, xs + h, a) - _vec2(f1, xs - h, a)) / (2 * h)
        d_b0 = (b0(xs + h, mu) - b0(xs - h, mu)) / (2 * h)
        d_f0 = (f0(xs + h, mu) - f0(xs - h, mu)) / (2 * h)
        return (d_b0 + d_b1) * y + d_f0 + d_f1

    def _second(fn, wrt):
        def deriv(x, mu, y):
            if wrt == "x":
                h = 1e-4 * (1.0 + np.abs(np.asarray(x, float)))
                return (fn(x + h, mu, y) - fn(x - h, mu, y)) / (2 * h)
            h = 1e-4 * (1.0 + np.abs(np.asarray(y, float)))
            return (fn(x, mu, y + h) - fn(x, mu, y - h)) / (2 * h)
        return deriv

    def dH_dmu(x, mu, y, x_tilde):
        # finite-dimensional projection: n * d/d(atom) of H, atom moved to x_tilde
        atoms = mu.atoms
        idx = int(np.argmin(np.abs(atoms - x_tilde)))
        h = _fd_step(atoms[idx])
        up = atoms.copy(); up[idx] += h
        dn = atoms.copy(); dn[idx] -= h
        mu_up, mu_dn = EmpiricalMeasure(up), EmpiricalMeasure(dn)
        return atoms.size * (eval_H(x, mu_up, y) - eval_H(x, mu_dn, y)) / (2 * h)

    def running_cost(x, mu, a):
        return f0(x, mu) + _vec2(f1, x, a)

    return HamiltonianModel(
        r=r, sigma=sigma,
        eval_H=eval_H, dH_dx=dH_dx, dH_dy=dH_dy,
        dH_dxx=_second(dH_dx, "x"), dH_dxy=_second(dH_dx, "y"),
        dH_dyy=_second(dH_dy, "y"),
        dH_dmu=dH_dmu, alpha_hat=alpha_hat, running_cost=running_cost,
        name=name,
    )


def _vec2(fn, x, a):
    xs, as_ = np.broadcast_arrays(np.asarray(x, float), np.asarray(a, float))
    if xs.shape == ():
        return fn(float(xs), float(as_))
    out = np.empty(xs.shape)
    for i in np.ndindex(xs.shape):
        out[i] = fn(float(xs[i]), float(as_[i]))
    return out


MODEL_REGISTRY: dict[str, Callable] = {}


def register_model(name: str, builder: Callable) -> None:
    MODEL_REGISTRY[name] = builder


def build_model(name: str, params: dict, r: float) -> HamiltonianModel:
    if name == "lq":
        return make_lq_model(params["c_x"], params["c_m"], params["s"], r)
    if name == "lq_perturbed":
        return make_perturbed_lq_model(
            params["c_x"], params["c_m"], params["s"], r, params.get("eps", 0.2)
        )
    if name in MODEL_REGISTRY:
        return MODEL_REGISTRY[name](params=params, r=r)
    raise ModelError(f"unknown model '{name}'")

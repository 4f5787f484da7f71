"""Core particle machinery for the discounted infinite-horizon FBSDE systems.

The infinite horizon is truncated at T with exp(-r T) <= tail_tol and a
zero terminal costate; discounting damps the terminal error and the
horizon-doubling check quantifies it. Conditional expectations in the
backward recursion use global polynomial least squares. Coupled systems
are solved by Picard iteration of forward/backward sweeps, optionally
wrapped in the homotopy continuation whose single step is the input map
contracting at rate 1/2 in the discounted norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .measures import LawFlow, flow_distance
from .noise import NoiseBundle, make_noise
from .regression import FitTable, PolyFit


class EngineError(RuntimeError):
    pass


class GridError(EngineError):
    pass


class SolverDivergedError(EngineError):
    def __init__(self, step, message=""):
        super().__init__(message or f"forward state diverged at step {step}")
        self.step = step


class PicardError(EngineError):
    def __init__(self, residuals, message=""):
        super().__init__(message or
                         f"Picard iteration failed to converge; residuals {residuals}")
        self.residuals = residuals


class ContinuationError(EngineError):
    def __init__(self, lam, residuals):
        super().__init__(f"continuation fixed point failed at lambda={lam:.4f}; "
                         f"residuals {residuals}")
        self.lam = lam
        self.residuals = residuals


class MeanFieldError(EngineError):
    def __init__(self, trace):
        super().__init__(f"mean-field iteration did not converge; distance trace {trace}")
        self.trace = trace


class TimeGrid:
    """Uniform grid on [0, T] with the discount rate used for weighting."""

    __slots__ = ("dt", "n_steps", "r", "_times")

    def __init__(self, dt: float, n_steps: int, r: float):
        if dt <= 0 or n_steps < 1:
            raise GridError("need dt > 0 and at least one step")
        self.dt = float(dt)
        self.n_steps = int(n_steps)
        self.r = float(r)
        self._times = np.arange(self.n_steps + 1) * self.dt

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps

    def times(self) -> np.ndarray:
        return self._times

    def index_of(self, t: float) -> int:
        k = int(round(t / self.dt))
        if abs(k * self.dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= k <= self.n_steps:
            raise GridError(f"time {t} is not on the grid")
        return k

    def __repr__(self):
        return f"TimeGrid(dt={self.dt}, n_steps={self.n_steps}, T={self.horizon})"


def build_grid(r: float, tail_tol: float, dt: float) -> TimeGrid:
    """Smallest horizon T = n*dt with exp(-r T) <= tail_tol."""
    if not 0 < tail_tol <= 1:
        raise GridError("tail_tol must lie in (0, 1]")
    if r <= 0 or dt <= 0:
        raise GridError("need r > 0 and dt > 0")
    n = max(1, math.ceil(-math.log(tail_tol) / (r * dt) - 1e-12))
    if n > 10**7:
        raise GridError(f"grid would need {n} steps; configuration unreasonable")
    return TimeGrid(dt=dt, n_steps=n, r=r)


def weighted_norm_sq(values: np.ndarray, grid: TimeGrid, K: float) -> float:
    """Particle average of the left-rule quadrature of exp(-K t) |v_t|^2 dt."""
    v = np.asarray(values)
    if v.ndim != 2 or v.shape[1] < grid.n_steps:
        raise EngineError(f"values shape {v.shape} does not cover the grid")
    if not np.all(np.isfinite(v)):
        raise EngineError("NaN/inf in weighted norm input")
    w = np.exp(-K * grid.times()[: grid.n_steps])
    per_step = np.mean(v[:, : grid.n_steps] ** 2, axis=0)
    return float(np.sum(w * per_step) * grid.dt)


def pair_norm(dx: np.ndarray, dy: np.ndarray, grid: TimeGrid, K: float) -> float:
    return math.sqrt(weighted_norm_sq(dx, grid, K) + weighted_norm_sq(dy, grid, K))


@dataclass
class SolverConfig:
    n_particles: int = 2**14
    regression_degree: int = 3
    picard_tol: float = 1e-6
    picard_max_iters: int = 60
    picard_damping: float = 1.0
    continuation_enabled: bool = False
    mf_damping: float = 0.5
    mf_tol: float = 1e-7
    mf_max_iters: int = 40
    tail_tol: float = math.exp(-6)
    seed: int = 7

    def __post_init__(self):
        if self.picard_tol <= 0:
            raise EngineError("picard_tol must be positive")
        if not 0 < self.mf_damping <= 1:
            raise EngineError("mf_damping must lie in (0, 1]")
        if not 0 < self.picard_damping <= 1:
            raise EngineError("picard_damping must lie in (0, 1]")


@dataclass
class PathEnsemble:
    """Discrete-time particle paths of (X, Y, Z) plus the driving increments."""

    x_paths: np.ndarray
    y_paths: np.ndarray
    z_paths: np.ndarray
    brownian_increments: np.ndarray
    seed: int
    stream_tag: str
    grid: TimeGrid
    y0_fit: "StepFit | None" = None
    y_fit_table: FitTable | None = None
    picard_residuals: list = field(default_factory=list)

    def validate(self):
        for name in ("x_paths", "y_paths", "z_paths"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise EngineError(f"non-finite entries in {name}")

    @property
    def n_particles(self) -> int:
        return self.x_paths.shape[0]

    def law_flow(self) -> LawFlow:
        return LawFlow.from_paths(self.x_paths)


class StepFit:
    """A frozen per-step regression: evaluable function plus its OLS error."""

    def __init__(self, fit: PolyFit, coef: np.ndarray, target: np.ndarray):
        self._fit = fit
        self.coef = coef
        self._target = target

    def __call__(self, x_new):
        return self._fit.evaluate(self.coef, x_new)

    def std_error_at(self, x_new) -> float:
        return self._fit.value_std_error(self.coef, self._target, x_new)


def _alloc(n, n_times):
    return np.zeros((n, n_times), order="F")


def simulate_forward(drift, y_feedback, law_flow, grid: TimeGrid,
                     initial_sample: np.ndarray, noise: NoiseBundle,
                     sigma: float = 1.0, divergence_bound: float = 1e8) -> np.ndarray:
    """Euler-Maruyama sweep X_{k+1} = X_k + drift(k, X_k, mu_k, Y_k) dt + sigma dB_k.

    y_feedback may be a (particle, step) array of exogenous costate values
    or a per-step map (FitTable) evaluated at the current state.
    """
    n = initial_sample.size
    N = grid.n_steps
    X = _alloc(n, N + 1)
    X[:, 0] = initial_sample
    dt = grid.dt
    dB = noise.dB
    as_map = isinstance(y_feedback, FitTable)
    for k in range(N):
        mu_k = law_flow[k] if law_flow is not None else None
        if y_feedback is None:
            y_k = 0.0
        elif as_map:
            y_k = y_feedback.eval(k, X[:, k])
        else:
            y_k = y_feedback[:, k]
        b = drift(k, X[:, k], mu_k, y_k)
        X[:, k + 1] = X[:, k] + b * dt + sigma * dB[:, k]
        m = np.abs(X[:, k + 1]).max()
        if not m <= divergence_bound:
            raise SolverDivergedError(k, f"forward state diverged at step {k} (|X|={m})")
    return X


def backward_sweep(x_paths, law_flow, driver, r: float, grid: TimeGrid,
                   noise: NoiseBundle, basis_degree: int,
                   compute_z: bool = True, y_terminal=None,
                   prev_table: FitTable | None = None, damping: float = 1.0,
                   drift=None, sigma: float = 1.0):
    """Regression sweep for Y (and optionally Z) given the forward paths.

    Per step the one-step target Y_{k+1} + (driver - r Y) dt is projected
    onto {1, X_k, ..., X_k^d}; implicitness in Y is resolved by one
    predictor-corrector pass. Z regresses Y_{k+1} dB_k / dt on the same
    basis. Terminal costate is zero unless given.

    When the forward paths were generated with a feedback field prev_table
    and the coupled drift is supplied, the target carries the first-order
    transport correction (Z_k / sigma) * (drift(y) - drift(y_old)) dt.
    Without it, the plain function iteration amplifies stale drift
    intercepts by roughly (driver slope)/r per pass, which diverges on
    discounted infinite horizons; the correction cancels that dependence
    (exactly, for drifts linear in y), making the sweep Newton-like.
    """
    n, n_times = x_paths.shape
    N = grid.n_steps
    dt = grid.dt
    Y = _alloc(n, N + 1)
    Z = _alloc(n, N + 1) if compute_z else None
    if y_terminal is not None:
        Y[:, N] = y_terminal
    dB = noise.dB
    y0_fit = None
    correct = drift is not None and sigma != 0.0
    relax = damping < 1.0
    table = FitTable(N + 1, basis_degree)
    y_next = Y[:, N].copy()
    for k in range(N - 1, -1, -1):
        xk = x_paths[:, k]
        mu_k = law_flow[k] if law_flow is not None else None
        fit = PolyFit(xk, basis_degree)
        if correct or compute_z:
            z_k = fit.fitted(y_next * dB[:, k] / dt)
            if compute_z:
                Z[:, k] = z_k
        if correct:
            y_old = prev_table.eval(k, xk) if prev_table is not None else 0.0
            drift_old = drift(k, xk, mu_k, y_old)

            def eff_driver(y, _k=k, _x=xk, _mu=mu_k, _z=z_k, _b0=drift_old):
                return (driver(_k, _x, _mu, y)
                        + (_z / sigma) * (drift(_k, _x, _mu, y) - _b0))
        else:
            def eff_driver(y, _k=k, _x=xk, _mu=mu_k):
                return driver(_k, _x, _mu, y)

        target = y_next + (eff_driver(y_next) - r * y_next) * dt
        y_hat = fit.evaluate(fit.coefficients(target), xk)
        target = y_next + (eff_driver(y_hat) - r * y_hat) * dt
        coef = fit.coefficients(target)
        y_new = fit.evaluate(coef, xk)
        if relax and prev_table is not None:
            blended = (1.0 - damping) * prev_table.eval(k, xk) + damping * y_new
            coef = fit.coefficients(blended)
            y_new = fit.evaluate(coef, xk)
        Y[:, k] = y_new
        table.set_step(k, fit, coef)
        if k == 0:
            y0_fit = StepFit(fit, coef, target)
        y_next = y_new
    if not np.all(np.isfinite(Y)):
        raise EngineError("backward sweep produced non-finite costate")
    return Y, Z, y0_fit, table


def z_sweep(x_paths, y_paths, grid: TimeGrid, noise: NoiseBundle,
            basis_degree: int) -> np.ndarray:
    """Volatility extraction alone, for solves that skipped it during Picard."""
    n = x_paths.shape[0]
    N = grid.n_steps
    Z = _alloc(n, N + 1)
    dB = noise.dB
    for k in range(N):
        fit = PolyFit(x_paths[:, k], basis_degree)
        Z[:, k] = fit.fitted(y_paths[:, k + 1] * dB[:, k] / grid.dt)
    return Z


def solve_coupled(drift, driver, r: float, grid: TimeGrid, initial_sample,
                  noise: NoiseBundle, cfg: SolverConfig, law_flow=None,
                  sigma: float = 1.0, y_warm: FitTable | None = None,
                  norm_K=None, stream_tag: str = "coupled") -> PathEnsemble:
    """Picard iteration of forward/backward sweeps for one coupled FBSDE.

    The forward pass feeds back the previous iterate's regressed costate
    functions evaluated at the current state; the backward sweep carries
    the transport correction that cancels first-order dependence on the
    stale feedback field. Stops when successive (X, Y) iterates differ by
    at most picard_tol in the exp(-K t)-weighted norm.
    """
    K = grid.r if norm_K is None else norm_K
    table = y_warm
    X_prev = None
    Y_prev = None
    Z = None
    y0_fit = None
    residuals = []
    for it in range(cfg.picard_max_iters):
        X = simulate_forward(drift, table, law_flow, grid, initial_sample, noise, sigma)
        Y, Z, y0_fit, table = backward_sweep(
            X, law_flow, driver, r, grid, noise, cfg.regression_degree,
            compute_z=True, prev_table=table, damping=cfg.picard_damping,
            drift=drift, sigma=sigma)
        if X_prev is not None:
            res = pair_norm(X - X_prev, Y - Y_prev, grid, K)
            residuals.append(res)
            if res <= cfg.picard_tol:
                X_prev, Y_prev = X, Y
                break
        X_prev, Y_prev = X, Y
    else:
        raise PicardError(residuals)
    ens = PathEnsemble(
        x_paths=X_prev, y_paths=Y_prev, z_paths=Z,
        brownian_increments=noise.dB, seed=noise.seed, stream_tag=stream_tag,
        grid=grid, y0_fit=y0_fit, y_fit_table=table, picard_residuals=residuals)
    ens.validate()
    return ens


def delta0(kappa: float, K: float, ell: float) -> float:
    """Largest homotopy step with a guaranteed 1/2 contraction ratio."""
    if kappa <= K / 2:
        raise EngineError(f"need kappa > K/2 (kappa={kappa}, K={K})")
    if ell <= 0:
        raise EngineError("ell must be positive")
    return (2 * kappa - K) / (3 * kappa + 11 * ell)


def _eval_on_paths(fn, x, y, grid):
    out = np.empty_like(x)
    for k in range(grid.n_steps + 1):
        out[:, k] = fn(k, x[:, k], y[:, k])
    return out


def phi_map(input_xy, lambda0: float, delta: float, phi_proc, psi_proc,
            G, F, kappa: float, grid: TimeGrid, initial_sample,
            noise: NoiseBundle, cfg: SolverConfig, sigma: float = 1.0,
            norm_K=None, y_warm=None) -> PathEnsemble:
    """One application of the continuation input map.

    Solves the level-lambda0 system whose data are the frozen input pair
    (x, y): drift lambda0*G - kappa(1-lambda0)*Y + delta*(G(input)+kappa*y_in) + phi,
    driver lambda0*F + kappa(1-lambda0)*X + delta*(F(input)-kappa*x_in) + psi.
    At delta = 0 the input is ignored; at the fixed point the output solves
    the level (lambda0 + delta) system.
    """
    if not 0 <= lambda0 < 1 or delta < 0 or lambda0 + delta > 1 + 1e-12:
        raise EngineError(f"invalid homotopy parameters lambda0={lambda0}, delta={delta}")
    x_in, y_in = input_xy
    n = initial_sample.size
    n_times = grid.n_steps + 1
    C = np.zeros((n, n_times), order="F")
    D = np.zeros((n, n_times), order="F")
    if delta > 0:
        C += delta * (_eval_on_paths(G, x_in, y_in, grid) + kappa * y_in)
        D += delta * (_eval_on_paths(F, x_in, y_in, grid) - kappa * x_in)
    if phi_proc is not None:
        C += phi_proc
    if psi_proc is not None:
        D += psi_proc

    def drift(k, x, mu, y):
        return lambda0 * G(k, x, y) - kappa * (1 - lambda0) * y + C[:, k]

    def driver(k, x, mu, y):
        return lambda0 * F(k, x, y) + kappa * (1 - lambda0) * x + D[:, k]

    return solve_coupled(drift, driver, 0.0, grid, initial_sample, noise, cfg,
                         law_flow=None, sigma=sigma, y_warm=y_warm,
                         norm_K=norm_K, stream_tag="phi-map")


def solve_fbsde_continuation(G, F, initial_sample, grid: TimeGrid, constants,
                             cfg: SolverConfig, noise: NoiseBundle,
                             sigma: float = 1.0, norm_K=None,
                             y_warm=None) -> PathEnsemble:
    """Solve dX = G dt + sigma dB, dY = -F dt + Z dB, X_0 given, on the grid.

    G and F are (k, x, y) -> array with any measure dependence pre-bound.
    With continuation disabled this is a single Picard solve at lambda = 1;
    otherwise lambda marches from 0 to 1 in ceil(1/delta0) equal steps,
    iterating the input map to its fixed point at each step with warm starts.
    """
    K = grid.r if norm_K is None else norm_K
    if not cfg.continuation_enabled:
        return solve_coupled(
            lambda k, x, mu, y: G(k, x, y),
            lambda k, x, mu, y: F(k, x, y),
            0.0, grid, initial_sample, noise, cfg,
            law_flow=None, sigma=sigma, y_warm=y_warm, norm_K=K,
            stream_tag="picard-direct")

    d0 = delta0(constants.kappa, K, constants.ell)
    n_lam = math.ceil(1.0 / d0 - 1e-12)
    step = 1.0 / n_lam
    kap = constants.kappa

    # base case: the linear kappa-coupled system (delta = 0 ignores the input)
    n = initial_sample.size
    zeros = _alloc(n, grid.n_steps + 1)
    cur = phi_map((zeros, zeros), 0.0, 0.0, None, None, G, F, kap, grid,
                  initial_sample, noise, cfg, sigma=sigma, norm_K=K)
    lam = 0.0
    for _ in range(n_lam):
        history = []
        for _ in range(cfg.picard_max_iters):
            nxt = phi_map((cur.x_paths, cur.y_paths), lam, step, None, None,
                          G, F, kap, grid, initial_sample, noise, cfg,
                          sigma=sigma, norm_K=K, y_warm=cur.y_fit_table)
            res = pair_norm(nxt.x_paths - cur.x_paths, nxt.y_paths - cur.y_paths,
                            grid, K)
            history.append(res)
            cur = nxt
            if res <= cfg.picard_tol:
                break
        else:
            raise ContinuationError(lam, history)
        lam = min(lam + step, 1.0)
    return cur


@dataclass
class MeanFieldSolution:
    ensemble: PathEnsemble
    law_flow: LawFlow
    mf_trace: list
    picard_residuals: list
    converged: bool
    grid: TimeGrid

    @property
    def initial_measure(self):
        return self.law_flow[0]


def _frozen_drivers(model, law):
    def G(k, x, y, _law=law):
        return model.dH_dy(x, _law[k], y)

    def F(k, x, y, _law=law):
        return model.dH_dx(x, _law[k], y)

    return G, F


def solve_mean_field(model, initial_sample, grid: TimeGrid, cfg: SolverConfig,
                     constants=None, noise: NoiseBundle | None = None) -> MeanFieldSolution:
    """Equilibrium solve: outer fixed point on the law flow.

    Starts from the drift-free Brownian flow, alternates a frozen-law FBSDE
    solve with a damped atomwise update of the sorted clouds, and finishes
    with one consistency solve against the converged flow so the returned
    ensemble and flow describe the same frozen system.
    """
    initial_sample = np.asarray(initial_sample, dtype=float)
    if noise is None:
        noise = make_noise(initial_sample.size, grid, cfg.seed)
    zero_drift = lambda k, x, mu, y: 0.0
    X_free = simulate_forward(zero_drift, None, None, grid, initial_sample, noise,
                              model.sigma)
    law = LawFlow.from_paths(X_free)

    trace = []
    picard_residuals = []
    y_warm = None
    converged = False
    for _ in range(cfg.mf_max_iters):
        G, F = _frozen_drivers(model, law)
        Fr = lambda k, x, y, _F=F: _F(k, x, y) - model.r * y
        ens = solve_fbsde_continuation(G, Fr, initial_sample, grid, constants,
                                       cfg, noise, sigma=model.sigma,
                                       norm_K=model.r, y_warm=y_warm)
        picard_residuals.append(ens.picard_residuals)
        new_law = LawFlow.from_paths(ens.x_paths)
        relaxed = law.relax_toward(new_law, cfg.mf_damping)
        dist = flow_distance(law, relaxed, grid, K=model.r)
        trace.append(dist)
        law = relaxed
        y_warm = ens.y_fit_table
        if dist <= cfg.mf_tol:
            converged = True
            break
    if not converged:
        raise MeanFieldError(trace)

    G, F = _frozen_drivers(model, law)
    Fr = lambda k, x, y, _F=F: _F(k, x, y) - model.r * y
    ens = solve_fbsde_continuation(G, Fr, initial_sample, grid, constants, cfg,
                                   noise, sigma=model.sigma, norm_K=model.r,
                                   y_warm=y_warm)
    picard_residuals.append(ens.picard_residuals)
    return MeanFieldSolution(ensemble=ens, law_flow=law, mf_trace=trace,
                             picard_residuals=picard_residuals, converged=True,
                             grid=grid)


def solve_pinned(model, x0_list, law_flow: LawFlow, grid: TimeGrid,
                 cfg: SolverConfig, noise: NoiseBundle | None = None,
                 share_noise: bool = False, y_warm=None,
                 n_particles: int | None = None) -> dict:
    """Representative-player solves: point-mass starts against a frozen flow.

    With share_noise the supplied bundle drives every start (needed by the
    flow-property comparison); otherwise each start gets its own stream.
    """
    n = n_particles or cfg.n_particles
    if share_noise and noise is None:
        raise EngineError("share_noise requires an explicit noise bundle")
    G, F = _frozen_drivers(model, law_flow)
    Fr = lambda k, x, y, _F=F: _F(k, x, y) - model.r * y
    out = {}
    for i, x0 in enumerate(x0_list):
        nz = noise if share_noise else make_noise(n, grid, cfg.seed,
                                                  tag=f"pinned-{i}-{x0:.6g}")
        start = np.full(nz.n_particles, float(x0))
        out[float(x0)] = solve_coupled(
            lambda k, x, mu, y: G(k, x, y),
            lambda k, x, mu, y: Fr(k, x, y),
            0.0, grid, start, nz, cfg, law_flow=None, sigma=model.sigma,
            norm_K=model.r, y_warm=y_warm, stream_tag=nz.tag)
    return out


def ensemble_stats(ens: PathEnsemble) -> np.ndarray:
    """Columns t, mean X, var X, mean Y, var Y, mean Z."""
    t = ens.grid.times()
    return np.column_stack([
        t,
        ens.x_paths.mean(axis=0), ens.x_paths.var(axis=0),
        ens.y_paths.mean(axis=0), ens.y_paths.var(axis=0),
        ens.z_paths.mean(axis=0),
    ])

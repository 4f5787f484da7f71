"""Sampling-based certification of a model's claimed structure constants.

The standing inequalities are quantified over all states, costates and
measures; we certify them on a configured box and report worst-case
margins with witnesses. Failures are recorded, never raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .measures import EmpiricalMeasure, w2_distance
from .models import HamiltonianModel, ModelConstants
from .noise import stream


@dataclass
class AssumptionRecord:
    assumption: str
    n_samples: int
    worst_margin: float
    passed: bool
    witness: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "assumption": self.assumption,
            "n_samples": self.n_samples,
            "worst_margin": self.worst_margin,
            "pass": self.passed,
            "witness": self.witness,
        }


@dataclass
class AssumptionReport:
    records: list

    @property
    def passed(self) -> bool:
        return all(rec.passed for rec in self.records)

    def record(self, name: str) -> AssumptionRecord:
        for rec in self.records:
            if rec.assumption == name:
                return rec
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {"pass": self.passed, "records": [r.as_dict() for r in self.records]}


def _sample_tuples(box, n_samples, seed, n_atoms=8):
    gen = stream(seed, "assumption-check")
    x_lo, x_hi = box.get("x", (-6.0, 6.0))
    y_lo, y_hi = box.get("y", (-6.0, 6.0))
    for _ in range(n_samples):
        x, xp = gen.uniform(x_lo, x_hi, size=2)
        y, yp = gen.uniform(y_lo, y_hi, size=2)
        mu = EmpiricalMeasure(gen.uniform(x_lo, x_hi, size=n_atoms))
        nup = EmpiricalMeasure(gen.uniform(x_lo, x_hi, size=n_atoms))
        yield float(x), float(xp), float(y), float(yp), mu, nup


def _witness(x, xp, y, yp, mu, nup):
    return {
        "x": x, "x_prime": xp, "y": y, "y_prime": yp,
        "mu_mean": mu.mean(), "nu_mean": nup.mean(),
        "w2": w2_distance(mu, nup),
    }


def check_assumptions(model: HamiltonianModel, claimed: ModelConstants,
                      n_samples: int = 200, box: dict | None = None,
                      seed: int = 0) -> AssumptionReport:
    """Certify Lipschitz, displaced-monotonicity, curvature and growth claims.

    Margins are 'slack remaining': nonnegative means the sampled tuple
    satisfies the claimed inequality.
    """
    box = box or {}
    records = []

    # scalar constant relations
    records.append(AssumptionRecord(
        "kappa_gt_K_half", 1, claimed.kappa - claimed.K / 2,
        claimed.kappa > claimed.K / 2, {}))
    records.append(AssumptionRecord(
        "c0_plus_r_half_lt_kappa", 1, claimed.kappa - claimed.c0 - model.r / 2,
        claimed.c0 + model.r / 2 < claimed.kappa, {}))
    records.append(AssumptionRecord(
        "curvature_gap", 1, -model.r / 2 - (-claimed.lambda1 + claimed.lambda2),
        -claimed.lambda1 + claimed.lambda2 < -model.r / 2, {}))

    lip_margin, lip_wit = np.inf, {}
    mono_margin, mono_wit = np.inf, {}
    curv_margin, curv_wit = np.inf, {}
    samples = list(_sample_tuples(box, n_samples, seed))

    for x, xp, y, yp, mu, nup in samples:
        xh, yh = x - xp, y - yp
        w2 = w2_distance(mu, nup)
        scale = abs(xh) + abs(yh) + w2

        dxh = model.dH_dx(x, mu, y) - model.dH_dx(xp, nup, yp)
        dyh = model.dH_dy(x, mu, y) - model.dH_dy(xp, nup, yp)
        m = claimed.ell * scale - max(abs(dxh), abs(dyh))
        if m < lip_margin:
            lip_margin, lip_wit = m, _witness(x, xp, y, yp, mu, nup)

        lhs = -xh * dxh + yh * dyh
        m = (-claimed.kappa * (xh**2 + yh**2) + claimed.c0 * w2**2) - lhs
        if m < mono_margin:
            mono_margin, mono_wit = m, _witness(x, xp, y, yp, mu, nup)

        hxx = float(model.dH_dxx(x, mu, y))
        hxy = float(model.dH_dxy(x, mu, y))
        hyy = float(model.dH_dyy(x, mu, y))
        m = min(
            -claimed.lambda1 - hyy,          # Hyy <= -lambda1
            hxx - claimed.lambda1,           # Hxx >= lambda1
            claimed.lambda2 - abs(hxy),      # |Hxy| <= lambda2
            claimed.lambda3 - abs(hxx),
            claimed.lambda3 - abs(hyy),
        )
        if m < curv_margin:
            curv_margin, curv_wit = m, _witness(x, x, y, y, mu, mu)

    records.append(AssumptionRecord(
        "lipschitz_first_derivatives", n_samples, float(lip_margin),
        lip_margin >= 0, lip_wit))
    records.append(AssumptionRecord(
        "displaced_monotonicity", n_samples, float(mono_margin),
        mono_margin >= 0, mono_wit))
    records.append(AssumptionRecord(
        "curvature_bounds", n_samples, float(curv_margin),
        curv_margin >= 0, curv_wit))

    records.append(_growth_record(model, box, seed))
    return AssumptionReport(records)


def _growth_record(model, box, seed, slack=0.15):
    """Quadratic growth of H and linear growth of its measure derivative.

    Regresses log of the max absolute value per radius shell against log
    radius over one decade of large radii.
    """
    gen = stream(seed, "assumption-growth")
    x_hi = max(abs(v) for v in box.get("x", (-6.0, 6.0)))
    radii = np.geomspace(10 * x_hi, 100 * x_hi, 8)
    mu0 = EmpiricalMeasure(gen.uniform(-1.0, 1.0, size=8))

    h_max, g_max = [], []
    for R in radii:
        vals_h, vals_g = [], []
        for _ in range(16):
            u = gen.uniform(-1.0, 1.0, size=2)
            u /= max(np.hypot(*u), 1e-12)
            x, y = R * u
            vals_h.append(abs(float(model.eval_H(x, mu0, y))))
            vals_g.append(abs(float(model.dH_dmu(x, mu0, y, mu0.atoms[0]))))
        h_max.append(max(vals_h) + 1e-300)
        g_max.append(max(vals_g) + 1e-300)

    slope_h = np.polyfit(np.log(radii), np.log(h_max), 1)[0]
    slope_g = np.polyfit(np.log(radii), np.log(g_max), 1)[0]
    margin = min((2.0 + slack) - slope_h, (1.0 + slack) - slope_g)
    return AssumptionRecord(
        "growth_bounds", len(radii) * 16, float(margin), margin >= 0,
        {"slope_H": float(slope_h), "slope_dH_dmu": float(slope_g)})

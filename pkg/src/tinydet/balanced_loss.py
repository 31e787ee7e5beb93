"""Adaptive L1/L2 regression loss with a learnable logistic transition.

The loss on an absolute error eps is

    L(eps) = a(eps) * eps^2 + (1 - a(eps)) * eps,
    a(eps) = sigma(k * (eps - delta)),

with slope k > 0 and threshold delta > 0.  A ``swap_weights`` variant uses
(1-a) on the quadratic term instead, which makes the loss quadratic for small
errors and linear for large ones (Huber-like outlier suppression).

All scalar math here is float64.  Besides the loss itself the module provides
closed-form gradients in eps, k and delta, the slope bound implied by a
2-Lipschitz gradient, the closed-form convexity intervals, and a numeric
verifier that cross-checks those formulas against finite differences and
records any mismatch with the commonly stated phase behavior.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, _make

__all__ = [
    "DCLossParams",
    "TheoremReport",
    "alpha",
    "dcloss_value",
    "dcloss_grad",
    "lipschitz_bound",
    "convexity_region",
    "verify_theorem1",
    "smooth_l1",
    "dcloss_term",
    "smooth_l1_term",
]


@dataclass
class DCLossParams:
    """Transition slope k and threshold delta, optionally learnable."""

    k: float = 10.0
    delta: float = 0.15
    learnable: bool = False
    swap_weights: bool = False
    grad_k: float = 0.0
    grad_delta: float = 0.0

    MIN_VALUE = 1e-3

    def __post_init__(self):
        if not (self.k > 0 and self.delta > 0):
            raise ValueError(f"k and delta must be positive, got k={self.k}, delta={self.delta}")

    def zero_grad(self):
        self.grad_k = 0.0
        self.grad_delta = 0.0

    def project(self):
        """Clamp k and delta to stay strictly positive after an update."""
        self.k = max(self.k, self.MIN_VALUE)
        self.delta = max(self.delta, self.MIN_VALUE)


def _sigma(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    p = x >= 0
    out[p] = 1.0 / (1.0 + np.exp(-x[p]))
    e = np.exp(x[~p])
    out[~p] = e / (1.0 + e)
    if out.ndim == 0:
        return float(out)
    return out


def alpha(eps, params: DCLossParams):
    """Logistic transition weight a(eps) = sigma(k (eps - delta)), in (0,1)."""
    return _sigma(params.k * (np.asarray(eps, dtype=np.float64) - params.delta))


def _terms(eps, params: DCLossParams):
    """Quadratic/linear term split honoring swap_weights: returns (a, A, B)
    with L = a*A + (1-a)*B."""
    eps = np.asarray(eps, dtype=np.float64)
    a = alpha(eps, params)
    if params.swap_weights:
        return a, eps, eps * eps
    return a, eps * eps, eps


def dcloss_value(pred, target, params: DCLossParams):
    """Loss for a prediction/target pair (or arrays; mean over all entries)."""
    eps = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    a, qa, qb = _terms(eps, params)
    val = a * qa + (1.0 - a) * qb
    return float(np.mean(val))


def dcloss_grad(eps, params: DCLossParams):
    """Closed-form (dL/deps, dL/dk, dL/ddelta) at error eps (scalar or array).

    With a' = k a (1-a):
      dL/deps  = a A' + (1-a) B' + a'(A - B)
      dL/dk    = (eps - delta) a (1-a) (A - B)
      dL/ddelta= -k a (1-a) (A - B)
    where (A, B) = (eps^2, eps), swapped when swap_weights is set.
    """
    eps = np.asarray(eps, dtype=np.float64)
    a, qa, qb = _terms(eps, params)
    a1 = a * (1.0 - a)
    if params.swap_weights:
        d_qa, d_qb = np.ones_like(eps), 2.0 * eps
    else:
        d_qa, d_qb = 2.0 * eps, np.ones_like(eps)
    diff = qa - qb
    d_eps = a * d_qa + (1.0 - a) * d_qb + params.k * a1 * diff
    d_k = (eps - params.delta) * a1 * diff
    d_delta = -params.k * a1 * diff
    if eps.ndim == 0:
        return float(d_eps), float(d_k), float(d_delta)
    return d_eps, d_k, d_delta


def _second_derivative(eps, params: DCLossParams, h: float = 1e-6):
    """Numeric d2L/deps2 via central differences of the closed-form gradient."""
    lo = np.maximum(np.asarray(eps, dtype=np.float64) - h, 0.0)
    hi = np.asarray(eps, dtype=np.float64) + h
    g_lo, _, _ = dcloss_grad(lo, params)
    g_hi, _, _ = dcloss_grad(hi, params)
    return (np.asarray(g_hi) - np.asarray(g_lo)) / (hi - lo)


def lipschitz_bound(delta: float) -> float:
    """Largest slope k compatible with a 2-Lipschitz gradient: (1/d) sqrt(2/(d^2+1))."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    return (1.0 / delta) * math.sqrt(2.0 / (delta * delta + 1.0))


def convexity_region(params: DCLossParams):
    """Closed-form convexity intervals (0, delta-r) and (delta+r, inf),
    r = sqrt(delta^2 + 2/k^2); empty intervals are dropped."""
    r = math.sqrt(params.delta**2 + 2.0 / params.k**2)
    intervals = []
    if params.delta - r > 0:
        intervals.append((0.0, params.delta - r))
    intervals.append((params.delta + r, math.inf))
    return intervals


@dataclass
class TheoremReport:
    """Numeric audit of the loss's gradient-phase behavior."""

    small_eps_gradient: float = 0.0
    large_eps_gradient_ratio: float = 0.0
    inflection_locations: list = field(default_factory=list)
    lipschitz_bound: float = 0.0
    convexity_intervals: list = field(default_factory=list)
    observed_convexity_intervals: list = field(default_factory=list)
    discrepancy_notes: list = field(default_factory=list)

    def to_json(self) -> str:
        def enc(v):
            if isinstance(v, float) and math.isinf(v):
                return None
            return v

        payload = {
            "small_eps_gradient": self.small_eps_gradient,
            "large_eps_gradient_ratio": self.large_eps_gradient_ratio,
            "inflection_locations": list(self.inflection_locations),
            "lipschitz_bound": self.lipschitz_bound,
            "convexity_intervals": [[enc(lo), enc(hi)] for lo, hi in self.convexity_intervals],
            "observed_convexity_intervals": [
                [enc(lo), enc(hi)] for lo, hi in self.observed_convexity_intervals
            ],
            "discrepancy_notes": list(self.discrepancy_notes),
        }
        return json.dumps(payload, indent=2, sort_keys=True)


# numeric claim often quoted for this loss at delta = 0.15; the verifier
# re-derives the bound from the formula and records any disagreement
_QUOTED_SLOPE_LIMIT = {"delta": 0.15, "claimed": 10.8}


def verify_theorem1(params: DCLossParams, grid_points: int = 2001,
                    small_eps: float = 1e-6, large_eps: float = 1e3) -> TheoremReport:
    """Audit the stated gradient-phase properties against the implemented loss.

    Measures the small/large error gradient limits, scans the numeric second
    derivative for sign changes over (0, delta + 2/k], fills in the slope
    bound and convexity intervals, and records every mismatch between the
    measured behavior and the usual phase narrative ("quadratic for small
    errors, linear for large ones").  Discrepancies are reported, never
    silently patched.
    """
    report = TheoremReport()
    notes = report.discrepancy_notes

    g_small, _, _ = dcloss_grad(small_eps, params)
    report.small_eps_gradient = float(g_small)
    g_large, _, _ = dcloss_grad(large_eps, params)
    report.large_eps_gradient_ratio = float(g_large / (2.0 * large_eps))

    sigma_kd = _sigma(params.k * params.delta)
    expect_small = sigma_kd if not params.swap_weights else 1.0 - sigma_kd

    # measured small-eps slope: a bounded constant, not ~2*eps
    if abs(g_small - expect_small) > 1e-3 * max(1.0, abs(expect_small)):
        notes.append(
            f"small-error gradient {g_small:.6f} deviates from the derived constant "
            f"{expect_small:.6f}"
        )
    if not params.swap_weights:
        if abs(g_small) > 10.0 * small_eps:
            notes.append(
                "stated small-error phase is quadratic (gradient ~ 2*eps -> 0); measured "
                f"gradient tends to the constant {g_small:.6f}"
            )
        if abs(report.large_eps_gradient_ratio - 1.0) < 1e-3:
            notes.append(
                "stated large-error phase is linear (gradient -> 1); measured gradient "
                f"grows as 2*eps (ratio to 2*eps = {report.large_eps_gradient_ratio:.6f})"
            )

    report.lipschitz_bound = lipschitz_bound(params.delta)
    q = _QUOTED_SLOPE_LIMIT
    if abs(params.delta - q["delta"]) < 1e-9:
        formula = lipschitz_bound(q["delta"])
        if abs(formula - q["claimed"]) > 1e-3:
            notes.append(
                f"quoted slope limit k <= {q['claimed']} for delta = {q['delta']} does not "
                f"follow from the bound formula, which gives {formula:.4f}"
            )
    if params.k > report.lipschitz_bound:
        notes.append(
            f"k = {params.k} exceeds the 2-Lipschitz slope bound {report.lipschitz_bound:.4f} "
            f"for delta = {params.delta}"
        )

    report.convexity_intervals = convexity_region(params)

    # second-derivative sign scan over (0, delta + 2/k]
    hi = params.delta + 2.0 / params.k
    grid = np.linspace(hi / grid_points, hi, grid_points)
    d2 = _second_derivative(grid, params)
    signs = np.sign(d2)
    flips = np.nonzero(signs[1:] * signs[:-1] < 0)[0]
    report.inflection_locations = [
        float(0.5 * (grid[i] + grid[i + 1])) for i in flips
    ]

    # empirically observed convex regions on a wider grid
    r = math.sqrt(params.delta**2 + 2.0 / params.k**2)
    wide_hi = max(1.0, 3.0 * (params.delta + r))
    wide = np.linspace(wide_hi / 4000, wide_hi, 4000)
    convex = _second_derivative(wide, params) > 0
    observed = []
    start = None
    for i, c in enumerate(convex):
        if c and start is None:
            start = wide[i]
        elif not c and start is not None:
            observed.append((float(start), float(wide[i - 1])))
            start = None
    if start is not None:
        observed.append((float(start), math.inf))
    report.observed_convexity_intervals = observed

    def covered(x):
        return any(lo <= x <= hi for lo, hi in observed)

    for lo, hi_iv in report.convexity_intervals:
        probe = lo + 0.25 * (min(hi_iv, wide_hi) - lo)
        if 0 < probe < wide_hi and not covered(probe):
            notes.append(
                f"closed-form convexity interval ({lo:.6f}, "
                f"{'inf' if math.isinf(hi_iv) else f'{hi_iv:.6f}'}) is not confirmed by the "
                "numeric second derivative"
            )
            break

    return report


def smooth_l1(pred, target, beta: float = 1.0) -> float:
    """Piecewise quadratic/linear baseline loss with a fixed knee at beta."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    eps = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    val = np.where(eps < beta, 0.5 * eps * eps / beta, eps - 0.5 * beta)
    return float(np.mean(val))


# ---------------------------------------------------------------------------
# autodiff bridges: scalar loss nodes over prediction tensors


def dcloss_term(pred: Tensor, target, params: DCLossParams) -> Tensor:
    """Mean adaptive loss over a prediction tensor vs. a constant target array.

    Backpropagates dL/dpred into the graph; when ``params.learnable`` is set,
    also accumulates mean dL/dk and dL/ddelta into the params' grad fields.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.data.shape:
        raise ValueError(f"dcloss_term: target shape {t.shape} != pred {pred.data.shape}")
    diff = pred.data.astype(np.float64) - t
    eps = np.abs(diff)
    a, qa, qb = _terms(eps, params)
    val = np.asarray(np.mean(a * qa + (1.0 - a) * qb)).astype(pred.data.dtype)
    n = max(eps.size, 1)

    def backward(g):
        d_eps, d_k, d_delta = dcloss_grad(eps, params)
        sign = np.sign(diff)
        pred._accumulate(g * (np.asarray(d_eps) * sign / n))
        if params.learnable:
            params.grad_k += float(g) * float(np.sum(d_k)) / n
            params.grad_delta += float(g) * float(np.sum(d_delta)) / n

    return _make(val, (pred,), backward)


def smooth_l1_term(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 over a prediction tensor vs. a constant target array."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.data.shape:
        raise ValueError(f"smooth_l1_term: target shape {t.shape} != pred {pred.data.shape}")
    diff = pred.data.astype(np.float64) - t
    eps = np.abs(diff)
    val = np.where(eps < beta, 0.5 * eps * eps / beta, eps - 0.5 * beta)
    out = np.asarray(np.mean(val)).astype(pred.data.dtype)
    n = max(eps.size, 1)

    def backward(g):
        d = np.where(eps < beta, eps / beta, 1.0) * np.sign(diff)
        pred._accumulate(g * (d / n))

    return _make(out, (pred,), backward)

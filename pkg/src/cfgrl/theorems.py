"""Exact product policies and brute-force checks of the improvement results.

A product policy tilts a reference policy by a monotone function of its own
advantage, pi(a|s) ~ ref(a|s) * f(A(s, a))**w.  The checks below evaluate
both policies exactly and confirm the return ordering that reweighting
guarantees.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from cfgrl.mdp import (
    TabularMdp,
    TabularPolicy,
    ValueTriple,
    expected_return,
    policy_evaluation,
)

IMPROVEMENT_SLACK = 1e-9
CHEBYSHEV_SLACK = 1e-12


class ZeroMass(ValueError):
    """The tilt annihilated every action the reference supports at some state."""

    def __init__(self, state: int):
        super().__init__(f"normalizer is zero at state {state}")
        self.state = state


# -- optimality functions ---------------------------------------------------


class OptimalityFunction:
    """Non-negative, non-decreasing, bounded map from advantage to weight."""

    upper_bound: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(OptimalityFunction):
    c: float = 1.0

    def __post_init__(self):
        if self.c < 0:
            raise ValueError("constant optimality must be non-negative")

    @property
    def upper_bound(self) -> float:
        return self.c

    def __call__(self, x):
        return np.full(np.shape(x), self.c, dtype=np.float64)


@dataclass(frozen=True)
class IndicatorNonNegAdv(OptimalityFunction):
    upper_bound: float = 1.0

    def __call__(self, x):
        return (np.asarray(x) >= 0).astype(np.float64)


@dataclass(frozen=True)
class ExpClipped(OptimalityFunction):
    """exp(scale * clip(x, -M, M)); clipping keeps f bounded."""

    scale: float = 1.0
    clip: float = 20.0

    def __post_init__(self):
        if self.scale < 0 or self.clip <= 0:
            raise ValueError("ExpClipped needs scale >= 0 and clip > 0")

    @property
    def upper_bound(self) -> float:
        return float(np.exp(self.scale * self.clip))

    def __call__(self, x):
        return np.exp(self.scale * np.clip(np.asarray(x, dtype=np.float64), -self.clip, self.clip))


@dataclass(frozen=True)
class TableLookup(OptimalityFunction):
    """Right-continuous step function: f(x) = values[i] for knots[i] <= x < knots[i+1].

    Below the first knot the function takes `floor`.
    """

    knots: tuple
    values: tuple
    floor: float = 0.0

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if k.shape != v.shape or k.ndim != 1 or k.size == 0:
            raise ValueError("knots and values must be equal-length 1-D sequences")
        if np.any(np.diff(k) <= 0):
            raise ValueError("knots must be strictly increasing")
        if np.any(np.diff(v) < 0) or v[0] < self.floor or self.floor < 0:
            raise ValueError("table values must be non-negative and non-decreasing")

    @property
    def upper_bound(self) -> float:
        return float(self.values[-1])

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        idx = np.searchsorted(np.asarray(self.knots), x, side="right") - 1
        table = np.concatenate([[self.floor], np.asarray(self.values, dtype=np.float64)])
        return table[idx + 1]


# -- product policies -------------------------------------------------------


def tilt(ref: TabularPolicy, weights: np.ndarray, w: float) -> TabularPolicy:
    """pi ~ ref * weights**w with exact per-state normalization."""
    if w < 0:
        raise ValueError("w must be non-negative")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != ref.probs.shape:
        raise ValueError("weight table must match the policy shape")
    unnorm = ref.probs * np.power(weights, w)
    Z = unnorm.sum(axis=1)
    dead = np.flatnonzero(Z <= 0)
    if dead.size:
        raise ZeroMass(int(dead[0]))
    return TabularPolicy(unnorm / Z[:, None])


def product_policy(
    ref: TabularPolicy, values: ValueTriple, f: OptimalityFunction, w: float = 1.0
) -> TabularPolicy:
    return tilt(ref, f(values.adv), w)


@dataclass
class ImprovementReport:
    J_ref: float
    J_new: float
    holds: bool
    # min_s E_{a~pi}[Q_ref(s, a)] - V_ref(s); non-negative for any monotone tilt
    per_state_margin: float = 0.0


def verify_improvement(mdp: TabularMdp, ref: TabularPolicy, f: OptimalityFunction) -> ImprovementReport:
    if np.any(ref.probs <= 0):
        raise ValueError("reference policy must have full support")
    values = policy_evaluation(mdp, ref)
    new = product_policy(ref, values, f, 1.0)
    J_ref = float(mdp.initial_dist @ values.v)
    J_new = expected_return(mdp, new)
    margin = float(np.min(np.einsum("sa,sa->s", new.probs, values.q) - values.v))
    return ImprovementReport(J_ref, J_new, J_new >= J_ref - IMPROVEMENT_SLACK, margin)


@dataclass
class AttenuationReport:
    weights: list
    returns: list
    monotone: bool

    @property
    def min_increment(self) -> float:
        if len(self.returns) < 2:
            return 0.0
        return float(np.min(np.diff(self.returns)))


def _attenuation(mdp: TabularMdp, ref: TabularPolicy, table: np.ndarray, weights) -> AttenuationReport:
    weights = [float(w) for w in weights]
    if any(w < 0 for w in weights) or any(b < a for a, b in zip(weights, weights[1:])):
        raise ValueError("weights must be non-negative and ascending")
    returns = [expected_return(mdp, tilt(ref, table, w)) for w in weights]
    steps = np.diff(returns) if len(returns) > 1 else np.zeros(0)
    return AttenuationReport(weights, returns, bool(np.all(steps >= -IMPROVEMENT_SLACK)))


def verify_attenuation(
    mdp: TabularMdp, ref: TabularPolicy, f: OptimalityFunction, weights
) -> AttenuationReport:
    if np.any(ref.probs <= 0):
        raise ValueError("reference policy must have full support")
    values = policy_evaluation(mdp, ref)
    return _attenuation(mdp, ref, f(values.adv), weights)


# -- Chebyshev sum inequality -----------------------------------------------


@dataclass
class ChebyshevReport:
    lhs: float
    rhs: float
    holds: bool


def chebyshev_check(measure, support, g, h) -> ChebyshevReport:
    """E[g h] >= E[g] E[h] for g, h non-decreasing over the support.

    `g` and `h` are value tables aligned with `support`.
    """
    mu = np.asarray(measure, dtype=np.float64)
    x = np.asarray(support, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if not (mu.shape == x.shape == g.shape == h.shape) or mu.ndim != 1:
        raise ValueError("measure, support, g and h must be aligned 1-D arrays")
    if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-12:
        raise ValueError("measure must be a probability vector")
    order = np.argsort(x, kind="stable")
    xs, gs, hs = x[order], g[order], h[order]
    for name, vals in (("g", gs), ("h", hs)):
        # ties in the support must carry identical values to be a function
        bad = (np.diff(vals) < 0) | ((np.diff(xs) == 0) & (np.diff(vals) != 0))
        if np.any(bad):
            raise ValueError(f"{name} is not non-decreasing over the support")
    lhs = float(np.sum(mu * g * h))
    rhs = float(np.sum(mu * g) * np.sum(mu * h))
    return ChebyshevReport(lhs, rhs, lhs >= rhs - CHEBYSHEV_SLACK)


# -- KL-regularized per-state solution --------------------------------------


@dataclass
class KlReport:
    product_row: np.ndarray
    argmax_row: np.ndarray
    max_gap: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_gap < 1e-3


def kl_objective(p: np.ndarray, ref: np.ndarray, adv: np.ndarray, beta: float) -> np.ndarray:
    """E_p[A] - beta * KL(p || ref), broadcast over leading axes of p."""
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(p > 0, np.log(np.where(p > 0, p, 1.0) / ref), 0.0)
    return np.sum(p * adv, axis=-1) - beta * np.sum(p * logs, axis=-1)


def _grid_argmax(ref, adv, beta, resolution=1e-4):
    n = ref.size
    if n == 1:
        return np.ones(1)
    if n == 2:
        p0 = np.linspace(0.0, 1.0, int(round(1 / resolution)) + 1)
        P = np.stack([p0, 1.0 - p0], axis=1)
        return P[np.argmax(kl_objective(P, ref, adv, beta))]
    # three actions: coarse-to-fine grid search on the 2-simplex
    lo = np.zeros(2)
    hi = np.ones(2)
    step = 0.01
    best = None
    while True:
        a = np.arange(lo[0], hi[0] + step / 2, step)
        b = np.arange(lo[1], hi[1] + step / 2, step)
        A, B = np.meshgrid(a, b, indexing="ij")
        C = 1.0 - A - B
        ok = C >= -1e-15
        P = np.stack([A[ok], B[ok], np.clip(C[ok], 0, None)], axis=1)
        best = P[np.argmax(kl_objective(P, ref, adv, beta))]
        if step <= resolution * 1.0001:
            return best
        lo = np.clip(best[:2] - 2 * step, 0, 1)
        hi = np.clip(best[:2] + 2 * step, 0, 1)
        step = max(step / 10, resolution)


def _constrained_argmax(ref, adv, beta):
    """Maximize the KL-regularized objective over the simplex with SLSQP."""
    def neg(p):
        return -float(kl_objective(np.maximum(p, 1e-300), ref, adv, beta))

    def neg_grad(p):
        return -(adv - beta * (np.log(np.maximum(p, 1e-300) / ref) + 1.0))

    n = ref.size
    with warnings.catch_warnings():
        # SLSQP may step slightly outside the bounds before clipping
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimize.minimize(
            neg, np.full(n, 1.0 / n), jac=neg_grad, method="SLSQP",
            bounds=[(1e-12, 1.0)] * n,
            constraints=[{"type": "eq", "fun": lambda p: p.sum() - 1.0, "jac": lambda p: np.ones(n)}],
            options={"ftol": 1e-14, "maxiter": 1000},
        )
    p = np.clip(res.x, 0.0, None)
    return p / p.sum()


def kl_solution_check(ref_row, adv_row, beta: float) -> KlReport:
    if beta <= 0:
        raise ValueError("beta must be positive")
    ref = np.asarray(ref_row, dtype=np.float64)
    adv = np.asarray(adv_row, dtype=np.float64)
    if np.any(ref <= 0):
        raise ValueError("reference row must have full support")
    logits = np.log(ref) + adv / beta
    logits -= logits.max()
    prod = np.exp(logits)
    prod /= prod.sum()
    if ref.size <= 3:
        best = _grid_argmax(ref, adv, beta)
    else:
        best = _constrained_argmax(ref, adv, beta)
    return KlReport(prod, best, float(np.max(np.abs(prod - best))))

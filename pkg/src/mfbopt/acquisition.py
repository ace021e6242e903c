"""Per-source acquisition scoring and the next-sample proposal.

Cheap (low-fidelity) sources are scored by the exploration part of expected
improvement, the high-fidelity source by plain improvement.  When any
constraint model predicts a violation, the score switches to the negated sum
of violated constraint means, steering the search back toward feasibility.
Scores are divided by the per-source sampling cost and the best
(point, source) pair across sources wins.
"""

from __future__ import annotations

import dataclasses
import itertools
import math

import numpy as np

from .errors import InvalidInputError, ProposalFailureError
from .gp import GpModel
from .numopt import BoxBounds, lbfgs_minimize_batched, sobol_sample
from .types import MfDataset, MixedPoint

__all__ = [
    "AcqContext",
    "compute_incumbents",
    "af_lf",
    "af_hf",
    "af_constrained",
    "composite",
    "propose",
]

_TAU_GUARD = 1e-12
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclasses.dataclass
class AcqContext:
    """Inputs of one acquisition round.

    ``incumbents[j]`` is the best observed objective for source ``j``
    (feasible observations preferred, see :func:`compute_incumbents`),
    ``costs[j]`` the positive per-sample cost, and ``hf`` the index of the
    high-fidelity source.
    """

    objective: GpModel
    constraints: list[GpModel]
    incumbents: np.ndarray
    costs: np.ndarray
    hf: int

    def __post_init__(self):
        self.incumbents = np.atleast_1d(np.asarray(self.incumbents, dtype=float))
        self.costs = np.atleast_1d(np.asarray(self.costs, dtype=float))
        if np.any(self.costs <= 0):
            raise InvalidInputError("sampling costs must be strictly positive")
        if not 0 <= self.hf < self.costs.size:
            raise InvalidInputError("hf label is not a valid source index")

    @property
    def n_sources(self) -> int:
        return self.costs.size


def compute_incumbents(data: MfDataset, n_sources: int) -> np.ndarray:
    """Best observed objective per source, preferring feasible observations.

    An observation is feasible when all its observed constraint values are
    <= 0.  Sources with no feasible observation fall back to their best
    objective regardless of feasibility; sources with no observations at all
    fall back to the global best.
    """
    y_star = np.full(n_sources, np.nan)
    feas = np.all(data.g <= 0.0, axis=1) if data.n_constraints else np.ones(data.n, bool)
    for j in range(n_sources):
        mask = data.source == j
        if np.any(mask & feas):
            y_star[j] = data.y[mask & feas].min()
        elif np.any(mask):
            y_star[j] = data.y[mask].min()
    if np.any(np.isnan(y_star)):
        y_star[np.isnan(y_star)] = data.y.min()
    return y_star


def _normal_pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _exploration_value(y_star, mu, tau):
    """tau * pdf((y* - mu)/tau), with the tau -> 0 guard."""
    tau = np.asarray(tau, dtype=float)
    safe = np.where(tau < _TAU_GUARD, 1.0, tau)
    val = safe * _normal_pdf((y_star - np.asarray(mu)) / safe)
    return np.where(tau < _TAU_GUARD, 0.0, val)


def _af_batch(ctx: AcqContext, x: np.ndarray, t: np.ndarray | None, j: int,
              cost_aware: bool = True, unit: bool = False) -> np.ndarray:
    """Vectorized constrained (optionally cost-scaled) acquisition values."""
    mu, var = ctx.objective.predict_batch(x, t=t, source=j, unit=unit)
    if j == ctx.hf:
        base = ctx.incumbents[j] - mu
    else:
        base = _exploration_value(ctx.incumbents[j], mu, np.sqrt(var))
    if ctx.constraints:
        viol = np.zeros(x.shape[0])
        any_viol = np.zeros(x.shape[0], dtype=bool)
        for cmodel in ctx.constraints:
            mg, _ = cmodel.predict_batch(x, t=t, source=j, unit=unit)
            any_viol |= mg > 0.0
            viol += np.maximum(mg, 0.0)
        base = np.where(any_viol, -viol, base)
    if cost_aware:
        base = base / ctx.costs[j]
    return base


def _single(ctx, u: MixedPoint, j: int, cost_aware: bool) -> float:
    t = np.asarray([u.t], dtype=int).reshape(1, -1)
    return float(_af_batch(ctx, u.x[None, :], t, j, cost_aware=cost_aware)[0])


def af_lf(ctx: AcqContext, u: MixedPoint, j: int) -> float:
    """Exploration value of sampling a low-fidelity source at ``u``.

    ``tau_j(u) * pdf((y*_j - mu_j(u)) / tau_j(u))``; returns 0 when the
    predictive deviation collapses below the guard.
    """
    if j == ctx.hf:
        raise InvalidInputError("af_lf is for low-fidelity sources only")
    mu, var = ctx.objective.predict_batch(
        u.x[None, :], t=np.asarray([u.t], dtype=int).reshape(1, -1), source=j)
    return float(_exploration_value(ctx.incumbents[j], mu, np.sqrt(var))[0])


def af_hf(ctx: AcqContext, u: MixedPoint) -> float:
    """Plain improvement ``y*_l - mu_l(u)`` for the high-fidelity source."""
    mu, _ = ctx.objective.predict_batch(
        u.x[None, :], t=np.asarray([u.t], dtype=int).reshape(1, -1), source=ctx.hf)
    return float(ctx.incumbents[ctx.hf] - mu[0])


def af_constrained(ctx: AcqContext, u: MixedPoint, j: int) -> float:
    """Feasibility-aware score for source ``j``.

    If every constraint model's mean at ``u`` is <= 0, the unconstrained
    score applies (exploration for LF, improvement for HF).  Otherwise the
    negated sum of the violated constraint means is returned, so maximizing
    the score shrinks the predicted violation.
    """
    return _single(ctx, u, j, cost_aware=False)


def composite(ctx: AcqContext, u: MixedPoint, j: int) -> float:
    """Cost-aware score: constrained acquisition divided by the source cost."""
    if ctx.costs[j] <= 0:
        raise InvalidInputError("cost must be positive")
    return _single(ctx, u, j, cost_aware=True)


def _t_combinations(spec) -> list[tuple[int, ...]]:
    if spec.dt == 0:
        return [()]
    total = int(np.prod(spec.level_counts))
    if total > 64:
        raise InvalidInputError(
            f"joint categorical level count {total} exceeds enumeration limit 64")
    return [tuple(c) for c in itertools.product(*(range(k) for k in spec.level_counts))]


def propose(
    ctx: AcqContext,
    bounds: BoxBounds,
    n_starts: int = 20,
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 50,
) -> tuple[MixedPoint, int, float]:
    """Maximize the composite score over every source and return the winner.

    The continuous block is optimized per source by multi-start projected
    L-BFGS (Sobol starts in the unit cube, all starts advanced in lockstep
    with batched finite-difference gradients); categorical variables are
    enumerated exhaustively.  Ties across sources break toward the lowest
    source index.
    """
    spec = ctx.objective.spec
    best: tuple[float, int, np.ndarray, tuple[int, ...]] | None = None
    unit_box = BoxBounds(np.zeros(bounds.dim), np.ones(bounds.dim))
    for j in range(ctx.n_sources):
        starts = sobol_sample(n_starts, bounds.dim, seed=seed * 613 + j)
        for t in _t_combinations(spec):
            t_arr = np.asarray([t], dtype=int).reshape(1, -1)

            def neg_batch(V, _t=t_arr, _j=j):
                V = np.atleast_2d(V)
                tt = None if spec.dt == 0 else np.repeat(_t, V.shape[0], axis=0)
                return -_af_batch(ctx, V, tt, _j, unit=True)

            xs, fs = lbfgs_minimize_batched(neg_batch, starts, bounds=unit_box,
                                            tol=tol, max_iter=max_iter)
            k = int(np.argmin(fs))
            if not np.isfinite(fs[k]):
                continue
            value = -float(fs[k])
            # strict > keeps the lowest source index on ties
            if best is None or value > best[0]:
                best = (value, j, bounds.from_unit(xs[k]), t)
    if best is None:
        raise ProposalFailureError("all acquisition optimizations failed")
    value, j, x, t = best
    return MixedPoint(x=x, t=t, source=j), j, value

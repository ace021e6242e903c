"""Surrogate-optimum tracking and the variance-based stopping rule.

After every optimization iteration a constrained minimization of the
high-fidelity surrogate mean (the post-auxiliary optimization, PAO) records
where the emulator currently believes the optimum lies.  Once the
standardized sequence of those optima has variance below a threshold over a
trailing window, the search has stabilized and the loop halts.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import InvalidInputError
from .gp import GpModel
from .numopt import BoxBounds, lbfgs_minimize_batched, sobol_sample
from .types import MfDataset, MixedPoint

__all__ = [
    "PaoRecord",
    "StopConfig",
    "run_pao",
    "normalize_history",
    "should_stop",
    "final_optimum",
]

# Exact-penalty weight for constraint-model violations (standardized scales).
PENALTY = 1e3
_STD_GUARD = 1e-12


@dataclasses.dataclass(frozen=True, eq=False)
class PaoRecord:
    """Outcome of one post-auxiliary optimization.

    ``point`` is the minimizer (source fixed to high fidelity), ``value``
    the surrogate mean there in original units, ``feasible`` whether every
    constraint model's mean is <= 0.  ``top_points`` keeps the best distinct
    minimizers (unit-cube coordinates) to warm-start the next iteration.
    """

    q: int
    point: MixedPoint
    value: float
    feasible: bool
    top_points: np.ndarray


@dataclasses.dataclass(frozen=True)
class StopConfig:
    """Trailing window length and variance threshold of the stopping test."""

    window: int = 10
    threshold: float = 0.01

    def __post_init__(self):
        if self.window < 2:
            raise InvalidInputError("window must be >= 2")
        if not self.threshold > 0:
            raise InvalidInputError("threshold must be positive")


def _feasible_hf_starts(data: MfDataset, hf: int, bounds: BoxBounds) -> np.ndarray:
    mask = data.source == hf
    if data.n_constraints:
        mask &= np.all(data.g <= 0.0, axis=1)
    if not np.any(mask):
        return np.zeros((0, bounds.dim))
    return bounds.to_unit(data.x[mask])


def run_pao(
    objective: GpModel,
    constraints: list[GpModel],
    data: MfDataset,
    bounds: BoxBounds,
    hf: int,
    q: int,
    prev: PaoRecord | None = None,
    seed: int = 0,
    n_random: int = 30,
    n_keep: int = 10,
    max_iter: int = 60,
) -> PaoRecord:
    """Minimize the HF surrogate mean subject to constraint-model means <= 0.

    The constrained problem is solved as an exact penalty: the standardized
    objective mean plus ``PENALTY`` times the standardized violations, by
    box-projected L-BFGS from a look-back start set — the feasible HF samples
    observed so far, plus either ``n_random`` Sobol points (first iteration)
    or the previous record's best minimizers.  Always returns a record: the
    best feasible minimizer, or the least-violating one flagged infeasible.
    """
    y_scale = max(objective.y_std, _STD_GUARD)
    c_scales = [max(c.y_std, _STD_GUARD) for c in constraints]

    def penalized(V):
        V = np.atleast_2d(V)
        mu, _ = objective.predict_batch(V, source=hf, unit=True)
        val = (mu - objective.y_mean) / y_scale
        for cm, cs in zip(constraints, c_scales):
            mg, _ = cm.predict_batch(V, source=hf, unit=True)
            val = val + PENALTY * np.maximum(mg, 0.0) / cs
        return val

    starts = [_feasible_hf_starts(data, hf, bounds)]
    if prev is None:
        starts.append(sobol_sample(n_random, bounds.dim, seed=seed))
    else:
        starts.append(np.atleast_2d(prev.top_points))
    all_starts = np.vstack([s for s in starts if s.size])
    if all_starts.shape[0] == 0:
        all_starts = sobol_sample(max(n_random, 1), bounds.dim, seed=seed)

    unit_box = BoxBounds(np.zeros(bounds.dim), np.ones(bounds.dim))
    xs, fs = lbfgs_minimize_batched(penalized, all_starts, bounds=unit_box,
                                    tol=1e-7, max_iter=max_iter)
    finite = np.isfinite(fs)
    if not np.any(finite):  # pathological; fall back to the raw starts
        vals = penalized(all_starts)
        k = int(np.argmin(vals))
        xs, fs = all_starts[[k]], np.asarray([vals[k]])
        finite = np.ones(1, bool)

    order = np.argsort(fs, kind="stable")
    kept: list[np.ndarray] = []
    for i in order:
        if not finite[i]:
            continue
        v = xs[i]
        if all(np.linalg.norm(v - u) > 1e-3 for u in kept):
            kept.append(v)
        if len(kept) >= n_keep:
            break
    top_points = np.array(kept)

    # classify candidates by constraint-model means
    X_cand = bounds.from_unit(top_points)
    mu, _ = objective.predict_batch(top_points, source=hf, unit=True)
    viol = np.zeros(X_cand.shape[0])
    for cm in constraints:
        mg, _ = cm.predict_batch(top_points, source=hf, unit=True)
        viol += np.maximum(mg, 0.0)
    feas_mask = viol <= 0.0
    if np.any(feas_mask):
        cand = np.flatnonzero(feas_mask)
        pick = cand[int(np.argmin(mu[cand]))]
        feasible = True
    else:
        pick = int(np.lexsort((mu, viol))[0])
        feasible = False
    point = MixedPoint(x=X_cand[pick], t=(), source=hf)
    return PaoRecord(q=q, point=point, value=float(mu[pick]),
                     feasible=feasible, top_points=top_points)


def normalize_history(history) -> np.ndarray:
    """Standardize the optimum sequence by its own mean and population std.

    A (near-)constant history returns all zeros, which lets the variance
    test recognize a perfectly flat sequence as converged.
    """
    values = np.atleast_1d(np.asarray(history, dtype=float))
    if values.size == 0:
        return values.copy()
    mean = float(np.mean(values))
    std = float(np.sqrt(np.mean((values - mean) ** 2)))
    if std < _STD_GUARD:
        return np.zeros_like(values)
    return (values - mean) / std


def should_stop(normalized, cfg: StopConfig) -> bool:
    """True once the trailing window's population variance drops below threshold."""
    values = np.atleast_1d(np.asarray(normalized, dtype=float))
    if values.size < cfg.window:
        return False
    tail = values[-cfg.window:]
    return bool(np.var(tail) < cfg.threshold)


def final_optimum(incumbent: float, records: list[PaoRecord], cfg: StopConfig) -> float:
    """Reported optimum: the smaller of the incumbent and the best feasible
    surrogate optimum in the trailing window (incumbent if the window has no
    feasible record)."""
    tail = records[-cfg.window:] if records else []
    feas = [r.value for r in tail if r.feasible]
    if not feas:
        return float(incumbent)
    return float(min(incumbent, min(feas)))

"""The optimization loop: fit, propose, query, update, track, stop.

Each iteration trains one multi-source GP on objective values and one per
constraint, maximizes the cost-aware constrained acquisition across all
sources, queries the chosen source, then runs the post-auxiliary
optimization whose standardized optimum sequence drives the stopping test.
An ask-tell split (:func:`suggest` / :func:`observe`) exposes the same loop
to external oracles; :func:`run` wires it to a registered benchmark problem.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from . import acquisition, benchmarks, gp, stopping
from .errors import InvalidInputError, ProtocolError
from .kernel import CategoricalSpec
from .numopt import BoxBounds
from .types import MfDataset, MixedPoint

__all__ = [
    "RunConfig",
    "BoState",
    "IterationRecord",
    "RunResult",
    "initial_state",
    "suggest",
    "observe",
    "step",
    "run",
]


def _loop_train_config() -> gp.TrainConfig:
    # inside the loop, fits are refreshed every iteration from a warm start,
    # so a looser optimizer tolerance trades negligible accuracy for speed
    return gp.TrainConfig(tol=3e-3, max_evals=70, refit_restarts=2)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Loop-level settings: noise variant, stopping rule, training, caps."""

    noise: str = "small"
    stop: stopping.StopConfig = dataclasses.field(default_factory=stopping.StopConfig)
    train: gp.TrainConfig = dataclasses.field(default_factory=_loop_train_config)
    max_iterations: int = 200
    max_cost: float = 1e6
    acq_starts: int = 20
    pao_random_starts: int = 30
    strict: bool = True


@dataclasses.dataclass
class IterationRecord:
    """What happened in one iteration, in oracle units."""

    q: int
    source: int
    x: np.ndarray
    t: tuple[int, ...]
    y: float
    g: np.ndarray
    cumulative_cost: float
    pao_value: float
    pao_feasible: bool
    stopped_reason: str | None = None

    def to_dict(self) -> dict:
        return {
            "q": self.q,
            "source": int(self.source),
            "u": {"x": [float(v) for v in self.x], "t": list(self.t)},
            "y": float(self.y),
            "g": [float(v) for v in self.g],
            "cumulative_cost": float(self.cumulative_cost),
            "y_pao": float(self.pao_value),
            "pao_feasible": bool(self.pao_feasible),
            "stopped_reason": self.stopped_reason,
        }


class BoState:
    """Mutable record of one optimization run.

    Bookkeeping invariant: ``cumulative_cost`` equals the dot product of
    per-source sample counts and costs, including the initial design;
    ``q`` counts accepted observations since the initial design.
    """

    def __init__(self, data: MfDataset, costs, hf: int, bounds: BoxBounds,
                 config: RunConfig, seed: int,
                 noise_rng: np.random.Generator | None = None):
        self.data = data
        self.costs = np.atleast_1d(np.asarray(costs, dtype=float))
        if np.any(self.costs <= 0):
            raise InvalidInputError("costs must be positive")
        self.hf = int(hf)
        self.bounds = bounds
        self.config = config
        self.seed = int(seed)
        self.noise_rng = noise_rng
        self.n_sources = self.costs.size
        self.counts = data.counts_by_source(self.n_sources).astype(int)
        self.cumulative_cost = float(np.dot(self.counts, self.costs))
        self.q = 0
        self.pao_records: list[stopping.PaoRecord] = []
        self.normalized = np.zeros(0)
        self.stopped = False
        self.stop_reason: str | None = None
        self.records: list[IterationRecord] = []
        self.pending: tuple[MixedPoint, int] | None = None
        self.models: tuple[gp.GpModel, list[gp.GpModel]] | None = None
        self._warm: list[np.ndarray] | None = None

    # deterministic per-component seeds
    def _sub_seed(self, tag: int, *extra: int) -> int:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(tag, *extra))
        return int(ss.generate_state(1)[0])

    @property
    def pao_values(self) -> np.ndarray:
        return np.array([r.value for r in self.pao_records])

    def incumbent(self) -> tuple[float, np.ndarray, bool]:
        """Best HF observation, feasible ones preferred.

        Returns (value, x, feasible_flag); falls back to the best HF
        observation regardless of feasibility when none is feasible.
        """
        mask = self.data.source == self.hf
        if not np.any(mask):
            raise InvalidInputError("no high-fidelity observations")
        feas = np.all(self.data.g <= 0.0, axis=1) if self.data.n_constraints \
            else np.ones(self.data.n, bool)
        both = mask & feas
        if np.any(both):
            i = np.flatnonzero(both)[np.argmin(self.data.y[both])]
            return float(self.data.y[i]), self.data.x[i].copy(), True
        i = np.flatnonzero(mask)[np.argmin(self.data.y[mask])]
        return float(self.data.y[i]), self.data.x[i].copy(), False

    def fingerprint(self) -> tuple:
        """Comparable summary for equality checks in tests."""
        return (
            self.data.digest(), self.q, round(self.cumulative_cost, 12),
            tuple(int(c) for c in self.counts),
            tuple(round(v, 12) for v in self.pao_values),
            self.stopped, self.stop_reason,
        )


def initial_state(problem: benchmarks.Problem, config: RunConfig, seed: int) -> BoState:
    """Build a run state with the problem's Sobol initial design (costed)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(4,)))
    data = benchmarks.initial_design(problem, seed=seed, rng=rng, variant=config.noise)
    return BoState(data=data, costs=problem.costs, hf=problem.hf,
                   bounds=problem.bounds, config=config, seed=seed, noise_rng=rng)


def _fit_models(state: BoState) -> tuple[gp.GpModel, list[gp.GpModel]]:
    cfg = state.config
    spec = CategoricalSpec(sources=state.n_sources)
    first = state.q == 0 or state._warm is None
    restarts = cfg.train.restarts if first else cfg.train.refit_restarts
    warm = state._warm if state._warm is not None else [None] * (1 + state.data.n_constraints)

    def one(idx: int, y: np.ndarray) -> gp.GpModel:
        ds = MfDataset(x=state.data.x, source=state.data.source, y=y, t=state.data.t)
        extra = [warm[idx]] if warm[idx] is not None else None
        return gp.fit(ds, x_bounds=state.bounds, spec=spec, config=cfg.train,
                      seed=state._sub_seed(0, state.q, idx), restarts=restarts,
                      extra_starts=extra)

    objective = one(0, state.data.y)
    constraints = [one(1 + k, state.data.g[:, k]) for k in range(state.data.n_constraints)]
    return objective, constraints


def suggest(state: BoState) -> tuple[MixedPoint, int]:
    """Fit models and propose the next (point, source) without querying.

    In strict mode a second suggest before the matching observe is a
    protocol error.  The state is only updated once everything succeeded,
    so failures leave it unchanged and re-entrant.
    """
    if state.stopped:
        raise ProtocolError("state is stopped")
    if state.config.strict and state.pending is not None:
        raise ProtocolError("suggest called twice without an observe")
    objective, constraints = _fit_models(state)
    incumbents = acquisition.compute_incumbents(state.data, state.n_sources)
    ctx = acquisition.AcqContext(objective=objective, constraints=constraints,
                                 incumbents=incumbents, costs=state.costs, hf=state.hf)
    point, j, _ = acquisition.propose(ctx, state.bounds,
                                      n_starts=state.config.acq_starts,
                                      seed=state._sub_seed(2, state.q))
    state.models = (objective, constraints)
    state._warm = [objective._vec] + [c._vec for c in constraints]
    state.pending = (point, j)
    return point, j


def observe(state: BoState, point: MixedPoint, j: int, y: float, g=None) -> BoState:
    """Record an observation, run the surrogate-optimum step, test stopping.

    In strict mode (point, j) must match the pending suggestion.  Free-form
    mode (``config.strict=False``) accepts externally chosen points and fits
    models on the pre-observation data when no suggestion is pending.
    """
    if state.stopped:
        raise ProtocolError("state is stopped")
    if state.pending is not None:
        p_pt, p_j = state.pending
        same = p_j == j and np.allclose(p_pt.x, point.x) and p_pt.t == point.t
        if state.config.strict and not same:
            raise ProtocolError("observe does not match the pending suggestion")
    elif state.config.strict:
        raise ProtocolError("observe without a pending suggestion")
    if state.models is None:
        state.models = _fit_models(state)
        state._warm = [state.models[0]._vec] + [c._vec for c in state.models[1]]

    g = np.zeros(state.data.n_constraints) if g is None else np.asarray(g, dtype=float)
    state.data = state.data.append(point, y, g)
    state.counts[j] += 1
    state.cumulative_cost += float(state.costs[j])

    objective, constraints = state.models
    prev = state.pao_records[-1] if state.pao_records else None
    record = stopping.run_pao(
        objective, constraints, state.data, state.bounds, state.hf,
        q=state.q + 1, prev=prev, seed=state._sub_seed(3, state.q),
        n_random=state.config.pao_random_starts,
    )
    state.pao_records.append(record)
    state.normalized = stopping.normalize_history(state.pao_values)
    state.q += 1
    if stopping.should_stop(state.normalized, state.config.stop):
        state.stopped = True
        state.stop_reason = "criterion"

    state.records.append(IterationRecord(
        q=state.q, source=j, x=point.x.copy(), t=point.t, y=float(y), g=g.copy(),
        cumulative_cost=state.cumulative_cost, pao_value=record.value,
        pao_feasible=record.feasible,
        stopped_reason="criterion" if state.stopped else None,
    ))
    state.pending = None
    state.models = None
    return state


def step(state: BoState, problem: benchmarks.Problem) -> BoState:
    """One full iteration against a problem oracle: suggest, query, observe."""
    point, j = suggest(state)
    y, g = benchmarks.evaluate(problem, j, point.x, rng=state.noise_rng,
                               variant=state.config.noise)
    return observe(state, point, j, y, g)


@dataclasses.dataclass
class RunResult:
    """Everything a finished run produced."""

    problem: str
    seed: int
    records: list[IterationRecord]
    counts: np.ndarray
    costs: np.ndarray
    total_cost: float
    iterations: int
    stop_reason: str
    final_value: float
    final_x: np.ndarray
    final_feasible: bool
    final_origin: str  # "incumbent" | "pao"
    pao_values: np.ndarray
    incumbent_value: float
    hf: int

    def cost_identity_holds(self) -> bool:
        return float(np.dot(self.counts, self.costs)) == self.total_cost


def _final_choice(state: BoState) -> tuple[float, np.ndarray, bool, str]:
    """Reported optimum and its location per the trailing-window rule.

    The incumbent (best feasible HF observation) competes with the best
    feasible surrogate optimum of the last ``window`` iterations; when no
    feasible HF observation exists the surrogate side is preferred, and the
    infeasible incumbent is only reported when neither side is feasible.
    """
    inc_y, inc_x, inc_feasible = state.incumbent()
    tail = state.pao_records[-state.config.stop.window:]
    feas = [r for r in tail if r.feasible]
    best_pao = min(feas, key=lambda r: r.value) if feas else None
    if inc_feasible:
        if best_pao is not None and best_pao.value < inc_y:
            return best_pao.value, best_pao.point.x.copy(), True, "pao"
        return inc_y, inc_x, True, "incumbent"
    if best_pao is not None:
        return best_pao.value, best_pao.point.x.copy(), True, "pao"
    return inc_y, inc_x, False, "incumbent"


def run(problem: benchmarks.Problem, config: RunConfig | None = None,
        seed: int = 0) -> RunResult:
    """Loop :func:`step` until the stopping criterion or a safety cap fires."""
    config = config or RunConfig()
    state = initial_state(problem, config, seed)
    reason = None
    while True:
        if state.stopped:
            reason = "criterion"
            break
        if state.cumulative_cost >= config.max_cost:
            reason = "max_cost"
            break
        if state.q >= config.max_iterations:
            reason = "max_iterations"
            break
        step(state, problem)
    if state.records and state.records[-1].stopped_reason is None:
        state.records[-1].stopped_reason = reason
    final_value, final_x, final_feasible, origin = _final_choice(state)
    inc_y, _, _ = state.incumbent()
    return RunResult(
        problem=problem.name, seed=seed, records=state.records,
        counts=state.counts.copy(), costs=state.costs.copy(),
        total_cost=state.cumulative_cost, iterations=state.q,
        stop_reason=reason, final_value=final_value, final_x=final_x,
        final_feasible=final_feasible, final_origin=origin,
        pao_values=state.pao_values, incumbent_value=inc_y, hf=state.hf,
    )

"""Built-in constrained multi-fidelity benchmark problems.

Five analytic problems with 2 to 5 data sources each.  The high-fidelity
source may be observed with additive Gaussian noise (two standard-deviation
variants per problem); low-fidelity sources are deterministic, biased
approximations.  Constraint observations are always noiseless.  All
functional forms are defined here and documented inline; per-problem
metadata (costs, initial-design sizes, noise levels) plus derived
ground-truth constrained optima live in ``data/manifest.json`` and are
checked against the registry by the test suite.

External problems can be added with :func:`register_problem` and used with
the same driver and CLI machinery.
"""

from __future__ import annotations

import dataclasses
import importlib.resources
import json
import math
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidInputError
from .numopt import BoxBounds, sobol_sample
from .types import MfDataset, MixedPoint

__all__ = [
    "Problem",
    "NoiseSpec",
    "get_problem",
    "register_problem",
    "problem_names",
    "evaluate",
    "initial_design",
    "rrmse",
    "single_fidelity_variant",
    "load_manifest",
    "validate_problem",
]


@dataclasses.dataclass(frozen=True)
class NoiseSpec:
    """Standard deviation of the additive HF observation noise per variant."""

    small: float
    large: float

    def std(self, variant: str) -> float:
        if variant == "none":
            return 0.0
        if variant not in ("small", "large"):
            raise InvalidInputError(f"unknown noise variant {variant!r}")
        return getattr(self, variant)


@dataclasses.dataclass(frozen=True, eq=False)
class Problem:
    """One benchmark: per-source objectives, constraints, costs and metadata.

    ``objectives[j]`` maps an ``(m, dx)`` array to ``(m,)`` objective values
    for source ``j``; ``constraints[j]`` is the tuple of that source's
    constraint callables with the same vectorized signature (feasible where
    ``g(x) <= 0``).  Source 0 is high fidelity unless ``hf`` says otherwise.
    """

    name: str
    bounds: BoxBounds
    objectives: tuple[Callable, ...]
    constraints: tuple[tuple[Callable, ...], ...]
    costs: tuple[float, ...]
    noise: NoiseSpec
    init_counts: tuple[int, ...]
    hf: int = 0
    table_rrmse: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.objectives) != len(self.costs) or len(self.constraints) != len(self.costs):
            raise InvalidInputError("per-source tuples must have equal length")
        if any(c <= 0 for c in self.costs):
            raise InvalidInputError("costs must be positive")
        ks = {len(c) for c in self.constraints}
        if len(ks) > 1:
            raise InvalidInputError("every source must expose the same number of constraints")
        if not 0 <= self.hf < len(self.costs):
            raise InvalidInputError("hf index out of range")

    @property
    def dx(self) -> int:
        return self.bounds.dim

    @property
    def n_sources(self) -> int:
        return len(self.costs)

    @property
    def n_constraints(self) -> int:
        return len(self.constraints[0])

    @property
    def source_names(self) -> tuple[str, ...]:
        return tuple(
            "hf" if j == self.hf else f"lf{j if j > self.hf else j + 1}"
            for j in range(self.n_sources)
        )

    def initial_cost(self) -> float:
        return float(np.dot(self.init_counts, self.costs))


def _rows(x, dx):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != dx:
        raise InvalidInputError(f"expected {dx} input columns, got {x.shape[1]}")
    return x


# ---------------------------------------------------------------------------
# Branin (3-D on the unit cube): rescaled two-dimensional Branin surface plus
# a quadratic bowl in the third coordinate, lifted by +10 so the optimum is
# well away from zero.
# ---------------------------------------------------------------------------


def _branin_2d(v1, v2):
    b = 5.1 / (4.0 * math.pi ** 2)
    c = 5.0 / math.pi
    t = 1.0 / (8.0 * math.pi)
    return (v2 - b * v1 ** 2 + c * v1 - 6.0) ** 2 + 10.0 * (1 - t) * np.cos(v1) + 10.0


def branin_hf(x):
    x = _rows(x, 3)
    v1 = 15.0 * x[:, 0] - 5.0
    v2 = 15.0 * x[:, 1]
    return _branin_2d(v1, v2) + 12.0 * (x[:, 2] - 0.5) ** 2 + 10.0


def branin_lf1(x):
    # input-shifted, damped surface with a mild additive trend
    x = _rows(x, 3)
    v1 = 15.0 * x[:, 0] - 5.0 + 0.6
    v2 = 15.0 * x[:, 1] - 1.2
    return 0.8 * _branin_2d(v1, v2) + 9.0 * (x[:, 2] - 0.4) ** 2 + 2.0 * x[:, 0] + 6.0


def branin_g1_hf(x):
    x = _rows(x, 3)
    return x[:, 0] + x[:, 1] - 0.6


def branin_g2_hf(x):
    x = _rows(x, 3)
    return 0.6 - x[:, 2]


def branin_g1_lf(x):
    x = _rows(x, 3)
    return x[:, 0] + 1.1 * x[:, 1] - 0.55


def branin_g2_lf(x):
    x = _rows(x, 3)
    return 0.58 - x[:, 2] - 0.05 * x[:, 0]


# ---------------------------------------------------------------------------
# Hartmann (6-D): the classic four-peak exponential sum; the low-fidelity
# source perturbs the mixture weights.
# ---------------------------------------------------------------------------

_HARTMANN_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
_HARTMANN_ALPHA_LF = np.array([0.5, 0.5, 2.0, 4.0])
_HARTMANN_A = np.array([
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
])
_HARTMANN_P = 1e-4 * np.array([
    [1312, 1696, 5569, 124, 8283, 5886],
    [2329, 4135, 8307, 3736, 1004, 9991],
    [2348, 1451, 3522, 2883, 3047, 6650],
    [4047, 8828, 8732, 5743, 1091, 381],
])


def _hartmann(x, alpha):
    x = _rows(x, 6)
    d = x[:, None, :] - _HARTMANN_P[None, :, :]
    inner = np.einsum("ijk,jk->ij", d * d, _HARTMANN_A)
    return -np.einsum("j,ij->i", alpha, np.exp(-inner))


def hartmann_hf(x):
    return _hartmann(x, _HARTMANN_ALPHA)


def hartmann_lf1(x):
    return _hartmann(x, _HARTMANN_ALPHA_LF)


def hartmann_g1_hf(x):
    x = _rows(x, 6)
    return x[:, 0] + x[:, 1] - 0.3


def hartmann_g2_hf(x):
    x = _rows(x, 6)
    return 0.4 - x[:, 3] - x[:, 4]


def hartmann_g1_lf(x):
    x = _rows(x, 6)
    return x[:, 0] + 1.08 * x[:, 1] - 0.27


def hartmann_g2_lf(x):
    x = _rows(x, 6)
    return 0.44 - x[:, 3] - 0.9 * x[:, 4]


# ---------------------------------------------------------------------------
# Wing (10-D): light-aircraft wing-weight estimate.  Inputs: wing area S_w,
# fuel weight W_fw, aspect ratio A, quarter-chord sweep Lambda (deg), dynamic
# pressure q, taper ratio lam, thickness-to-chord t_c, ultimate load factor
# N_z, design gross weight W_dg, paint weight W_p.  The low fidelities drop
# the paint term, soften an exponent, or simplify two exponents.
# ---------------------------------------------------------------------------

_WING_LOWER = np.array([150.0, 220.0, 6.0, -10.0, 16.0, 0.5, 0.08, 2.5, 1700.0, 0.025])
_WING_UPPER = np.array([200.0, 300.0, 10.0, 10.0, 45.0, 1.0, 0.18, 6.0, 2500.0, 0.08])


def _wing_core(x, coef, e_sw, e_tc, e_nw):
    x = _rows(x, 10)
    sw, wfw, aspect, sweep, q, lam, tc, nz, wdg, wp = (x[:, i] for i in range(10))
    cos_sw = np.cos(np.deg2rad(sweep))
    w = (coef * sw ** e_sw * wfw ** 0.0035 * (aspect / cos_sw ** 2) ** 0.6
         * q ** 0.006 * lam ** 0.04 * (100.0 * tc / cos_sw) ** e_nw
         * (nz * wdg) ** 0.49)
    return w, sw, wp, tc, wdg


def wing_hf(x):
    w, sw, wp, _, _ = _wing_core(x, 0.036, 0.758, 0.49, -0.3)
    return w + sw * wp


def wing_lf1(x):
    # paint-weight term dropped
    w, _, _, _, _ = _wing_core(x, 0.036, 0.758, 0.49, -0.3)
    return w


def wing_lf2(x):
    # softened load/weight exponent
    x = _rows(x, 10)
    sw, wfw, aspect, sweep, q, lam, tc, nz, wdg, wp = (x[:, i] for i in range(10))
    cos_sw = np.cos(np.deg2rad(sweep))
    w = (0.036 * sw ** 0.758 * wfw ** 0.0035 * (aspect / cos_sw ** 2) ** 0.6
         * q ** 0.006 * lam ** 0.04 * (100.0 * tc / cos_sw) ** -0.3
         * (nz * wdg) ** 0.46)
    return w + sw * wp


def wing_lf3(x):
    # simplified area/thickness exponents
    x = _rows(x, 10)
    sw, wfw, aspect, sweep, q, lam, tc, nz, wdg, wp = (x[:, i] for i in range(10))
    cos_sw = np.cos(np.deg2rad(sweep))
    w = (0.036 * sw ** 0.8 * wfw ** 0.0035 * (aspect / cos_sw ** 2) ** 0.6
         * q ** 0.006 * lam ** 0.04 * (100.0 * tc / cos_sw) ** -0.2
         * (nz * wdg) ** 0.49)
    return w + sw * wp


def wing_g_hf(x):
    # wing-loading cap: W_dg <= 11 * S_w
    x = _rows(x, 10)
    return (x[:, 8] - 11.0 * x[:, 0]) / 100.0


def wing_g_lf1(x):
    x = _rows(x, 10)
    return (x[:, 8] - 11.2 * x[:, 0] + 25.0) / 100.0


def wing_g_lf2(x):
    x = _rows(x, 10)
    return (0.96 * x[:, 8] - 10.8 * x[:, 0]) / 100.0


def wing_g_lf3(x):
    x = _rows(x, 10)
    return (x[:, 8] - 11.0 * x[:, 0] + 150.0 * (x[:, 6] - 0.13)) / 100.0


# ---------------------------------------------------------------------------
# PolyMix (20-D on [-0.5, 0.5]^20): mixture of degree-1/2/3 polynomial terms
# with nearest-neighbor coupling.  Low fidelities drop or reweight terms.
# ---------------------------------------------------------------------------

_POLY_SIGNS = np.array([(-1.0) ** i for i in range(1, 21)])


def _polymix(x, quad, lin, cubic=True, coupling=True, offset=8.0):
    x = _rows(x, 20)
    val = quad * np.sum(x * x, axis=1) + lin * np.sum(x, axis=1) + offset
    if coupling:
        val = val + np.sum(x[:, :-1] * x[:, 1:], axis=1)
    if cubic:
        val = val + np.sum(_POLY_SIGNS * x ** 3, axis=1)
    return val


def polymix_hf(x):
    return _polymix(x, 4.0, 0.3)


def polymix_lf1(x):
    return _polymix(x, 4.0, 0.3, cubic=False, offset=8.3)


def polymix_lf2(x):
    return _polymix(x, 3.5, 0.3, offset=7.5)


def polymix_lf3(x):
    return _polymix(x, 4.0, 0.3, coupling=False, offset=8.2)


def polymix_lf4(x):
    return _polymix(x, 4.3, 0.45, offset=7.8)


def polymix_g_hf(x):
    x = _rows(x, 20)
    return np.sum(x, axis=1) + 1.2


def polymix_g_lf1(x):
    x = _rows(x, 20)
    w = 1.0 + 0.05 * _POLY_SIGNS
    return x @ w + 1.25


def polymix_g_lf2(x):
    x = _rows(x, 20)
    return 1.05 * np.sum(x, axis=1) + 1.15


def polymix_g_lf3(x):
    x = _rows(x, 20)
    return np.sum(x, axis=1) + 1.3 - 0.1 * x[:, 0]


def polymix_g_lf4(x):
    x = _rows(x, 20)
    return 0.95 * np.sum(x, axis=1) + 1.22


# ---------------------------------------------------------------------------
# Registry.
# ---------------------------------------------------------------------------


def _unit_bounds(d):
    return BoxBounds(np.zeros(d), np.ones(d))


_REGISTRY: dict[str, Problem] = {}


def register_problem(problem: Problem) -> None:
    """Register a problem (built-in or user-defined) under its name."""
    _REGISTRY[problem.name] = problem


def problem_names() -> list[str]:
    return sorted(_REGISTRY)


def get_problem(name: str) -> Problem:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise InvalidInputError(
            f"unknown problem {name!r}; registered: {problem_names()}") from None


register_problem(Problem(
    name="branin",
    bounds=_unit_bounds(3),
    objectives=(branin_hf, branin_lf1),
    constraints=((branin_g1_hf, branin_g2_hf), (branin_g1_lf, branin_g2_lf)),
    costs=(10.0, 1.0),
    noise=NoiseSpec(small=0.1, large=0.2),
    init_counts=(9, 18),
    table_rrmse=(2.82,),
))

register_problem(Problem(
    name="hartmann",
    bounds=_unit_bounds(6),
    objectives=(hartmann_hf, hartmann_lf1),
    constraints=((hartmann_g1_hf, hartmann_g2_hf), (hartmann_g1_lf, hartmann_g2_lf)),
    costs=(10.0, 1.0),
    noise=NoiseSpec(small=0.25, large=0.5),
    init_counts=(18, 36),
    table_rrmse=(0.79,),
))

register_problem(Problem(
    name="wing",
    bounds=BoxBounds(_WING_LOWER, _WING_UPPER),
    objectives=(wing_hf, wing_lf1, wing_lf2, wing_lf3),
    constraints=((wing_g_hf,), (wing_g_hf,), (wing_g_hf,), (wing_g_hf,)),
    costs=(1000.0, 100.0, 10.0, 1.0),
    noise=NoiseSpec(small=0.5, large=1.0),
    init_counts=(30, 60, 60, 60),
    table_rrmse=(0.19, 1.14, 5.74),
))

register_problem(Problem(
    name="wing_sep",
    bounds=BoxBounds(_WING_LOWER, _WING_UPPER),
    objectives=(wing_hf, wing_lf1, wing_lf2, wing_lf3),
    constraints=((wing_g_hf,), (wing_g_lf1,), (wing_g_lf2,), (wing_g_lf3,)),
    costs=(1000.0, 100.0, 10.0, 1.0),
    noise=NoiseSpec(small=0.5, large=1.0),
    init_counts=(30, 60, 60, 60),
    table_rrmse=(0.19, 1.14, 5.74),
))

register_problem(Problem(
    name="polymix",
    bounds=BoxBounds(np.full(20, -0.5), np.full(20, 0.5)),
    objectives=(polymix_hf, polymix_lf1, polymix_lf2, polymix_lf3, polymix_lf4),
    constraints=((polymix_g_hf,), (polymix_g_lf1,), (polymix_g_lf2,),
                 (polymix_g_lf3,), (polymix_g_lf4,)),
    costs=(200.0, 100.0, 50.0, 10.0, 5.0),
    noise=NoiseSpec(small=0.5, large=1.0),
    init_counts=(30, 60, 60, 60, 60),
    table_rrmse=(0.23, 0.48, 0.23, 0.25),
))


# ---------------------------------------------------------------------------
# Operations.
# ---------------------------------------------------------------------------


def evaluate(
    problem: Problem, j: int, x, rng: np.random.Generator | None = None,
    variant: str = "small",
) -> tuple[float, np.ndarray]:
    """Query source ``j`` at a single point.

    Returns the (possibly noisy, HF only) objective value and the noiseless
    constraint vector.  The rng stream advances by one normal draw per call
    regardless of source, so interleavings stay reproducible.
    """
    x = np.asarray(x, dtype=float).ravel()
    if not problem.bounds.contains(x):
        raise InvalidInputError("point outside problem bounds")
    if not 0 <= j < problem.n_sources:
        raise InvalidInputError(f"source {j} out of range")
    y = float(problem.objectives[j](x[None, :])[0])
    if rng is not None:
        eps = rng.normal()
        if j == problem.hf:
            y += problem.noise.std(variant) * eps
    g = np.array([float(c(x[None, :])[0]) for c in problem.constraints[j]])
    return y, g


def initial_design(
    problem: Problem, seed: int, rng: np.random.Generator | None = None,
    variant: str = "small",
) -> MfDataset:
    """Sobol initial design with the problem's per-source sample counts.

    Each source gets its own seed-scrambled Sobol sample scaled to the
    bounds; objectives and constraints are evaluated per source (HF noise
    drawn from ``rng``, or from a seed-derived stream when omitted).
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(9,)))
    xs, ss, ys, gs = [], [], [], []
    for j, count in enumerate(problem.init_counts):
        sub = int(np.random.SeedSequence(entropy=seed, spawn_key=(1, j)).generate_state(1)[0])
        pts = problem.bounds.from_unit(sobol_sample(count, problem.dx, seed=sub))
        for row in pts:
            y, g = evaluate(problem, j, row, rng=rng, variant=variant)
            xs.append(row)
            ss.append(j)
            ys.append(y)
            gs.append(g)
    return MfDataset(x=np.asarray(xs), source=np.asarray(ss), y=np.asarray(ys),
                     g=np.asarray(gs))


def rrmse(problem: Problem, j: int, n_probe: int = 10000, seed: int = 0) -> float:
    """Relative RMSE of LF source ``j`` against the HF source.

    Root mean square of the (noiseless) output difference over ``n_probe``
    Sobol points, divided by the standard deviation of the HF output over
    the same points.
    """
    if j == problem.hf:
        raise InvalidInputError("rrmse is defined for low-fidelity sources")
    pts = problem.bounds.from_unit(sobol_sample(n_probe, problem.dx, seed=seed))
    y_hf = problem.objectives[problem.hf](pts)
    y_lf = problem.objectives[j](pts)
    denom = float(np.std(y_hf))
    if denom < 1e-300:
        return float(np.sqrt(np.mean((y_lf - y_hf) ** 2)))
    return float(np.sqrt(np.mean((y_lf - y_hf) ** 2)) / denom)


def single_fidelity_variant(problem: Problem) -> Problem:
    """HF-only reduction whose initial design matches the MF initial cost.

    The single-source initial count is the MF initial cost divided by the
    HF cost, rounded to the nearest integer (at least 2).
    """
    n_sf = max(2, int(round(problem.initial_cost() / problem.costs[problem.hf])))
    return Problem(
        name=problem.name + "-sf",
        bounds=problem.bounds,
        objectives=(problem.objectives[problem.hf],),
        constraints=(problem.constraints[problem.hf],),
        costs=(problem.costs[problem.hf],),
        noise=problem.noise,
        init_counts=(n_sf,),
        hf=0,
        table_rrmse=(),
    )


# ---------------------------------------------------------------------------
# Manifest.
# ---------------------------------------------------------------------------


def load_manifest() -> dict:
    """Checked-in per-problem metadata and derived ground-truth optima."""
    path = importlib.resources.files("mfbopt").joinpath("data/manifest.json")
    with path.open() as fh:
        return json.load(fh)


def manifest_entry(problem: Problem) -> dict:
    """Metadata dictionary for one problem in the manifest layout."""
    return {
        "dx": problem.dx,
        "sources": list(problem.source_names),
        "hf": problem.hf,
        "costs": list(problem.costs),
        "noise": {"small": problem.noise.small, "large": problem.noise.large},
        "init_counts": list(problem.init_counts),
        "k": problem.n_constraints,
        "bounds": {
            "lower": problem.bounds.lower.tolist(),
            "upper": problem.bounds.upper.tolist(),
        },
        "table_rrmse": list(problem.table_rrmse),
    }


def validate_problem(name: str, n_probe: int = 10000, seed: int = 0) -> list[tuple[str, bool, str]]:
    """Run the invariant suite for one problem; returns (check, ok, detail) rows."""
    problem = get_problem(name)
    manifest = load_manifest()["problems"].get(name)
    checks: list[tuple[str, bool, str]] = []

    if manifest is None:
        checks.append(("manifest entry", False, "missing"))
        return checks
    entry = manifest_entry(problem)
    for key, val in entry.items():
        ok = manifest.get(key) == val
        checks.append((f"manifest/{key}", ok, "" if ok else f"{manifest.get(key)!r} != {val!r}"))

    pts = problem.bounds.from_unit(sobol_sample(n_probe, problem.dx, seed=seed))
    finite = True
    for src in problem.constraints:
        for c in src:
            finite &= bool(np.all(np.isfinite(c(pts))))
    checks.append(("constraints finite", finite, ""))
    for f in problem.objectives:
        if not np.all(np.isfinite(f(pts))):
            checks.append(("objectives finite", False, f.__name__))
            break
    else:
        checks.append(("objectives finite", True, ""))

    opt = manifest.get("optimum")
    if opt is None:
        checks.append(("optimum recorded", False, "missing"))
    else:
        x_opt = np.asarray(opt["x"], dtype=float)
        y_at = float(problem.objectives[problem.hf](x_opt[None, :])[0])
        ok = abs(y_at - opt["value"]) <= 1e-8 * max(1.0, abs(opt["value"]))
        checks.append(("optimum value reproduces", ok,
                       "" if ok else f"{y_at} != {opt['value']}"))
        g = np.array([float(c(x_opt[None, :])[0]) for c in problem.constraints[problem.hf]])
        ok = bool(np.all(g <= 1e-8))
        checks.append(("optimum feasible", ok, "" if ok else str(g)))
    return checks

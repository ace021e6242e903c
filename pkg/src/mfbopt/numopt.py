"""Inner optimization machinery shared by the model-fitting and search loops.

Provides a box-projected L-BFGS minimizer with Armijo backtracking, a
deterministic multi-start driver, central finite differences, and Sobol
low-discrepancy sampling with seed-keyed digital-shift scrambling.
"""

from __future__ import annotations

import dataclasses
import warnings
from collections import deque
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .errors import InvalidInputError, NumericalFailureError

__all__ = [
    "BoxBounds",
    "LbfgsResult",
    "lbfgs_minimize",
    "lbfgs_minimize_batched",
    "multistart",
    "fd_gradient",
    "fd_gradient_batched",
    "sobol_sample",
]

# Armijo sufficient-decrease constant and backtracking limits.
_ARMIJO_C1 = 1e-4
_MAX_BACKTRACKS = 40


@dataclasses.dataclass(frozen=True)
class BoxBounds:
    """Axis-aligned box ``lower <= x <= upper``.

    Both vectors must be finite with ``lower <= upper`` elementwise.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise InvalidInputError("bound vectors must be 1-D with equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise InvalidInputError("bounds must be finite")
        if np.any(lo > hi):
            raise InvalidInputError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def contains(self, x: np.ndarray, atol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(
            np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol)
        )

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        """Map points from the unit cube onto the box (rows are points)."""
        return self.lower + np.asarray(u, dtype=float) * self.width

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        w = np.where(self.width > 0, self.width, 1.0)
        return (np.asarray(x, dtype=float) - self.lower) / w


@dataclasses.dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    iterations: int
    n_evals: int
    converged: bool


def _two_loop(g, s_hist, y_hist, rho_hist):
    """L-BFGS two-loop recursion for the search direction -H*g."""
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        gamma = np.dot(s, y) / max(np.dot(y, y), 1e-300)
        q *= gamma
    for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += (a - b) * s
    return -q


def lbfgs_minimize(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    bounds: BoxBounds | None = None,
    tol: float = 1e-6,
    max_iter: int = 200,
    memory: int = 10,
) -> LbfgsResult:
    """Minimize ``f`` from ``x0`` with box-projected L-BFGS.

    Each trial point is projected onto the box before evaluation, and an
    Armijo backtracking line search (with quadratic interpolation) enforces
    sufficient decrease.  Iterations stop when the projected gradient norm
    drops below ``tol`` or ``max_iter`` is reached.  The returned objective
    value never exceeds ``f(x0)``.

    Raises
    ------
    NumericalFailureError
        If ``f`` or its gradient is non-finite at ``x0``.
    """
    x = np.asarray(x0, dtype=float).copy()
    if bounds is not None:
        x = bounds.clip(x)
    fx = float(f(x))
    n_evals = 1
    if not np.isfinite(fx):
        raise NumericalFailureError("objective not finite at start point")
    g = np.asarray(grad(x), dtype=float)
    if not np.all(np.isfinite(g)):
        raise NumericalFailureError("gradient not finite at start point")

    best_x, best_f = x.copy(), fx
    s_hist: deque = deque(maxlen=memory)
    y_hist: deque = deque(maxlen=memory)
    rho_hist: deque = deque(maxlen=memory)

    def project(z):
        return bounds.clip(z) if bounds is not None else z

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        pg = x - project(x - g)
        if np.max(np.abs(pg)) < tol:
            converged = True
            break

        d = _two_loop(g, s_hist, y_hist, rho_hist)
        slope = np.dot(g, d)
        if not np.all(np.isfinite(d)) or slope >= 0:
            d = -g
            slope = -np.dot(g, g)

        # Backtracking line search on the projected step.
        step = 1.0 if s_hist else min(1.0, 1.0 / max(np.linalg.norm(g), 1.0))
        x_new = None
        f_new = np.inf
        for _ in range(_MAX_BACKTRACKS):
            trial = project(x + step * d)
            dx = trial - x
            if np.max(np.abs(dx)) == 0.0:
                break
            f_trial = float(f(trial))
            n_evals += 1
            if np.isfinite(f_trial) and f_trial <= fx + _ARMIJO_C1 * np.dot(g, dx):
                x_new, f_new = trial, f_trial
                break
            # quadratic interpolation on the 1-D slice, clipped for safety
            if np.isfinite(f_trial) and f_trial > fx and slope < 0:
                denom = 2.0 * (f_trial - fx - slope * step)
                cand = -slope * step * step / denom if denom > 0 else 0.5 * step
                step = min(max(cand, 0.1 * step), 0.5 * step)
            else:
                step *= 0.5
        if x_new is None:
            break  # no acceptable step; keep best point found so far

        g_new = np.asarray(grad(x_new), dtype=float)
        if not np.all(np.isfinite(g_new)):
            x, fx = x_new, f_new
            if fx < best_f:
                best_x, best_f = x.copy(), fx
            break
        s = x_new - x
        yv = g_new - g
        sy = np.dot(s, yv)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
            s_hist.append(s)
            y_hist.append(yv)
            rho_hist.append(1.0 / sy)
        x, fx, g = x_new, f_new, g_new
        if fx < best_f:
            best_x, best_f = x.copy(), fx

    return LbfgsResult(x=best_x, fun=best_f, iterations=it, n_evals=n_evals, converged=converged)


def multistart(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    starts: Sequence[np.ndarray],
    bounds: BoxBounds | None = None,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> list[LbfgsResult]:
    """Run :func:`lbfgs_minimize` from every start and rank the outcomes.

    Results are sorted ascending by objective value with ties broken by
    start index, so the output is deterministic given the starts.  Starts
    that fail numerically are dropped; if all fail a
    :class:`NumericalFailureError` is raised.
    """
    if len(starts) == 0:
        raise InvalidInputError("multistart requires at least one start point")
    results = []
    for idx, x0 in enumerate(starts):
        try:
            res = lbfgs_minimize(f, grad, x0, bounds=bounds, tol=tol, max_iter=max_iter)
        except NumericalFailureError:
            continue
        results.append((res.fun, idx, res))
    if not results:
        raise NumericalFailureError("all multistart runs failed")
    results.sort(key=lambda t: (t[0], t[1]))
    return [r for _, _, r in results]


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient with per-dimension step ``h*max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        hi = h * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += hi
        xm[i] -= hi
        g[i] = (float(f(xp)) - float(f(xm))) / (2.0 * hi)
    return g


def fd_gradient_batched(f_batch, X: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradients for a batch of points in one objective call.

    ``f_batch`` maps an ``(m, d)`` array to ``(m,)`` values; the full
    ``(B, 2d)``-point stencil is evaluated in a single call.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    B, d = X.shape
    steps = h * np.maximum(1.0, np.abs(X))  # (B, d)
    pts = np.repeat(X[:, None, :], 2 * d, axis=1)  # (B, 2d, d)
    idx = np.arange(d)
    pts[:, 2 * idx, idx] += steps
    pts[:, 2 * idx + 1, idx] -= steps
    vals = np.asarray(f_batch(pts.reshape(B * 2 * d, d))).reshape(B, 2 * d)
    return (vals[:, 0::2] - vals[:, 1::2]) / (2.0 * steps)


def _two_loop_batched(G, hist):
    """Vectorized two-loop recursion; slots with rho == 0 are no-ops."""
    q = G.copy()
    alphas = []
    for s, y, rho in reversed(hist):
        a = rho * np.einsum("bd,bd->b", s, q)
        alphas.append(a)
        q -= a[:, None] * y
    gamma = np.ones(G.shape[0])
    found = np.zeros(G.shape[0], dtype=bool)
    for s, y, rho in reversed(hist):
        m = (rho > 0) & ~found
        if np.any(m):
            gamma[m] = (np.einsum("bd,bd->b", s, y)
                        / np.maximum(np.einsum("bd,bd->b", y, y), 1e-300))[m]
            found |= m
    q *= gamma[:, None]
    for (s, y, rho), a in zip(hist, reversed(alphas)):
        b = rho * np.einsum("bd,bd->b", y, q)
        q += (a - b)[:, None] * s
    return -q


def lbfgs_minimize_batched(
    f_batch,
    x0: np.ndarray,
    bounds: BoxBounds | None = None,
    tol: float = 1e-6,
    max_iter: int = 60,
    memory: int = 10,
    fd_step: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Run box-projected L-BFGS from many starts in lockstep.

    All starts advance together so the objective is only ever evaluated in
    batched calls, which is what makes inner acquisition searches cheap.
    Gradients come from :func:`fd_gradient_batched`.  Returns the best point
    and value per start; starts whose objective is non-finite at the origin
    keep their start point with value ``inf``.  Fully deterministic.
    """
    X = np.atleast_2d(np.asarray(x0, dtype=float)).copy()
    if bounds is not None:
        X = bounds.clip(X)
    B, d = X.shape

    def project(Z):
        return bounds.clip(Z) if bounds is not None else Z

    F = np.asarray(f_batch(X), dtype=float)
    G = fd_gradient_batched(f_batch, X, fd_step)
    active = np.isfinite(F) & np.all(np.isfinite(G), axis=1)
    F = np.where(np.isfinite(F), F, np.inf)
    bestX, bestF = X.copy(), F.copy()
    hist: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    first_step = np.minimum(1.0, 1.0 / np.maximum(np.linalg.norm(G, axis=1), 1.0))

    for it in range(max_iter):
        if not np.any(active):
            break
        PG = X - project(X - G)
        active &= np.max(np.abs(PG), axis=1) >= tol
        if not np.any(active):
            break

        D = _two_loop_batched(G, hist) if hist else -G
        slope = np.einsum("bd,bd->b", G, D)
        bad = ~np.all(np.isfinite(D), axis=1) | (slope >= 0)
        if np.any(bad):
            D[bad] = -G[bad]
            slope[bad] = -np.einsum("bd,bd->b", G[bad], G[bad])

        step = np.ones(B) if hist else first_step.copy()
        accepted = np.zeros(B, dtype=bool)
        Xn, Fn = X.copy(), F.copy()
        trying = active.copy()
        for _ in range(_MAX_BACKTRACKS):
            idx = np.flatnonzero(trying)
            if idx.size == 0:
                break
            T = project(X[idx] + step[idx, None] * D[idx])
            moved = np.max(np.abs(T - X[idx]), axis=1) > 0.0
            Ft = np.asarray(f_batch(T), dtype=float)
            armijo = F[idx] + _ARMIJO_C1 * np.einsum("bd,bd->b", G[idx], T - X[idx])
            ok = np.isfinite(Ft) & (Ft <= armijo) & moved
            acc = idx[ok]
            Xn[acc] = T[ok]
            Fn[acc] = Ft[ok]
            accepted[acc] = True
            trying[acc] = False
            trying[idx[~moved]] = False
            step[trying] *= 0.5
        active &= accepted
        if not np.any(active):
            break

        Gn = G.copy()
        aid = np.flatnonzero(active)
        Gn[aid] = fd_gradient_batched(f_batch, Xn[aid], fd_step)
        grad_ok = np.all(np.isfinite(Gn), axis=1)
        active &= grad_ok

        s = Xn - X
        yv = Gn - G
        sy = np.einsum("bd,bd->b", s, yv)
        norm_ok = sy > 1e-10 * np.linalg.norm(s, axis=1) * np.linalg.norm(yv, axis=1)
        valid = active & norm_ok
        rho = np.where(valid, 1.0 / np.where(valid, sy, 1.0), 0.0)
        hist.append((np.where(valid[:, None], s, 0.0),
                     np.where(valid[:, None], yv, 0.0), rho))
        if len(hist) > memory:
            hist.pop(0)

        X, F, G = Xn, Fn, Gn
        better = F < bestF
        bestX[better] = X[better]
        bestF[better] = F[better]

    return bestX, bestF


def sobol_sample(n: int, d: int, seed: int | None = None) -> np.ndarray:
    """First ``n`` points of a ``d``-dimensional Sobol sequence in [0, 1).

    With ``seed=None`` the raw (unscrambled) sequence is returned.  An
    integer seed applies a digital shift: every dimension's 32-bit integer
    lattice is XOR-ed with a seed-derived key, which randomizes the sample
    while preserving its dyadic equidistribution.
    """
    if n < 0:
        raise InvalidInputError("n must be non-negative")
    if d < 1 or d > 21201:
        raise InvalidInputError(f"dimension {d} outside supported range 1..21201")
    with warnings.catch_warnings():
        # n is frequently not a power of two here; the balance warning is noise.
        warnings.simplefilter("ignore")
        eng = qmc.Sobol(d, scramble=False, bits=32)
        pts = eng.random(n)
    if seed is None or n == 0:
        return pts
    ints = np.round(pts * (1 << 32)).astype(np.uint64)
    rng = np.random.default_rng(seed)
    keys = rng.integers(0, 1 << 32, size=d, dtype=np.uint64)
    return ((ints ^ keys) / float(1 << 32)).astype(float)

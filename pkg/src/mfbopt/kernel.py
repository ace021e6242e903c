"""Mixed-input covariance structure.

Continuous coordinates enter a Gaussian correlation with per-dimension
log10 length-scale exponents.  Categorical variables (including the data
source label) are one-hot encoded and mapped through learned linear
embeddings into low-dimensional latent spaces; squared latent distances
enter the same exponential.  Observation noise is modeled with a per-source
nugget vector added to the covariance diagonal.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import InvalidInputError, NumericalFailureError
from .types import MixedPoint

__all__ = [
    "CategoricalSpec",
    "KernelParams",
    "NuggetVector",
    "encode_priors",
    "embed",
    "correlation",
    "correlation_matrix",
    "cross_correlation",
    "covariance_matrix",
    "cholesky_covariance",
    "NUGGET_FLOOR",
    "MAX_NUGGET_FLOOR",
]

NUGGET_FLOOR = 1e-8
MAX_NUGGET_FLOOR = 1e-2

# Default latent dimensions for the categorical and source embeddings.
DEFAULT_LATENT_DIM = 2


@dataclasses.dataclass(frozen=True)
class CategoricalSpec:
    """Declares the categorical block and the number of data sources.

    ``variables`` lists ``(name, level_count)`` pairs for the ordinary
    categorical inputs (level counts >= 2, indices dense ``0..levels-1``).
    ``sources`` is the number of data sources; the source label is encoded
    and embedded separately from the other categorical variables.
    """

    variables: tuple[tuple[str, int], ...] = ()
    sources: int = 1

    def __post_init__(self):
        object.__setattr__(
            self, "variables", tuple((str(n), int(c)) for n, c in self.variables)
        )
        for name, count in self.variables:
            if count < 2:
                raise InvalidInputError(f"variable {name!r} needs >= 2 levels")
        if self.sources < 1:
            raise InvalidInputError("at least one source is required")

    @property
    def dt(self) -> int:
        return len(self.variables)

    @property
    def level_counts(self) -> tuple[int, ...]:
        return tuple(c for _, c in self.variables)

    @property
    def d_pi_t(self) -> int:
        return sum(self.level_counts)

    @property
    def d_pi_s(self) -> int:
        return self.sources

    def validate_t(self, t: Sequence[int]) -> None:
        if len(t) != self.dt:
            raise InvalidInputError(f"expected {self.dt} categorical levels, got {len(t)}")
        for v, (name, count) in zip(t, self.variables):
            if not 0 <= int(v) < count:
                raise InvalidInputError(f"level {v} out of range for variable {name!r}")

    def validate_source(self, s: int) -> None:
        if not 0 <= int(s) < self.sources:
            raise InvalidInputError(f"source {s} out of range 0..{self.sources - 1}")


@dataclasses.dataclass(frozen=True)
class KernelParams:
    """Learned kernel hyperparameters.

    ``omega`` holds log10 exponents of the per-dimension distance weights,
    ``theta_h``/``theta_z`` are the embedding matrices (one row per one-hot
    prior dimension, one column per latent dimension) for the categorical
    block and the source label, and ``sigma2`` is the process variance.
    """

    omega: np.ndarray
    theta_h: np.ndarray
    theta_z: np.ndarray
    sigma2: float

    def __post_init__(self):
        omega = np.atleast_1d(np.asarray(self.omega, dtype=float))
        th = np.asarray(self.theta_h, dtype=float).reshape(
            np.shape(self.theta_h) if np.ndim(self.theta_h) == 2 else (0, DEFAULT_LATENT_DIM)
        )
        tz = np.asarray(self.theta_z, dtype=float)
        if tz.ndim != 2:
            tz = tz.reshape(-1, DEFAULT_LATENT_DIM) if tz.size else tz.reshape(0, DEFAULT_LATENT_DIM)
        if not np.all(np.isfinite(omega)):
            raise InvalidInputError("omega must be finite")
        if not (np.all(np.isfinite(th)) and np.all(np.isfinite(tz))):
            raise InvalidInputError("embedding weights must be finite")
        if not self.sigma2 > 0:
            raise InvalidInputError("sigma2 must be positive")
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "theta_h", th)
        object.__setattr__(self, "theta_z", tz)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def dx(self) -> int:
        return self.omega.size


@dataclasses.dataclass(frozen=True)
class NuggetVector:
    """Per-source diagonal covariance inflation, floored at ``NUGGET_FLOOR``."""

    delta: np.ndarray

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.delta, dtype=float))
        if np.any(~np.isfinite(d)) or np.any(d < 0):
            raise InvalidInputError("nuggets must be finite and non-negative")
        object.__setattr__(self, "delta", np.maximum(d, NUGGET_FLOOR))

    @property
    def n_sources(self) -> int:
        return self.delta.size

    def per_point(self, source: np.ndarray) -> np.ndarray:
        source = np.asarray(source, dtype=int)
        if source.size and (source.min() < 0 or source.max() >= self.n_sources):
            raise InvalidInputError("source label has no nugget entry")
        return self.delta[source]


def encode_priors(levels: Sequence[int], level_counts: Sequence[int]) -> np.ndarray:
    """Concatenated one-hot encoding of categorical level indices.

    ``levels[i]`` selects a position inside a block of length
    ``level_counts[i]``; blocks are concatenated in order.
    """
    levels = [int(v) for v in levels]
    counts = [int(c) for c in level_counts]
    if len(levels) != len(counts):
        raise InvalidInputError("levels and level_counts must have equal length")
    out = np.zeros(sum(counts))
    offset = 0
    for v, c in zip(levels, counts):
        if not 0 <= v < c:
            raise InvalidInputError(f"level {v} out of range 0..{c - 1}")
        out[offset + v] = 1.0
        offset += c
    return out


def embed(pi: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Linear embedding of a prior vector: ``pi @ weights``.

    ``weights`` has one row per prior dimension and one column per latent
    dimension, so a one-hot prior selects that level's weight vector.
    """
    pi = np.asarray(pi, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 2 or pi.shape[-1] != weights.shape[0]:
        raise InvalidInputError(
            f"prior of length {pi.shape[-1]} does not match weight rows {weights.shape}"
        )
    return pi @ weights


def _t_onehot(t: np.ndarray, spec: CategoricalSpec) -> np.ndarray:
    """Row-wise concatenated one-hot matrix for the categorical block."""
    t = np.asarray(t, dtype=int)
    n = t.shape[0]
    out = np.zeros((n, spec.d_pi_t))
    offset = 0
    for col, (_, count) in enumerate(spec.variables):
        vals = t[:, col]
        if vals.size and (vals.min() < 0 or vals.max() >= count):
            raise InvalidInputError("categorical level out of range")
        out[np.arange(n), offset + vals] = 1.0
        offset += count
    return out


def latent_coordinates(
    t: np.ndarray, source: np.ndarray, params: KernelParams, spec: CategoricalSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Latent positions (h, z) for each row of a dataset."""
    n = np.asarray(source).shape[0]
    if spec.dt > 0:
        h = _t_onehot(t, spec) @ params.theta_h
    else:
        h = np.zeros((n, 0))
    if spec.sources > 1:
        if params.theta_z.shape[0] != spec.sources:
            raise InvalidInputError("theta_z rows must match source count")
        src = np.asarray(source, dtype=int)
        if src.size and (src.min() < 0 or src.max() >= spec.sources):
            raise InvalidInputError("source label out of range")
        z = params.theta_z[src]
    else:
        z = np.zeros((n, 0))
    return h, z


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between rows of a and b."""
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def correlation_matrix(
    x: np.ndarray, t: np.ndarray, source: np.ndarray,
    params: KernelParams, spec: CategoricalSpec,
) -> np.ndarray:
    """Symmetric correlation matrix over a set of mixed points.

    Entry (i, j) is ``exp(-sum_d 10^omega_d (x_id - x_jd)^2
    - |h_i - h_j|^2 - |z_i - z_j|^2)``; the diagonal is exactly one.
    """
    r = cross_correlation(x, t, source, x, t, source, params, spec)
    np.fill_diagonal(r, 1.0)
    return r


def cross_correlation(
    x1, t1, s1, x2, t2, s2, params: KernelParams, spec: CategoricalSpec
) -> np.ndarray:
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(x2))):
        raise InvalidInputError("inputs must be finite")
    if x1.shape[1] != params.dx or x2.shape[1] != params.dx:
        raise InvalidInputError("continuous dimension does not match omega")
    w = 10.0 ** params.omega
    d = x1[:, None, :] - x2[None, :, :]
    dist = np.einsum("ijk,k->ij", d * d, w)
    h1, z1 = latent_coordinates(t1, s1, params, spec)
    h2, z2 = latent_coordinates(t2, s2, params, spec)
    dist += _sqdist(h1, h2) + _sqdist(z1, z2)
    return np.exp(-dist)


def correlation(u: MixedPoint, u2: MixedPoint, params: KernelParams,
                spec: CategoricalSpec) -> float:
    """Correlation between two mixed points; equals 1 when they coincide."""
    spec.validate_t(u.t)
    spec.validate_t(u2.t)
    spec.validate_source(u.source)
    spec.validate_source(u2.source)
    r = cross_correlation(
        u.x[None, :], np.asarray([u.t], dtype=int), np.asarray([u.source]),
        u2.x[None, :], np.asarray([u2.t], dtype=int), np.asarray([u2.source]),
        params, spec,
    )
    return float(r[0, 0])


def covariance_matrix(
    x, t, source, params: KernelParams, nugget: NuggetVector, spec: CategoricalSpec
) -> np.ndarray:
    """Training covariance ``sigma2 * R + diag(nugget per point)``."""
    r = correlation_matrix(x, t, source, params, spec)
    c = params.sigma2 * r
    c[np.diag_indices_from(c)] += nugget.per_point(source)
    return c


def covariance_from_points(
    points: Sequence[MixedPoint], params: KernelParams, nugget: NuggetVector,
    spec: CategoricalSpec,
) -> np.ndarray:
    x = np.stack([p.x for p in points])
    t = np.asarray([p.t for p in points], dtype=int).reshape(len(points), -1)
    s = np.asarray([p.source for p in points])
    return covariance_matrix(x, t, s, params, nugget, spec)


def cholesky_covariance(
    corr: np.ndarray, sigma2: float, per_point_nugget: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """Factorize ``sigma2*R + diag(nugget)``, escalating the nugget floor on failure.

    Returns ``(L, effective_nugget, floor_used)`` where ``L`` is the lower
    Cholesky factor.  The floor starts at ``NUGGET_FLOOR`` and is escalated
    tenfold per failed attempt up to ``MAX_NUGGET_FLOOR``.

    Raises
    ------
    NumericalFailureError
        If factorization still fails at the maximum floor.
    """
    floor = NUGGET_FLOOR
    while True:
        nug = np.maximum(per_point_nugget, floor)
        c = sigma2 * corr
        c[np.diag_indices_from(c)] += nug
        try:
            return np.linalg.cholesky(c), nug, floor
        except np.linalg.LinAlgError:
            if floor >= MAX_NUGGET_FLOOR:
                raise NumericalFailureError(
                    "covariance factorization failed at maximum nugget floor"
                ) from None
            floor *= 10.0

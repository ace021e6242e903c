"""Core data containers: design points and concatenated multi-source data."""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import InvalidInputError

__all__ = ["MixedPoint", "MfDataset"]


@dataclasses.dataclass(frozen=True)
class MixedPoint:
    """A single design point: continuous block, categorical block, source label.

    ``x`` holds the continuous coordinates, ``t`` the categorical level
    indices (empty tuple when there are none), and ``source`` the index of
    the data source the point is associated with (0-based; the high-fidelity
    source is one of them).
    """

    x: np.ndarray
    t: tuple[int, ...] = ()
    source: int = 0

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if x.ndim != 1:
            raise InvalidInputError("x must be a 1-D vector")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("x must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "t", tuple(int(v) for v in self.t))
        if self.source < 0:
            raise InvalidInputError("source index must be non-negative")


class MfDataset:
    """Concatenated observations from any number of sources.

    Rows align across all arrays: ``x[i]`` was evaluated at source
    ``source[i]`` giving objective ``y[i]`` and constraint values ``g[i]``
    (shape ``(n, n_constraints)``; zero columns when unconstrained).
    Instances are treated as immutable; :meth:`append` returns a new dataset.
    """

    def __init__(self, x, source, y, g=None, t=None):
        self.x = np.atleast_2d(np.asarray(x, dtype=float))
        self.source = np.asarray(source, dtype=int)
        self.y = np.asarray(y, dtype=float)
        n = self.x.shape[0]
        if g is None:
            g = np.zeros((n, 0))
        self.g = np.asarray(g, dtype=float)
        if self.g.ndim == 1:
            self.g = self.g.reshape(n, -1)
        if t is None:
            t = np.zeros((n, 0), dtype=int)
        self.t = np.asarray(t, dtype=int)
        if self.t.ndim == 1:
            self.t = self.t.reshape(n, -1)
        if not (self.source.shape == (n,) and self.y.shape == (n,)):
            raise InvalidInputError("source/y must have one entry per row of x")
        if self.g.shape[0] != n or self.t.shape[0] != n:
            raise InvalidInputError("g/t must have one row per row of x")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dx(self) -> int:
        return self.x.shape[1]

    @property
    def n_constraints(self) -> int:
        return self.g.shape[1]

    def point(self, i: int) -> MixedPoint:
        return MixedPoint(x=self.x[i], t=tuple(self.t[i]), source=int(self.source[i]))

    def counts_by_source(self, n_sources: int) -> np.ndarray:
        return np.bincount(self.source, minlength=n_sources)

    def append(self, point: MixedPoint, y: float, g=None) -> "MfDataset":
        """Return a new dataset with one extra observation."""
        g_row = np.zeros(self.n_constraints) if g is None else np.asarray(g, dtype=float)
        g_row = g_row.reshape(1, -1)
        if g_row.shape[1] != self.n_constraints:
            raise InvalidInputError(
                f"expected {self.n_constraints} constraint values, got {g_row.shape[1]}"
            )
        if point.x.size != self.dx:
            raise InvalidInputError("point dimension does not match dataset")
        t_row = np.asarray(point.t, dtype=int).reshape(1, -1)
        if t_row.shape[1] != self.t.shape[1]:
            raise InvalidInputError("categorical block does not match dataset")
        return MfDataset(
            x=np.vstack([self.x, point.x[None, :]]),
            source=np.append(self.source, point.source),
            y=np.append(self.y, float(y)),
            g=np.vstack([self.g, g_row]),
            t=np.vstack([self.t, t_row]),
        )

    def subset(self, mask) -> "MfDataset":
        mask = np.asarray(mask)
        return MfDataset(
            x=self.x[mask], source=self.source[mask], y=self.y[mask],
            g=self.g[mask], t=self.t[mask],
        )

    def digest(self) -> str:
        """Hex digest of the raw data, used to pair exported models with data."""
        import hashlib

        h = hashlib.sha256()
        for arr in (self.x, self.source.astype(np.int64), self.y, self.g,
                    self.t.astype(np.int64)):
            h.update(np.ascontiguousarray(arr).tobytes())
            h.update(str(arr.shape).encode())
        return h.hexdigest()

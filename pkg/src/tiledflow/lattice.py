"""Core value types for extended 3D latents.

The scene lives on two aligned lattices: a coarse structure lattice of
shape (a*N, b*N, N, C) holding real-valued features, and a fine grid of
shape (a*M, b*M, M) holding occupancy / per-voxel feature vectors.  The
extension factors a and b widen the base model's cubic latent along x
and y so one fixed-size backbone can cover a wide scene patch by patch.

All value types are immutable after construction (array buffers are
marked read-only); operations return new values.  Lattice data is stored
as float32; reductions elsewhere accumulate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BoundsError, DimensionError

DTYPE = np.float32


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Dims:
    """Lattice geometry: extension factors and base side lengths.

    a, b: extension factors along x and y.
    N:    side of the coarse structure lattice.
    M:    side of the fine occupancy grid; must be a multiple of N.
    C:    channel count of the coarse lattice.
    l:    feature width of per-voxel sparse features.
    """

    a: int = 2
    b: int = 2
    N: int = 8
    M: int = 32
    C: int = 1
    l: int = 4

    def __post_init__(self):
        for name in ("a", "b", "N", "M", "C", "l"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise DimensionError(f"Dims.{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.M % self.N != 0:
            raise DimensionError(f"M={self.M} must be an integer multiple of N={self.N}")

    @property
    def ratio(self) -> int:
        """Fine cells per coarse cell along each axis (M // N)."""
        return self.M // self.N

    @property
    def dense_shape(self) -> tuple[int, int, int, int]:
        return (self.a * self.N, self.b * self.N, self.N, self.C)

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return (self.a * self.M, self.b * self.M, self.M)

    def patch_dims(self) -> "Dims":
        """Dims of a single unextended patch (a = b = 1, same sides)."""
        return Dims(1, 1, self.N, self.M, self.C, self.l)


@dataclass(frozen=True)
class DenseLatent:
    """Real-valued lattice of shape (a*N, b*N, N, C); finite entries only."""

    dims: Dims
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=DTYPE)
        if data.shape != self.dims.dense_shape:
            raise DimensionError(
                f"dense latent shape {data.shape} != expected {self.dims.dense_shape}"
            )
        if not np.isfinite(data).all():
            raise ValueError("dense latent contains non-finite entries")
        object.__setattr__(self, "data", _freeze(data))

    @classmethod
    def zeros(cls, dims: Dims) -> "DenseLatent":
        return cls(dims, np.zeros(dims.dense_shape, dtype=DTYPE))

    @classmethod
    def full(cls, dims: Dims, value: float) -> "DenseLatent":
        return cls(dims, np.full(dims.dense_shape, value, dtype=DTYPE))

    def with_data(self, data: np.ndarray) -> "DenseLatent":
        return DenseLatent(self.dims, data)


def _canonical_sparse(coords: np.ndarray, features: np.ndarray):
    """Sort entries lexicographically by coordinate; reject duplicates."""
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    coords = coords[order]
    features = features[order]
    if len(coords) > 1 and (np.diff(coords, axis=0) == 0).all(axis=1).any():
        raise ValueError("sparse latent has duplicate coordinates")
    return coords, features


@dataclass(frozen=True)
class SparseLatent:
    """Set of (voxel coordinate, feature vector) pairs on the fine grid.

    Coordinates live in [0, a*M) x [0, b*M) x [0, M), are unique, and are
    kept in lexicographic order so that equal sets compare bit-equal.
    Features are (n, l) float32.
    """

    dims: Dims
    coords: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        coords = np.ascontiguousarray(np.asarray(self.coords).reshape(-1, 3), dtype=np.int64)
        features = np.ascontiguousarray(
            np.asarray(self.features).reshape(len(coords), self.dims.l), dtype=DTYPE
        )
        hi = np.array(self.dims.grid_shape, dtype=np.int64)
        if len(coords) and ((coords < 0) | (coords >= hi)).any():
            bad = coords[((coords < 0) | (coords >= hi)).any(axis=1)][0]
            raise BoundsError(f"coordinate {tuple(bad)} outside grid {self.dims.grid_shape}")
        if not np.isfinite(features).all():
            raise ValueError("sparse latent contains non-finite features")
        coords, features = _canonical_sparse(coords, features)
        object.__setattr__(self, "coords", _freeze(coords))
        object.__setattr__(self, "features", _freeze(features))

    def __len__(self) -> int:
        return len(self.coords)

    @classmethod
    def empty(cls, dims: Dims) -> "SparseLatent":
        return cls(dims, np.zeros((0, 3), dtype=np.int64), np.zeros((0, dims.l), dtype=DTYPE))

    @classmethod
    def from_dict(cls, dims: Dims, entries: Mapping[tuple, np.ndarray]) -> "SparseLatent":
        coords = np.array(sorted(entries.keys()), dtype=np.int64).reshape(-1, 3)
        feats = np.array([entries[tuple(c)] for c in coords], dtype=DTYPE).reshape(-1, dims.l)
        return cls(dims, coords, feats)

    def as_dict(self) -> dict[tuple, np.ndarray]:
        return {tuple(int(x) for x in c): f for c, f in zip(self.coords, self.features)}

    def feature_at(self, p: Sequence[int]) -> np.ndarray:
        p = np.asarray(p, dtype=np.int64)
        idx = np.searchsorted(self._keys(), _coord_key(p[None, :], self.dims)[0])
        if idx >= len(self.coords) or not (self.coords[idx] == p).all():
            raise KeyError(f"no entry at {tuple(int(x) for x in p)}")
        return self.features[idx]

    def _keys(self) -> np.ndarray:
        return _coord_key(self.coords, self.dims)

    def with_features(self, features: np.ndarray) -> "SparseLatent":
        return SparseLatent(self.dims, self.coords, features)


def _coord_key(coords: np.ndarray, dims: Dims) -> np.ndarray:
    """Flatten coordinates into sortable scalar keys (lexicographic order)."""
    bm, m = dims.b * dims.M, dims.M
    return (coords[:, 0] * bm + coords[:, 1]) * m + coords[:, 2]


@dataclass(frozen=True)
class OccupancyGrid:
    """Boolean voxel grid of shape (a*M, b*M, M)."""

    dims: Dims
    occupied: np.ndarray

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occupied, dtype=bool)
        if occ.shape != self.dims.grid_shape:
            raise DimensionError(
                f"occupancy shape {occ.shape} != expected {self.dims.grid_shape}"
            )
        object.__setattr__(self, "occupied", _freeze(occ))

    @classmethod
    def empty(cls, dims: Dims) -> "OccupancyGrid":
        return cls(dims, np.zeros(dims.grid_shape, dtype=bool))

    @classmethod
    def from_coords(cls, dims: Dims, coords: np.ndarray) -> "OccupancyGrid":
        occ = np.zeros(dims.grid_shape, dtype=bool)
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        hi = np.array(dims.grid_shape, dtype=np.int64)
        if len(coords) and ((coords < 0) | (coords >= hi)).any():
            raise BoundsError("occupancy coordinate out of bounds")
        occ[coords[:, 0], coords[:, 1], coords[:, 2]] = True
        return cls(dims, occ)

    def coords(self) -> np.ndarray:
        """Occupied coordinates, (n, 3) int64 in lexicographic order."""
        return np.argwhere(self.occupied).astype(np.int64)

    def count(self) -> int:
        return int(self.occupied.sum())


@dataclass(frozen=True)
class Schedule:
    """Strictly decreasing time sequence [t_1 > ... > t_k = 0], t_1 <= 1."""

    times: tuple

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if len(times) < 2:
            raise ValueError("schedule needs at least 2 times")
        if any(b >= a for a, b in zip(times, times[1:])):
            raise ValueError("schedule times must be strictly decreasing")
        if times[-1] != 0.0:
            raise ValueError("schedule must terminate at t = 0")
        if times[0] > 1.0:
            raise ValueError("schedule must start at t <= 1")
        object.__setattr__(self, "times", times)

    @classmethod
    def linear(cls, t_start: float, k: int) -> "Schedule":
        """k uniformly spaced times from t_start down to 0."""
        return cls(tuple(np.linspace(t_start, 0.0, k)))

    def __len__(self) -> int:
        return len(self.times)

    def intervals(self) -> Iterable[tuple[float, float]]:
        """(t_m, t_{m+1}) pairs; fields are evaluated at the left endpoint."""
        return zip(self.times[:-1], self.times[1:])


def lerp_latent(x0: DenseLatent, eps: DenseLatent, t: float) -> DenseLatent:
    """Linear interpolation (1 - t) * x0 + t * eps between clean and noise."""
    if x0.dims != eps.dims:
        raise DimensionError(f"dims mismatch: {x0.dims} vs {eps.dims}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    t = DTYPE(t)
    return x0.with_data((DTYPE(1) - t) * x0.data + t * eps.data)


def sample_gaussian(dims: Dims, seed: int) -> DenseLatent:
    """I.i.d. standard-normal lattice; bit-identical for a fixed seed."""
    rng = np.random.default_rng(seed)
    return DenseLatent(dims, rng.standard_normal(dims.dense_shape, dtype=DTYPE))


def init_sparse_noise(coords: np.ndarray, dims: Dims, seed: int) -> SparseLatent:
    """One i.i.d. standard-normal feature vector per coordinate.

    Coordinates are canonicalized (sorted) before drawing, so the result
    depends only on the coordinate *set* and the seed.
    """
    coords = np.ascontiguousarray(np.asarray(coords).reshape(-1, 3), dtype=np.int64)
    if len(coords):
        order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
        coords = coords[order]
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((len(coords), dims.l), dtype=DTYPE)
    return SparseLatent(dims, coords, feats)

"""Sliding-window patchification of extended lattices and its inverses.

A window of side K steps across the x/y-extended lattice with stride
K/d, so d controls overlap density.  Patches map back by zero-padding,
and overlapping contributions are combined by per-cell averaging over
the coverage count.  Dilated sampling is the complementary scheme: the
lattice splits into K x K blocks of a x b pillar columns, and a*b
backbone-sized samples are assembled from one pillar per block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, CoverageError, DimensionError
from .lattice import DTYPE, DenseLatent, Dims, SparseLatent, _coord_key


@dataclass(frozen=True)
class Window:
    """Window (i, j) of side K with division factor d.

    Covers [i*K/d, i*K/d + K) x [j*K/d, j*K/d + K) x [0, K).
    """

    i: int
    j: int
    K: int
    d: int

    def __post_init__(self):
        if self.d < 1 or self.K % self.d != 0:
            raise ConfigError(f"division factor d={self.d} must divide K={self.K}")
        if self.i < 0 or self.j < 0:
            raise ConfigError("window indices must be non-negative")

    @property
    def stride(self) -> int:
        return self.K // self.d

    @property
    def x0(self) -> int:
        return self.i * self.stride

    @property
    def y0(self) -> int:
        return self.j * self.stride

    @property
    def box(self) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
        return ((self.x0, self.x0 + self.K), (self.y0, self.y0 + self.K), (0, self.K))

    def contains(self, p: Sequence[int]) -> bool:
        x, y, z = (int(v) for v in p)
        return (
            self.x0 <= x < self.x0 + self.K
            and self.y0 <= y < self.y0 + self.K
            and 0 <= z < self.K
        )


@dataclass(frozen=True)
class PatchGrid:
    """All windows tiling an (a*K, b*K, K) lattice: i in [0, (a-1)d], j in [0, (b-1)d]."""

    dims: Dims
    d: int
    K: int

    def __post_init__(self):
        if self.K not in (self.dims.N, self.dims.M):
            raise ConfigError(f"K={self.K} must be one of N={self.dims.N}, M={self.dims.M}")
        if self.d < 1 or self.K % self.d != 0:
            raise ConfigError(f"division factor d={self.d} must divide K={self.K}")

    @property
    def ni(self) -> int:
        return (self.dims.a - 1) * self.d + 1

    @property
    def nj(self) -> int:
        return (self.dims.b - 1) * self.d + 1

    @property
    def count(self) -> int:
        return self.ni * self.nj

    def window(self, i: int, j: int) -> Window:
        if not (0 <= i < self.ni and 0 <= j < self.nj):
            raise ConfigError(f"window index ({i}, {j}) outside grid {self.ni}x{self.nj}")
        return Window(i, j, self.K, self.d)

    def windows(self):
        """All windows in fixed row-major order (the reduction order)."""
        for i in range(self.ni):
            for j in range(self.nj):
                yield self.window(i, j)

    def axis_coverage(self, n_windows: int, extent: int) -> np.ndarray:
        """Per-position window-coverage count along one extended axis."""
        pos = np.arange(extent)
        s = self.K // self.d
        lo = np.maximum(0, -(-(pos - self.K + 1) // s))  # ceil division
        hi = np.minimum(n_windows - 1, pos // s)
        return (hi - lo + 1).astype(np.int64)

    def coverage_xy(self) -> np.ndarray:
        """Coverage count per (x, y) column of the extended lattice."""
        cx = self.axis_coverage(self.ni, self.dims.a * self.K)
        cy = self.axis_coverage(self.nj, self.dims.b * self.K)
        return np.outer(cx, cy)

    def coverage_of_coords(self, coords: np.ndarray) -> np.ndarray:
        cov = self.coverage_xy()
        return cov[coords[:, 0], coords[:, 1]]


def make_patch_grid(dims: Dims, d: int, K: int) -> PatchGrid:
    """Overlapping-window grid; ((a-1)d + 1) * ((b-1)d + 1) windows in total."""
    return PatchGrid(dims, d, K)


def patch_dense(Z: DenseLatent, w: Window) -> DenseLatent:
    """Copy the window's sub-lattice out as an unextended (K, K, K, C) latent."""
    (x0, x1), (y0, y1), (z0, z1) = w.box
    if x1 > Z.data.shape[0] or y1 > Z.data.shape[1] or z1 > Z.data.shape[2]:
        raise DimensionError(f"window {w.box} exceeds lattice {Z.data.shape}")
    sub = Z.data[x0:x1, y0:y1, z0:z1].copy()
    return DenseLatent(Z.dims.patch_dims(), sub)


def unpatch_dense(X: DenseLatent, w: Window, dims: Dims) -> DenseLatent:
    """Zero-padded inverse: the window box receives X, everything else 0."""
    out = np.zeros(dims.dense_shape, dtype=DTYPE)
    (x0, x1), (y0, y1), _ = w.box
    out[x0:x1, y0:y1, : w.K] = X.data
    return DenseLatent(dims, out)


def patch_sparse(Z: SparseLatent, w: Window) -> SparseLatent:
    """Keep entries inside the window, translated into [0, K)^2 x [0, K)."""
    c = Z.coords
    mask = (
        (c[:, 0] >= w.x0)
        & (c[:, 0] < w.x0 + w.K)
        & (c[:, 1] >= w.y0)
        & (c[:, 1] < w.y0 + w.K)
        & (c[:, 2] < w.K)
    )
    shifted = c[mask] - np.array([w.x0, w.y0, 0], dtype=np.int64)
    return SparseLatent(Z.dims.patch_dims(), shifted, Z.features[mask])


def unpatch_sparse(X: SparseLatent, w: Window, global_coords: np.ndarray, dims: Dims) -> SparseLatent:
    """Translate a patch back; global coordinates it misses get the zero feature."""
    global_coords = np.asarray(global_coords, dtype=np.int64).reshape(-1, 3)
    offset = np.array([w.x0, w.y0, 0], dtype=np.int64)
    translated = X.coords + offset

    out = SparseLatent(dims, translated, X.features)
    missing = _coords_difference(global_coords, out.coords, dims)
    if len(missing) == 0:
        return out
    coords = np.concatenate([out.coords, missing])
    feats = np.concatenate([out.features, np.zeros((len(missing), dims.l), dtype=DTYPE)])
    return SparseLatent(dims, coords, feats)


def _coords_difference(candidates: np.ndarray, present: np.ndarray, dims: Dims) -> np.ndarray:
    """Rows of `candidates` whose coordinate is absent from `present`."""
    if len(candidates) == 0:
        return candidates
    ck = _coord_key(candidates, dims)
    pk = _coord_key(present, dims)
    return candidates[~np.isin(ck, pk)]


def merge_vectors(patch_vectors: Mapping, grid: PatchGrid):
    """Average overlapping patch vectors into one extended vector.

    Per cell: sum of zero-padded patch values divided by the number of
    covering windows.  Sparse latents use the same rule per coordinate
    and feature channel, dividing by the geometric coverage count.
    Accumulation runs in float64 with a fixed window order.
    """
    expected = {(w.i, w.j) for w in grid.windows()}
    if set(patch_vectors.keys()) != expected:
        raise CoverageError("merge requires exactly one patch vector per grid window")
    first = patch_vectors[next(iter(sorted(patch_vectors)))]
    if isinstance(first, SparseLatent):
        return _merge_sparse(patch_vectors, grid)
    return _merge_dense(patch_vectors, grid)


def _merge_dense(patch_vectors: Mapping, grid: PatchGrid) -> DenseLatent:
    dims = grid.dims
    aK, bK = dims.a * grid.K, dims.b * grid.K
    C = dims.C
    acc = np.zeros((aK, bK, grid.K, C), dtype=np.float64)
    for w in grid.windows():
        X = patch_vectors[(w.i, w.j)]
        (x0, x1), (y0, y1), _ = w.box
        acc[x0:x1, y0:y1, : w.K] += X.data.astype(np.float64)
    cov = grid.coverage_xy()
    if (cov < 1).any():
        raise CoverageError("uncovered cell in patch grid")
    acc /= cov[:, :, None, None]
    return DenseLatent(dims, acc.astype(DTYPE))


def _merge_sparse(patch_vectors: Mapping, grid: PatchGrid) -> SparseLatent:
    dims = grid.dims
    coord_parts, feat_parts = [], []
    for w in grid.windows():
        X = patch_vectors[(w.i, w.j)]
        offset = np.array([w.x0, w.y0, 0], dtype=np.int64)
        coord_parts.append(X.coords + offset)
        feat_parts.append(X.features.astype(np.float64))
    all_coords = np.concatenate(coord_parts)
    if len(all_coords) == 0:
        return SparseLatent.empty(dims)
    all_feats = np.concatenate(feat_parts)
    keys = _coord_key(all_coords, dims)
    # Stable sort keeps window order within each coordinate group, so the
    # float64 accumulation order is fixed regardless of evaluation order.
    order = np.argsort(keys, kind="stable")
    keys, all_coords, all_feats = keys[order], all_coords[order], all_feats[order]
    starts = np.flatnonzero(np.concatenate([[True], keys[1:] != keys[:-1]]))
    coords = all_coords[starts]
    acc = np.add.reduceat(all_feats, starts, axis=0)
    cov = grid.coverage_of_coords(coords)
    if (cov < 1).any():
        raise CoverageError("sparse coordinate not covered by any window")
    acc /= cov[:, None]
    return SparseLatent(dims, coords, acc.astype(DTYPE))


@dataclass(frozen=True)
class DilatedPartition:
    """a*b index maps, each picking one pillar per K x K block.

    src_x/src_y have shape (a*b, K, K); sample n reads its (u, v, :)
    column from lattice column (src_x[n, u, v], src_y[n, u, v]).  Across
    samples each pillar is used exactly once.
    """

    dims: Dims
    K: int
    src_x: np.ndarray
    src_y: np.ndarray

    def __len__(self) -> int:
        return self.dims.a * self.dims.b

    def gather(self, Z: DenseLatent, n: int) -> DenseLatent:
        data = Z.data[self.src_x[n], self.src_y[n], :, :]
        return DenseLatent(self.dims.patch_dims(), data.copy())

    def scatter(self, sample_vectors: Sequence[DenseLatent]) -> DenseLatent:
        if len(sample_vectors) != len(self):
            raise DimensionError(
                f"expected {len(self)} dilated samples, got {len(sample_vectors)}"
            )
        out = np.zeros(self.dims.dense_shape, dtype=DTYPE)
        for n, sample in enumerate(sample_vectors):
            out[self.src_x[n], self.src_y[n], :, :] = sample.data
        return DenseLatent(self.dims, out)


def dilated_partition(dims: Dims, K: int, seed: int = 0) -> DilatedPartition:
    """Split the (a*K, b*K, K) lattice into K*K blocks of a*b pillars and
    deal the pillars into a*b samples by a seeded per-block permutation."""
    if K not in (dims.N, dims.M):
        raise ConfigError(f"K={K} must be one of N={dims.N}, M={dims.M}")
    a, b = dims.a, dims.b
    n_samples = a * b
    rng = np.random.default_rng(seed)
    src_x = np.empty((n_samples, K, K), dtype=np.int64)
    src_y = np.empty((n_samples, K, K), dtype=np.int64)
    for u in range(K):
        for v in range(K):
            perm = rng.permutation(n_samples)
            sx, sy = np.divmod(perm, b)
            src_x[:, u, v] = u * a + sx
            src_y[:, u, v] = v * b + sy
    return DilatedPartition(dims, K, _ro(src_x), _ro(src_y))


def _ro(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def scatter_dilated(sample_vectors: Sequence[DenseLatent], partition: DilatedPartition) -> DenseLatent:
    """Write each dilated sample back to its pillars; coverage is exact."""
    return partition.scatter(sample_vectors)

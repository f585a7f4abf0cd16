#!/usr/bin/env python3
"""Cosine-weighted stitching of overlapping signed-distance patches.

Decodes two deliberately inconsistent sphere SDFs on overlapping
windows and merges them.  Raised-cosine weights fade each patch out
toward its boundary, so the seam stays smooth instead of jumping
between the two fields.
"""

import numpy as np

from tiledflow.decode import CosineWeightField, merge_sdf_patches
from tiledflow.lattice import Dims
from tiledflow.patchwork import make_patch_grid

dims = Dims(a=2, b=1, N=4, M=8)
grid = make_patch_grid(dims, d=2, K=8)
print(f"lattice {dims.grid_shape}, windows at x0 = "
      f"{[w.x0 for w in grid.windows()]}")

profile = CosineWeightField(8, 2).axis_profile()
print("per-axis blend profile:", np.array2string(profile, precision=3))


def sphere(center, radius=2.5):
    g = np.stack(np.meshgrid(*[np.arange(8) + 0.5] * 3, indexing="ij"), axis=-1)
    return (np.linalg.norm(g - np.asarray(center), axis=-1) - radius).astype(np.float32)


patches = {
    (0, 0): sphere((4.0, 4.0, 4.0)),
    (1, 0): sphere((4.5, 4.0, 4.0)),  # half-cell disagreement with its neighbors
    (2, 0): sphere((4.0, 4.0, 4.0)),
}
merged = merge_sdf_patches(patches, grid)

dx = np.abs(np.diff(merged.data.astype(np.float64), axis=0))
seams = [3, 7, 11]
seam_max = max(dx[x].max() for x in seams)
interior_max = np.delete(dx, seams, axis=0).max()
print(f"max |gradient| across seams: {seam_max:.3f}")
print(f"max |gradient| in interiors: {interior_max:.3f}")
print(f"seam/interior ratio: {seam_max / interior_max:.2f} (smooth if ~1)")

naive = np.concatenate([patches[(0, 0)], patches[(2, 0)][4:]], axis=0)
naive_dx = np.abs(np.diff(naive.astype(np.float64), axis=0))
print(f"for contrast, unblended juxtaposition seam gradient: {naive_dx[7].max():.3f}")

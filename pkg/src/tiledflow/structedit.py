"""Occupancy codec and iterative under-noised structure editing.

The toy codec is a linear stand-in for a trained occupancy VAE: encode
block-averages the fine grid onto the coarse lattice and maps occupancy
fraction o to 2o - 1; decode nearest-neighbor-upsamples the lattice to a
logit grid thresholded strictly at 0.  Block-constant grids round-trip
exactly, which makes every edit analyzable.

An edit round noises the encoded guide to level t_noise but denoises
along a schedule starting at t_start >= t_noise; with t_start strictly
greater (under-noising) the field treats missing structure as residual
noise and fills it in.  Rounds chain: each consumes the previous
round's decoded occupancy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .flowcore import (
    Conditioner,
    StepHook,
    VectorFieldProvider,
    euler_integrate,
    extended_field,
    mixed_field,
)
from .lattice import DTYPE, DenseLatent, Dims, OccupancyGrid, Schedule
from .patchwork import PatchGrid, dilated_partition


@dataclass(frozen=True)
class ToyCodec:
    """Linear occupancy autoencoder between the fine grid and the lattice."""

    dims: Dims

    def encode(self, grid: OccupancyGrid) -> DenseLatent:
        """Per-block mean occupancy mapped affinely onto [-1, 1]."""
        if grid.dims != self.dims:
            raise DimensionError("occupancy dims do not match codec dims")
        d = self.dims
        r = d.ratio
        blocks = grid.occupied.astype(np.float64).reshape(
            d.a * d.N, r, d.b * d.N, r, d.N, r
        )
        mean = blocks.mean(axis=(1, 3, 5))
        data = (2.0 * mean - 1.0).astype(DTYPE)
        data = np.repeat(data[:, :, :, None], d.C, axis=3)
        return DenseLatent(d, data)

    def decode_logits(self, Z: DenseLatent) -> np.ndarray:
        """Nearest-neighbor upsample of the channel-mean lattice."""
        if Z.dims != self.dims:
            raise DimensionError("latent dims do not match codec dims")
        r = self.dims.ratio
        logits = Z.data.mean(axis=3, dtype=np.float64).astype(DTYPE)
        for axis in range(3):
            logits = np.repeat(logits, r, axis=axis)
        return logits

    def decode_occupancy(self, Z: DenseLatent) -> OccupancyGrid:
        """Occupied wherever the decoded logit is strictly positive."""
        return OccupancyGrid(self.dims, self.decode_logits(Z) > 0.0)


@dataclass(frozen=True)
class SdeditParams:
    """Noising/denoising levels for one edit round.

    t_noise <= t_start; equality is the classic scheme, a strict gap is
    under-noising.  t_noise = 0 degenerates to no noising at all.
    """

    t_start: float
    t_noise: float
    n_iter: int = 2

    def __post_init__(self):
        if not 0.0 < self.t_start <= 1.0:
            raise ValueError(f"t_start must lie in (0, 1], got {self.t_start}")
        if not 0.0 <= self.t_noise <= self.t_start:
            raise ValueError(
                f"t_noise must lie in [0, t_start={self.t_start}], got {self.t_noise}"
            )
        if self.n_iter < 0:
            raise ValueError(f"n_iter must be >= 0, got {self.n_iter}")


def under_noise(Z0g: DenseLatent, params: SdeditParams, seed) -> DenseLatent:
    """(1 - t_noise) * guide + t_noise * eps.

    The interpolation level is t_noise even though the subsequent
    schedule starts at t_start; `seed` may be an int or a Generator (the
    iterative loop passes one advancing stream).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(Z0g.dims.dense_shape, dtype=DTYPE)
    tn = DTYPE(params.t_noise)
    return Z0g.with_data((DTYPE(1) - tn) * Z0g.data + tn * eps)


def sdedit_round(
    occ: OccupancyGrid,
    params: SdeditParams,
    schedule: Schedule,
    provider: VectorFieldProvider,
    conditioner: Conditioner,
    grid: PatchGrid,
    codec: ToyCodec,
    rng: np.random.Generator,
    optimizer_hook: StepHook | None = None,
    dilated_alpha: int | None = None,
    workers: int = 1,
) -> OccupancyGrid:
    """One edit round: encode, under-noise, integrate, decode, threshold.

    `dilated_alpha` enables the gamma-mixed dilated field (structure
    stage only); each step redraws the pillar partition from `rng`.
    """
    if abs(schedule.times[0] - params.t_start) > 1e-12:
        raise ValueError(
            f"schedule starts at {schedule.times[0]}, params.t_start is {params.t_start}"
        )
    Z0g = codec.encode(occ)
    Z = under_noise(Z0g, params, rng)

    if dilated_alpha is None:
        def field_fn(state, t):
            return extended_field(state, t, grid, provider, conditioner, workers)
    else:
        def field_fn(state, t):
            partition = dilated_partition(grid.dims, grid.K, seed=int(rng.integers(2**63)))
            return mixed_field(
                state, t, grid, provider, conditioner, partition, dilated_alpha, workers
            )

    Z_final = euler_integrate(Z, schedule, field_fn, optimizer_hook)
    return codec.decode_occupancy(Z_final)


def iterative_sdedit(
    occ0: OccupancyGrid,
    params: SdeditParams,
    schedule: Schedule,
    provider: VectorFieldProvider,
    conditioner: Conditioner,
    grid: PatchGrid,
    codec: ToyCodec,
    seed: int,
    optimizer_hook: StepHook | None = None,
    hook_for_round=None,
    dilated_alpha: int | None = None,
    workers: int = 1,
    on_round=None,
) -> np.ndarray:
    """Chain n_iter edit rounds and return the occupied coordinate set.

    Fresh noise for every round comes from one advancing stream seeded
    once, so runs are reproducible.  n_iter = 0 returns the input grid's
    coordinates untouched.  `hook_for_round(n)` may supply a per-round
    optimizer hook (overrides `optimizer_hook` when given); `on_round`
    observes each round's output grid.
    """
    rng = np.random.default_rng(seed)
    occ = occ0
    for n in range(params.n_iter):
        hook = hook_for_round(n) if hook_for_round is not None else optimizer_hook
        occ = sdedit_round(
            occ, params, schedule, provider, conditioner, grid, codec, rng,
            optimizer_hook=hook, dilated_alpha=dilated_alpha, workers=workers,
        )
        if on_round is not None:
            on_round(n, occ)
    return occ.coords()

"""Per-timestep vector optimization and its differentiable objectives.

Instead of stepping along the raw merged field, the pipeline descends a
scene-prior loss from it for a few Adam steps.  Two objectives are
built in, both with analytic gradients (everything on the path is
linear except the sigmoid and SSIM):

* a structure loss that keeps prior voxels from decoding to empty,
  summed over prior points so denser clouds weigh more;
* a rendering loss on the orthographic projection of the denoised
  feature field, L2 minus SSIM against a target image.

Objectives evaluate in float64 so gradients can be validated against
central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, ConfigError, OptimizationError
from .lattice import DTYPE, SparseLatent
from .structedit import ToyCodec


@dataclass(frozen=True)
class AdamParams:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 5

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


@dataclass
class OptimState:
    """First/second moment accumulators and the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape) -> "OptimState":
        return cls(np.zeros(shape, dtype=np.float64), np.zeros(shape, dtype=np.float64))


def adam_step(value: np.ndarray, grad: np.ndarray, state: OptimState, params: AdamParams):
    """One bias-corrected Adam update; returns (new value, state)."""
    if value.shape != grad.shape:
        raise ValueError(f"value shape {value.shape} != grad shape {grad.shape}")
    if not np.isfinite(grad).all():
        raise OptimizationError("non-finite gradient in Adam step")
    grad = grad.astype(np.float64, copy=False)
    state.step += 1
    t = state.step
    state.m = params.beta1 * state.m + (1.0 - params.beta1) * grad
    state.v = params.beta2 * state.v + (1.0 - params.beta2) * grad * grad
    m_hat = state.m / (1.0 - params.beta1**t)
    v_hat = state.v / (1.0 - params.beta2**t)
    new_value = value - params.lr * m_hat / (np.sqrt(v_hat) + params.eps)
    return new_value, state


def optimize_vector(v_init: np.ndarray, objective, params: AdamParams, state: OptimState | None = None):
    """Run `params.steps` Adam steps from v_init; returns (v, loss trace).

    `objective(v) -> (loss, grad)`.  The trace holds one loss per
    evaluation, including a final evaluation after the last step, so it
    has steps + 1 entries.  Passing a warm `state` continues previous
    moments instead of resetting them.
    """
    v = v_init.astype(np.float64, copy=True)
    if state is None:
        state = OptimState.zeros(v.shape)
    losses: list[float] = []
    for _ in range(params.steps):
        loss, grad = objective(v)
        if not np.isfinite(loss):
            raise OptimizationError(f"non-finite loss during optimization; trace={losses}")
        losses.append(float(loss))
        v, state = adam_step(v, grad, state, params)
    if params.steps > 0:
        final, _ = objective(v)
        if not np.isfinite(final):
            raise OptimizationError(f"non-finite final loss; trace={losses}")
        losses.append(float(final))
    return v.astype(v_init.dtype), losses


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def ss_loss(v_hat: np.ndarray, Z_t, t: float, P: np.ndarray, codec: ToyCodec):
    """Structure loss: -mean_p log sigmoid(logit of the denoised latent at p).

    P is an (n, 3) array of prior coordinates on the fine grid; repeated
    rows are allowed and weigh their voxel more.  The gradient w.r.t.
    v_hat is analytic through the linear codec: only lattice cells
    feeding a sampled logit receive gradient.
    """
    P = np.asarray(P, dtype=np.int64).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError("ss_loss requires a non-empty prior coordinate set")
    if not 0.0 < t <= 1.0:
        raise ValueError(f"t must lie in (0, 1], got {t}")
    dims = codec.dims
    hi = np.array(dims.grid_shape, dtype=np.int64)
    if ((P < 0) | (P >= hi)).any():
        raise BoundsError("prior coordinate outside the fine grid")
    x = Z_t.data.astype(np.float64) - t * v_hat.astype(np.float64)
    r = dims.ratio
    cx, cy, cz = P[:, 0] // r, P[:, 1] // r, P[:, 2] // r
    logits = x[cx, cy, cz, :].mean(axis=1)
    loss = float(np.mean(np.logaddexp(0.0, -logits)))
    dz = (_sigmoid(logits) - 1.0) / len(P)  # d loss / d logit per point
    grad_x = np.zeros_like(x)
    np.add.at(grad_x, (cx, cy, cz), np.repeat(dz[:, None] / dims.C, dims.C, axis=1))
    return loss, -t * grad_x


def projection_render(slat: SparseLatent, axis: str = "z") -> np.ndarray:
    """Orthographic mean over z of the first 3 feature channels as RGB."""
    if axis != "z":
        raise ValueError(f"only the z axis projection is implemented, got {axis!r}")
    img, _ = _render_mean(slat.dims, slat.coords, slat.features.astype(np.float64))
    return img.astype(DTYPE)


def _render_mean(dims, coords: np.ndarray, feats64: np.ndarray):
    """Column means of the leading 3 feature channels; empty columns black."""
    h, w = dims.a * dims.M, dims.b * dims.M
    rgb = np.zeros((len(coords), 3), dtype=np.float64)
    rgb[:, : min(3, dims.l)] = feats64[:, : min(3, dims.l)]
    img = np.zeros((h, w, 3), dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.int64)
    np.add.at(img, (coords[:, 0], coords[:, 1]), rgb)
    np.add.at(cnt, (coords[:, 0], coords[:, 1]), 1)
    nz = cnt > 0
    img[nz] /= cnt[nz][:, None]
    return img, cnt


def _box_sum(x: np.ndarray, k: int) -> np.ndarray:
    """Valid-mode sliding k x k window sums over the first two axes."""
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    pad = [(1, 0), (1, 0)] + [(0, 0)] * (x.ndim - 2)
    c = np.pad(c, pad)
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]


def _box_adjoint(g: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of _box_sum: spread each window's value over its support."""
    pad = [(k - 1, k - 1), (k - 1, k - 1)] + [(0, 0)] * (g.ndim - 2)
    return _box_sum(np.pad(g, pad), k)


_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2
_SSIM_WINDOW = 8


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean structural similarity with 8x8 box windows on unit range."""
    value, _ = ssim_with_grad(img_a, img_b, need_grad=False)
    return value


def ssim_with_grad(img_a: np.ndarray, img_b: np.ndarray, need_grad: bool = True):
    """SSIM and its analytic gradient with respect to the first image."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    squeeze = a.ndim == 2
    if squeeze:
        a, b = a[:, :, None], b[:, :, None]
    h, w, ch = a.shape
    k = min(_SSIM_WINDOW, h, w)
    n = k * k
    mu_a = _box_sum(a, k) / n
    mu_b = _box_sum(b, k) / n
    saa = _box_sum(a * a, k) / n - mu_a**2
    sbb = _box_sum(b * b, k) / n - mu_b**2
    sab = _box_sum(a * b, k) / n - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + _SSIM_C1
    a2 = 2.0 * sab + _SSIM_C2
    b1 = mu_a**2 + mu_b**2 + _SSIM_C1
    b2 = saa + sbb + _SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    n_windows = s.shape[0] * s.shape[1]
    value = float(s.mean())
    if not need_grad:
        return value, None
    d = b1 * b2
    ds_dmu_a = (a2 / d) * 2.0 * mu_b - (s / b1) * 2.0 * mu_a
    ds_dsaa = -s / b2
    ds_dsab = (a1 / d) * 2.0
    scale = 1.0 / (n_windows * ch * n)
    grad = scale * (
        _box_adjoint(ds_dmu_a, k)
        + 2.0 * a * _box_adjoint(ds_dsaa, k)
        - 2.0 * _box_adjoint(ds_dsaa * mu_a, k)
        + b * _box_adjoint(ds_dsab, k)
        - _box_adjoint(ds_dsab * mu_b, k)
    )
    if squeeze:
        grad = grad[:, :, 0]
    return value, grad


@dataclass(frozen=True)
class LossWeights:
    l2: float = 1.0
    ssim: float = 1.0

    def __post_init__(self):
        if self.l2 < 0 or self.ssim < 0:
            raise ValueError("loss weights must be non-negative")


def slat_objective(
    v_hat: np.ndarray,
    Z_t: SparseLatent,
    t: float,
    target_image: np.ndarray | None,
    weights: LossWeights = LossWeights(),
):
    """Rendering objective on the denoised feature field.

    The denoised features Z_t - t * v_hat are projected to an image and
    scored as l2_weight * ||I - target||^2 / (H*W) - ssim_weight * SSIM.
    The gradient chains analytically through the linear projector; only
    the first 3 feature channels receive gradient.
    """
    if target_image is None:
        raise ConfigError("slat objective requires a target image")
    dims = Z_t.dims
    target = np.asarray(target_image, dtype=np.float64)
    h, w = dims.a * dims.M, dims.b * dims.M
    if target.shape != (h, w, 3):
        raise ConfigError(f"target image shape {target.shape} != {(h, w, 3)}")
    feats0 = Z_t.features.astype(np.float64) - t * v_hat.astype(np.float64)
    img, cnt = _render_mean(dims, Z_t.coords, feats0)
    diff = img - target
    l2 = float((diff * diff).sum() / (h * w))
    sval, sgrad = ssim_with_grad(img, target, need_grad=weights.ssim > 0)
    loss = weights.l2 * l2 - weights.ssim * sval
    d_img = weights.l2 * 2.0 * diff / (h * w)
    if weights.ssim > 0:
        d_img = d_img - weights.ssim * sgrad
    grad_feats = np.zeros_like(feats0)
    cols = cnt[Z_t.coords[:, 0], Z_t.coords[:, 1]].astype(np.float64)
    nch = min(3, dims.l)
    grad_feats[:, :nch] = d_img[Z_t.coords[:, 0], Z_t.coords[:, 1], :nch] / cols[:, None]
    return loss, -t * grad_feats

"""End-to-end scene generation: structure, features, decode, export.

The run takes a scene prior, voxelizes its point cloud, completes the
structure with iterative under-noised editing (structure-loss
optimization at every step), denoises per-voxel features over the
resulting coordinates (rendering-loss optimization at every step), and
exports a colored point cloud, a merged SDF, and a JSON run report.

Configuration is a flat JSON object using exactly the PipelineConfig
field names; unknown keys are rejected.  A single master seed feeds
fixed substreams (structure noise, feature init, pillar shuffles), so a
run is bit-reproducible at any worker count.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path

import numpy as np

from . import tensorio
from .decode import decode_scene_sdf, export_ply
from .errors import ConfigError, DimensionError
from .flowcore import (
    Conditioner,
    GlobalOracleProvider,
    ImageConditioner,
    OracleConditioner,
    VectorFieldProvider,
    extended_field,
    euler_integrate,
)
from .lattice import DenseLatent, Dims, OccupancyGrid, Schedule, SparseLatent, init_sparse_noise
from .optim import AdamParams, LossWeights, OptimState, optimize_vector, slat_objective, ss_loss
from .patchwork import make_patch_grid
from .priors import NormalizationBox, ScenePrior, load_scene_prior, voxelize
from .structedit import SdeditParams, ToyCodec, iterative_sdedit

# Substream tags for deriving per-purpose generators from the master seed.
# The structure stream also feeds the per-step pillar shuffles.
_STREAM_SS_NOISE = 1
_STREAM_SLAT_INIT = 2


def substream_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence((seed, tag)).generate_state(1)[0])


@dataclass
class PipelineConfig:
    dims: Dims = field(default_factory=Dims)
    d: int = 4
    t_start: float = 0.8
    t_noise: float = 0.6
    n_iter: int = 2
    schedule_steps: int = 25
    alpha: int = 5
    ss_adam: AdamParams = field(default_factory=AdamParams)
    slat_adam: AdamParams = field(default_factory=AdamParams)
    dilated_enabled: bool = True
    provider: str = "builtin-oracle"
    conditioner: str = "window"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    workers: int = 1
    optimize_every_round: bool = True
    adam_state_persist: bool = False
    oracle_ss_target: str | None = None
    oracle_slat_target: str | None = None
    out_dir: str | None = None
    trace_losses: bool = False

    def __post_init__(self):
        if self.d < 1 or self.dims.N % self.d != 0 or self.dims.M % self.d != 0:
            raise ConfigError(f"d={self.d} must divide N={self.dims.N} and M={self.dims.M}")
        if self.schedule_steps < 2:
            raise ConfigError("schedule_steps must be at least 2")
        if not 0.0 < self.t_start <= 1.0 or not 0.0 <= self.t_noise <= self.t_start:
            raise ConfigError(
                f"need 0 < t_start <= 1 and 0 <= t_noise <= t_start, "
                f"got t_start={self.t_start}, t_noise={self.t_noise}"
            )
        if self.n_iter < 0:
            raise ConfigError("n_iter must be >= 0")
        if self.alpha < 1 or self.alpha % 2 == 0:
            raise ConfigError(f"alpha must be an odd positive integer, got {self.alpha}")
        if self.conditioner not in ("window", "image"):
            raise ConfigError(f"conditioner must be 'window' or 'image', got {self.conditioner!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not (self.provider == "builtin-oracle" or self.provider.startswith("remote:")):
            raise ConfigError(
                f"provider must be 'builtin-oracle' or 'remote:HOST:PORT', got {self.provider!r}"
            )
        if self.provider == "builtin-oracle" and self.conditioner != "window":
            raise ConfigError("the builtin oracle requires the 'window' conditioner")


_NESTED_FIELDS = {
    "dims": (Dims, ("a", "b", "N", "M", "C", "l")),
    "ss_adam": (AdamParams, ("lr", "beta1", "beta2", "eps", "steps")),
    "slat_adam": (AdamParams, ("lr", "beta1", "beta2", "eps", "steps")),
    "loss_weights": (LossWeights, ("l2", "ssim")),
}


def config_from_dict(raw: dict) -> PipelineConfig:
    """Build a config from a JSON object; unknown keys are errors."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
    known = set(PipelineConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _NESTED_FIELDS:
            cls, names = _NESTED_FIELDS[key]
            if not isinstance(value, dict):
                raise ConfigError(f"config key {key!r} must be an object")
            bad = set(value) - set(names)
            if bad:
                raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
            try:
                kwargs[key] = cls(**value)
            except (ValueError, TypeError, DimensionError) as exc:
                raise ConfigError(f"invalid {key!r}: {exc}") from exc
        else:
            kwargs[key] = value
    try:
        return PipelineConfig(**kwargs)
    except (ValueError, TypeError, DimensionError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path: str | PathLike) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


@dataclass
class RunReport:
    stages: list = field(default_factory=list)
    round_occupancy: list = field(default_factory=list)
    asset_paths: dict = field(default_factory=dict)
    empty_windows: list = field(default_factory=list)

    def add_stage(self, name: str, seconds: float, **detail):
        self.stages.append({"name": name, "seconds": round(seconds, 6), **detail})

    def to_json(self) -> str:
        return json.dumps(
            {
                "stages": self.stages,
                "round_occupancy": self.round_occupancy,
                "asset_paths": self.asset_paths,
                "empty_windows": self.empty_windows,
            },
            indent=2,
            sort_keys=True,
        )


@dataclass
class ProviderBundle:
    """A provider plus how to condition it, with optional teardown."""

    provider: VectorFieldProvider
    conditioner_kind: str
    closer: object = None

    def close(self):
        if self.closer is not None:
            self.closer()


def build_provider(config: PipelineConfig) -> ProviderBundle:
    """Construct the configured provider (oracle targets come from files)."""
    if config.provider == "builtin-oracle":
        ss_target = slat_target = None
        if config.oracle_ss_target:
            arr = tensorio.read_tensor(config.oracle_ss_target)
            ss_target = DenseLatent(config.dims, arr)
        if config.oracle_slat_target:
            slat_target = read_slat_table(config.oracle_slat_target, config.dims)
        if ss_target is None and slat_target is None:
            raise ConfigError(
                "builtin-oracle needs oracle_ss_target and/or oracle_slat_target"
            )
        return ProviderBundle(
            GlobalOracleProvider(ss_target=ss_target, slat_target=slat_target),
            config.conditioner,
        )
    endpoint = config.provider.split(":", 1)[1]
    from .bridge import RemoteProvider  # imported lazily; bridge depends on flowcore

    remote = RemoteProvider(endpoint)
    return ProviderBundle(remote, config.conditioner, closer=remote.close)


def read_slat_table(path: str | PathLike, dims: Dims) -> SparseLatent:
    """Sparse latents persist as rank-2 XLT1 tables: x, y, z, then l features."""
    table = tensorio.read_tensor(path)
    if table.ndim != 2 or table.shape[1] != 3 + dims.l:
        raise ConfigError(
            f"sparse latent table must be (n, {3 + dims.l}), got {table.shape}"
        )
    return SparseLatent(dims, np.rint(table[:, :3]).astype(np.int64), table[:, 3:])


def write_slat_table(path: str | PathLike, slat: SparseLatent) -> None:
    table = np.concatenate(
        [slat.coords.astype(np.float32), slat.features.astype(np.float32)], axis=1
    )
    tensorio.write_tensor(path, table)


def _make_conditioner(kind: str, prior: ScenePrior, grid, box: NormalizationBox) -> Conditioner:
    if kind == "window":
        return OracleConditioner()
    return ImageConditioner(prior, grid, box)


def _resample_nn(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = image.shape[:2]
    rows = (np.arange(shape[0]) * h) // shape[0]
    cols = (np.arange(shape[1]) * w) // shape[1]
    return image[rows][:, cols]


class _TraceRecorder:
    def __init__(self):
        self.rows: list[tuple[int, float, float]] = []
        self._counter = 0

    def record(self, t: float, losses: list):
        for loss in losses:
            self.rows.append((self._counter, float(t), float(loss)))
            self._counter += 1

    def write_csv(self, path: Path):
        with open(path, "w") as fh:
            fh.write("step,t,loss\n")
            for step, t, loss in self.rows:
                fh.write(f"{step},{t:.6g},{loss:.9g}\n")


def generate_sparse_structure(
    prior: ScenePrior,
    config: PipelineConfig,
    bundle: ProviderBundle,
    report: RunReport | None = None,
    box: NormalizationBox | None = None,
) -> np.ndarray:
    """Structure stage: voxelize the prior and complete it by iterative
    under-noised editing with per-step structure-loss optimization."""
    dims = config.dims
    points = prior.valid_points()
    if box is None:
        if len(points) == 0:
            raise ConfigError("prior has no valid points to build a scene box from")
        box = NormalizationBox.from_points(points)
    occ0 = voxelize(points, box, dims)
    prior_voxels = box.to_voxels(points, dims)

    grid = make_patch_grid(dims, config.d, dims.N)
    conditioner = _make_conditioner(bundle.conditioner_kind, prior, grid, box)
    codec = ToyCodec(dims)
    params = SdeditParams(config.t_start, config.t_noise, config.n_iter)
    schedule = Schedule.linear(config.t_start, config.schedule_steps)
    trace = _TraceRecorder()

    hook_for_round = None
    if config.ss_adam.steps > 0 and len(prior_voxels) > 0:
        persist_state = {}

        def make_hook(round_idx: int):
            if not config.optimize_every_round and round_idx != config.n_iter - 1:
                return None

            def hook(v, Z, t):
                state = None
                if config.adam_state_persist:
                    state = persist_state.setdefault(
                        "ss", OptimState.zeros(v.data.shape)
                    )
                objective = lambda vec: ss_loss(vec, Z, t, prior_voxels, codec)
                v_opt, losses = optimize_vector(v.data, objective, config.ss_adam, state)
                trace.record(t, losses)
                return v.with_data(v_opt.astype(np.float32))

            return hook

        hook_for_round = make_hook

    def on_round(n, occ):
        if report is not None:
            report.round_occupancy.append({"round": n, "occupied": occ.count()})

    started = time.monotonic()
    coords = iterative_sdedit(
        occ0,
        params,
        schedule,
        bundle.provider,
        conditioner,
        grid,
        codec,
        seed=substream_seed(config.seed, _STREAM_SS_NOISE),
        hook_for_round=hook_for_round,
        dilated_alpha=config.alpha if config.dilated_enabled else None,
        workers=config.workers,
        on_round=on_round,
    )
    if report is not None:
        report.add_stage(
            "sparse_structure",
            time.monotonic() - started,
            prior_points=int(len(points)),
            initial_occupied=occ0.count(),
            final_occupied=int(len(coords)),
        )
        if isinstance(conditioner, ImageConditioner):
            report.empty_windows.extend(
                {"stage": "ss", "window": list(k)} for k in conditioner.empty_windows
            )
        report.ss_trace = trace
    return coords


def generate_slat(
    coords: np.ndarray,
    prior: ScenePrior,
    config: PipelineConfig,
    bundle: ProviderBundle,
    report: RunReport | None = None,
    box: NormalizationBox | None = None,
) -> SparseLatent:
    """Feature stage: denoise per-voxel features over fixed coordinates,
    optimizing the rendering objective at every step."""
    if len(coords) == 0:
        raise ConfigError("feature stage requires a non-empty coordinate set")
    dims = config.dims
    if box is None:
        box = NormalizationBox.from_points(prior.valid_points())
    grid = make_patch_grid(dims, config.d, dims.M)
    conditioner = _make_conditioner(bundle.conditioner_kind, prior, grid, box)
    schedule = Schedule.linear(1.0, config.schedule_steps)
    Z1 = init_sparse_noise(coords, dims, substream_seed(config.seed, _STREAM_SLAT_INIT))
    trace = _TraceRecorder()

    hook = None
    if config.slat_adam.steps > 0:
        target = _resample_nn(
            prior.image.astype(np.float64), (dims.a * dims.M, dims.b * dims.M)
        )
        persist_state = {}

        def hook(v, Z, t):
            state = None
            if config.adam_state_persist:
                state = persist_state.setdefault("slat", OptimState.zeros(v.features.shape))
            objective = lambda vec: slat_objective(vec, Z, t, target, config.loss_weights)
            v_opt, losses = optimize_vector(v.features, objective, config.slat_adam, state)
            trace.record(t, losses)
            return v.with_features(v_opt.astype(np.float32))

    def field_fn(Z, t):
        return extended_field(Z, t, grid, bundle.provider, conditioner, config.workers)

    started = time.monotonic()
    Z0 = euler_integrate(Z1, schedule, field_fn, hook)
    if report is not None:
        report.add_stage(
            "structured_latent", time.monotonic() - started, coordinates=int(len(coords))
        )
        report.slat_trace = trace
    return Z0


def generate_scene(prior_path: str | PathLike, config: PipelineConfig) -> RunReport:
    """Full pipeline from an SPR1 prior file to exported assets."""
    prior = load_scene_prior(prior_path)
    bundle = build_provider(config)
    try:
        return run_pipeline(prior, config, bundle)
    finally:
        bundle.close()


def run_pipeline(prior: ScenePrior, config: PipelineConfig, bundle: ProviderBundle) -> RunReport:
    if not config.out_dir:
        raise ConfigError("out_dir must be set to export assets")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = RunReport()
    box = NormalizationBox.from_points(prior.valid_points())

    coords = generate_sparse_structure(prior, config, bundle, report, box)
    slat = generate_slat(coords, prior, config, bundle, report, box)

    started = time.monotonic()
    dims = config.dims
    occupancy = OccupancyGrid.from_coords(dims, coords)
    sdf = decode_scene_sdf(slat, make_patch_grid(dims, config.d, dims.M))

    paths = {
        "scene_ply": out_dir / "scene.ply",
        "occupancy_xlt": out_dir / "occupancy.xlt",
        "sdf_xlt": out_dir / "sdf.xlt",
        "slat_xlt": out_dir / "slat.xlt",
    }
    paths["scene_ply"].write_bytes(export_ply(slat, with_colors=True))
    tensorio.write_tensor(paths["occupancy_xlt"], occupancy.occupied.astype(np.float32))
    tensorio.write_tensor(paths["sdf_xlt"], sdf.data)
    write_slat_table(paths["slat_xlt"], slat)
    report.asset_paths = {k: str(v) for k, v in paths.items()}
    report.add_stage("decode_export", time.monotonic() - started)

    if config.trace_losses:
        for name in ("ss_trace", "slat_trace"):
            recorder = getattr(report, name, None)
            if recorder is not None and recorder.rows:
                path = out_dir / f"{name.replace('_trace', '')}_loss_trace.csv"
                recorder.write_csv(path)
                report.asset_paths[name] = str(path)

    (out_dir / "report.json").write_text(report.to_json())
    return report

"""Progressive end-to-end optimization of a :class:`~catasplat.model.Model`.

Each iteration renders a random patch of a random training view, evaluates
the five loss terms and back-propagates through shading, both rasterizers
and the warp field.  Gradients are averaged over ``accumulate`` iterations
before one ADAM update.  Training starts with a short warm-up at reduced
resolution on a nested subset of the primary points, during which geometry
and the warp field stay frozen.  The primary cloud is periodically densified
where view-space positional gradients are large.
"""

from __future__ import annotations

import csv
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .fileio import write_ply_points
from .geometry import Aabb, Camera
from .losses import (
    SSIM_WINDOW,
    LossReport,
    LossWeights,
    dssim_loss,
    l1_loss,
    mask_loss,
    mask_tv_loss,
    reflection_volume_loss,
)
from .model import N_FEATURES, PRIMARY_KEYS, Model
from .neural import AdamState, NeuralRenderer, WarpField, sigmoid
from .scenes import Dataset
from .volume import ReflectionVolume, rasterize_volume_mask, sample_surface

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CHECKPOINT_VERSION = 1
WARMUP_SCALES = (0.25, 0.5, 1.0)
WARMUP_FRACTIONS = (1 / 32, 1 / 8, 1.0)
# frozen until the warm-up ends: geometry of both clouds and the warp field
WARMUP_LOCKED = ("prim.xyz", "prim.normal", "prim.f", "refl.f", "warp.")

DEFAULT_LR = {
    "prim.xyz": 1e-4,
    "prim.normal": 1e-3,
    "prim.f": 5e-3,
    "prim.o": 0.05,
    "prim.feat": 5e-3,
    "prim.rho": 0.05,
    "refl.f": 5e-3,
    "refl.o": 0.05,
    "refl.feat": 5e-3,
    "env": 5e-3,
    "renderer": 1e-3,
    "warp": 1e-3,
}

LOG_FIELDS = ("iteration", "phase", "view", "l1", "dssim", "volume", "mask", "mask_tv", "total", "skipped", "n_primary")


def lr_group(name: str) -> str:
    if name.startswith("warp."):
        return "warp"
    if name.startswith(("head1.", "head2.", "dec.")):
        return "renderer"
    return name


@dataclass
class TrainConfig:
    iterations: int = 30000
    patch: int = 150
    accumulate: int = 20
    densify: bool = True
    densify_every: int = 2000
    densify_percentile: float = 90.0
    warmup: tuple[float, float] = (0.05, 0.10)  # phase 1 and 2 spans as fractions of ``iterations``
    seed: int = 0
    n_reflection: int = 20000
    lr: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LR))
    lr_decay: float = 0.1  # learning rates reach this fraction of their base at the last iteration
    weights: LossWeights = field(default_factory=LossWeights)
    primary_only: bool = False
    warp_width: int = 256
    warp_scale: float = 0.01
    renderer_width: int = 32
    renderer_layers: int = 9
    env_width: int = 256
    env_height: int = 128

    def __post_init__(self) -> None:
        self.warmup = tuple(float(x) for x in self.warmup)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        unknown = set(self.lr) - set(DEFAULT_LR)
        if unknown:
            raise ValueError(f"unknown learning-rate groups: {sorted(unknown)}")
        self.lr = {**DEFAULT_LR, **{k: float(v) for k, v in self.lr.items()}}
        if self.iterations < 1 or self.accumulate < 1 or self.densify_every < 1:
            raise ValueError("iterations, accumulate and densify_every must be positive")
        if self.patch < 11:
            raise ValueError("patch must be at least 11 pixels (SSIM window)")
        if len(self.warmup) != 2 or min(self.warmup) < 0 or sum(self.warmup) > 1:
            raise ValueError("warmup must be two non-negative fractions summing to at most 1")
        if self.warp_scale <= 0:
            raise ValueError("warp_scale must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if not 0 <= self.densify_percentile < 100:
            raise ValueError("densify_percentile must be in [0, 100)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        path = Path(path)
        if path.suffix == ".toml":
            with open(path, "rb") as fh:
                return cls.from_dict(tomllib.load(fh))
        return cls.from_dict(json.loads(path.read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["warmup"] = list(self.warmup)
        return d


@dataclass(frozen=True)
class WarmupPhase:
    scale: float
    fraction: float
    start: int
    stop: int


def warmup_schedule(config: TrainConfig) -> list[WarmupPhase]:
    """Three phases (1/4 res, 1/32 points), (1/2, 1/8), (full, all) covering all iterations."""
    n = config.iterations
    n1 = int(round(n * config.warmup[0]))
    n2 = int(round(n * config.warmup[1]))
    bounds = [0, n1, n1 + n2, n]
    return [WarmupPhase(s, f, bounds[k], bounds[k + 1]) for k, (s, f) in enumerate(zip(WARMUP_SCALES, WARMUP_FRACTIONS))]


def phase_index(schedule: list[WarmupPhase], iteration: int) -> int:
    for k, ph in enumerate(schedule):
        if iteration < ph.stop:
            return k
    return len(schedule) - 1


def nested_subset(order: np.ndarray, fraction: float) -> np.ndarray | None:
    """First ``ceil(fraction * n)`` entries of a fixed permutation, so subsets grow monotonically."""
    if fraction >= 1:
        return None
    k = max(1, int(math.ceil(fraction * len(order))))
    return np.sort(order[:k])


# ---------------------------------------------------------------------------
# data


def downscale(img: np.ndarray, k: int) -> np.ndarray:
    """Box-filter by an integer factor (trailing rows/columns that do not fill a box are dropped)."""
    if k == 1:
        return np.asarray(img, dtype=np.float64)
    h, w = img.shape[0] // k, img.shape[1] // k
    x = np.asarray(img, dtype=np.float64)[: h * k, : w * k]
    return x.reshape(h, k, w, k, *x.shape[2:]).mean(axis=(1, 3))


def downscale_camera(cam: Camera, k: int) -> Camera:
    if k == 1:
        return cam
    c = cam.scaled(1.0 / k)
    return replace(c, width=cam.width // k, height=cam.height // k)


@dataclass
class Level:
    cameras: list[Camera]
    images: list[np.ndarray]
    masks: list[np.ndarray] | None  # projected reflection volume per view


@dataclass
class TrainData:
    levels: list[Level]
    camera_positions: np.ndarray


def prepare_data(dataset: Dataset, volume: ReflectionVolume | None, scales=WARMUP_SCALES) -> TrainData:
    levels = []
    smallest = min(min(c.width, c.height) for c in dataset.cameras)
    for s in scales:
        # coarse levels never shrink below twice the SSIM window
        k = max(1, min(int(round(1.0 / s)), smallest // (2 * SSIM_WINDOW)))
        cams = [downscale_camera(c, k) for c in dataset.cameras]
        imgs = [downscale(im, k) for im in dataset.images]
        masks = None
        if volume is not None:
            masks = [rasterize_volume_mask(volume, c).bits.astype(np.float64) for c in cams]
        levels.append(Level(cams, imgs, masks))
    return TrainData(levels, np.array([c.position for c in dataset.cameras]))


# ---------------------------------------------------------------------------
# state


@dataclass
class DensifyStats:
    """Per-primary-point sums collected between densification passes."""

    norm_sum: np.ndarray  # view-space positional gradient norms
    count: np.ndarray  # iterations in which the point received gradient
    world_sum: np.ndarray  # world-space positional gradient (direction of spawning)

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64), np.zeros((n, 3)))

    def update(self, means2d: np.ndarray, g_xyz: np.ndarray) -> None:
        norm = np.linalg.norm(means2d, axis=1)
        self.norm_sum += norm
        self.count += norm > 0
        self.world_sum += g_xyz

    def mean_norm(self) -> np.ndarray:
        return self.norm_sum / np.maximum(self.count, 1)


@dataclass
class TrainState:
    config: TrainConfig
    model: Model
    adam: AdamState
    rng: np.random.Generator
    subset_order: np.ndarray
    stats: DensifyStats
    iteration: int = 0
    accum: dict[str, np.ndarray] = field(default_factory=dict)
    accum_count: int = 0
    skipped: int = 0
    loss_ema: float = float("nan")

    @property
    def schedule(self) -> list[WarmupPhase]:
        return warmup_schedule(self.config)


def init_state(dataset: Dataset, volume: ReflectionVolume | None, config: TrainConfig) -> TrainState:
    """Fresh model and optimizer; the reflection cloud is seeded on the volume boundary."""
    model_seed, sample_seed, train_seed = np.random.SeedSequence(config.seed).spawn(3)
    pts = dataset.points
    cam_pos = np.array([c.position for c in dataset.cameras])
    if config.primary_only or volume is None:
        if not config.primary_only:
            raise ValueError("a reflection volume is required unless primary_only is set")
        base = np.zeros((0, 3))
        box = Aabb.from_points(pts["xyz"])
    else:
        base = sample_surface(volume, config.n_reflection, np.random.default_rng(sample_seed))
        box = volume.aabb
    model = Model.create(
        pts["xyz"],
        pts["normal"],
        pts["color"],
        base,
        box,
        cam_pos,
        seed=int(model_seed.generate_state(1)[0]),
        warp_width=config.warp_width,
        warp_scale=config.warp_scale,
        renderer_width=config.renderer_width,
        renderer_layers=config.renderer_layers,
        env_size=(config.env_width, config.env_height),
        primary_only=config.primary_only,
    )
    rng = np.random.default_rng(train_seed)
    order = rng.permutation(model.n_primary)
    return TrainState(config, model, AdamState(), rng, order, DensifyStats.zeros(model.n_primary))


# ---------------------------------------------------------------------------
# one iteration


@dataclass
class StepInfo:
    report: LossReport
    phase: int
    view: int
    skipped: bool
    updated: bool
    spawned: int = 0


def _loss_and_grads(config: TrainConfig, r, gt: np.ndarray, m: np.ndarray | None):
    w = config.weights
    l1, g_l1 = l1_loss(r.rgb, gt)
    ds, g_ds = dssim_loss(r.rgb, gt)
    g_rgb = w.l1 * g_l1 + w.dssim * g_ds
    terms = {"l1": l1, "dssim": ds, "volume": 0.0, "mask": 0.0, "mask_tv": 0.0}
    g_rho = g_cov = None
    if not config.primary_only and m is not None:
        # rho weights the primary branch, so the reflector region is where 1 - rho lights up
        vol, g_vol = reflection_volume_loss(r.coverage, m)
        mk, g_mk = mask_loss(1.0 - r.rho, m)
        tv, g_tv = mask_tv_loss(r.rho)
        terms.update(volume=vol, mask=mk, mask_tv=tv)
        g_cov = w.volume * g_vol
        g_rho = -w.mask * g_mk + w.mask_tv * g_tv
    return LossReport.from_terms(terms, w), g_rgb, g_rho, g_cov


def _learning_rates(state: TrainState, names) -> tuple[float, dict[str, float]]:
    cfg = state.config
    factor = cfg.lr_decay ** (state.iteration / max(cfg.iterations, 1))
    return factor, {n: cfg.lr[lr_group(n)] for n in names}


def apply_update(state: TrainState) -> bool:
    """ADAM step on the averaged accumulated gradients; clears the accumulator."""
    if state.accum_count == 0:
        return False
    grads = {k: v / state.accum_count for k, v in state.accum.items()}
    factor, scale = _learning_rates(state, grads)
    ok = state.adam.step(state.model.parameters(), grads, lr=factor, lr_scale=scale)
    state.accum = {}
    state.accum_count = 0
    return ok


def train_step(state: TrainState, data: TrainData) -> StepInfo:
    """Render one random patch, back-propagate, accumulate and (periodically) update and densify."""
    cfg = state.config
    model = state.model
    schedule = state.schedule
    k = phase_index(schedule, state.iteration)
    phase = schedule[k]
    level = data.levels[k]
    rng = state.rng
    view = int(rng.integers(len(level.cameras)))
    cam = level.cameras[view]
    p = min(cfg.patch, cam.width, cam.height)
    x0 = int(rng.integers(0, cam.width - p + 1))
    y0 = int(rng.integers(0, cam.height - p + 1))
    pcam = cam.crop(x0, y0, p, p)
    gt = level.images[view][y0 : y0 + p, x0 : x0 + p]
    m = None if level.masks is None else level.masks[view][y0 : y0 + p, x0 : x0 + p]
    subset = nested_subset(state.subset_order, phase.fraction)

    with np.errstate(all="ignore"):
        r = model.render(pcam, primary_subset=subset)
        report, g_rgb, g_rho, g_cov = _loss_and_grads(cfg, r, gt, m)
    info = StepInfo(report, k, view, skipped=False, updated=False)
    state.iteration += 1
    if not np.isfinite(report.total):
        state.skipped += 1
        info.skipped = True
        return info
    with np.errstate(all="ignore"):
        grads, means2d = model.backward(r, g_rgb, g_rho, g_cov)
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        info.skipped = True
        return info

    warm = k < len(schedule) - 1
    if warm:
        grads = {n: g for n, g in grads.items() if not n.startswith(WARMUP_LOCKED)}
    else:
        state.stats.update(means2d, grads["prim.xyz"])
    for n, g in grads.items():
        if n in state.accum:
            state.accum[n] += g
        else:
            state.accum[n] = g.copy()
    state.accum_count += 1
    ema = 0.98
    state.loss_ema = report.total if not np.isfinite(state.loss_ema) else ema * state.loss_ema + (1 - ema) * report.total
    if state.accum_count >= cfg.accumulate:
        info.updated = apply_update(state)
    if cfg.densify and not warm and state.iteration % cfg.densify_every == 0 and state.iteration < cfg.iterations:
        info.spawned = len(densify(state))
    return info


# ---------------------------------------------------------------------------
# densification


def densify(state: TrainState, percentile: float | None = None) -> np.ndarray:
    """Spawn one point per high-gradient primary point; returns the source indices.

    A point qualifies when its mean view-space positional gradient norm is
    strictly above the given percentile over all primary points (and
    nonzero).  The copy inherits every attribute and lands half a splat
    radius along the descent direction of its accumulated world-space
    positional gradient.
    """
    model = state.model
    pct = state.config.densify_percentile if percentile is None else percentile
    score = state.stats.mean_norm()
    n = model.n_primary
    src = np.zeros(0, dtype=np.int64)
    if n and np.any(score > 0):
        thr = np.percentile(score, pct)
        src = np.flatnonzero((score > thr) & (score > 0))
        d = -state.stats.world_sum[src]
        norm = np.linalg.norm(d, axis=1)
        keep = norm > 0
        src, d, norm = src[keep], d[keep], norm[keep]
        if len(src):
            delta = 0.5 * np.sqrt(np.exp(model.params["prim.f"][src]))
            pos = model.params["prim.xyz"][src] + (delta / norm)[:, None] * d
            model.append_primary(src, pos)
            for key in PRIMARY_KEYS:
                state.adam.append_rows(key, src)
                if key in state.accum:
                    g = state.accum[key]
                    state.accum[key] = np.concatenate([g, np.zeros((len(src),) + g.shape[1:])])
    state.stats = DensifyStats.zeros(model.n_primary)
    return src


# ---------------------------------------------------------------------------
# loop


def log_row(state: TrainState, info: StepInfo) -> dict:
    row = {"iteration": state.iteration, "phase": info.phase, "view": info.view}
    row.update({k: v for k, v in info.report.as_dict().items()})
    row["skipped"] = int(info.skipped)
    row["n_primary"] = state.model.n_primary
    return row


class LossLog:
    """CSV loss log; floats are written with full precision so runs compare bit-exactly."""

    def __init__(self, path: str | Path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self.fh = open(self.path, "w" if fresh else "a", newline="")
        self.writer = csv.writer(self.fh)
        if fresh:
            self.writer.writerow(LOG_FIELDS)

    def write(self, row: dict) -> None:
        self.writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in LOG_FIELDS])

    def close(self) -> None:
        self.fh.close()


def train(
    state: TrainState,
    data: TrainData,
    until: int | None = None,
    log: LossLog | None = None,
    out_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    callback=None,
) -> TrainState:
    """Run :func:`train_step` until ``until`` (default: the configured iteration count)."""
    stop = state.config.iterations if until is None else min(until, state.config.iterations)
    while state.iteration < stop:
        info = train_step(state, data)
        if log is not None:
            log.write(log_row(state, info))
        if callback is not None:
            callback(state, info)
        if out_dir is not None and checkpoint_every and state.iteration % checkpoint_every == 0:
            save_checkpoint(state, out_dir)
    if out_dir is not None:
        save_checkpoint(state, out_dir)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def _box_to_list(b: Aabb) -> list:
    return [b.min.tolist(), b.max.tolist()]


def _box_from_list(v) -> Aabb:
    return Aabb(np.array(v[0], dtype=np.float64), np.array(v[1], dtype=np.float64))


def model_meta(model: Model) -> dict:
    mlp = model.warp.mlp
    return {
        "primary_only": model.primary_only,
        "nu": model.nu,
        "alpha_max": model.alpha_max,
        "clone_offsets": [t.tolist() for t in model.clone_offsets],
        "warp_point_box": _box_to_list(model.warp.point_box),
        "warp_camera_box": _box_to_list(model.warp.camera_box),
        "warp_scale": model.warp.scale,
        "warp_width": mlp.widths[1],
        "warp_layers": mlp.n_layers,
        "renderer_width": model.renderer.decoder.widths[1],
        "renderer_layers": model.renderer.decoder.n_layers,
        "n_features": N_FEATURES,
    }


def model_from_arrays(meta: dict, arrays: dict[str, np.ndarray]) -> Model:
    warp = WarpField(
        _box_from_list(meta["warp_point_box"]),
        _box_from_list(meta["warp_camera_box"]),
        width=meta["warp_width"],
        n_layers=meta["warp_layers"],
        scale=meta["warp_scale"],
        rng=0,
    )
    # bypass the constructor's padding so the stored boxes are used verbatim
    warp.point_box = _box_from_list(meta["warp_point_box"])
    warp.camera_box = _box_from_list(meta["warp_camera_box"])
    renderer = NeuralRenderer(meta["n_features"], meta["renderer_width"], meta["renderer_layers"], rng=0)
    params = {k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")}
    nets = {k: v for k, v in params.items() if k.startswith(("warp.", "head1.", "head2.", "dec."))}
    model = Model(
        {k: v.copy() for k, v in params.items() if k not in nets},
        arrays["reflection_base"].copy(),
        warp,
        renderer,
        primary_only=meta["primary_only"],
        clone_offsets=meta["clone_offsets"],
        nu=meta["nu"],
        alpha_max=meta["alpha_max"],
    )
    live = model.parameters()
    for k, v in nets.items():
        if k.startswith("warp.") and model.primary_only:
            model.warp.parameters()[k[len("warp.") :]][...] = v
            continue
        if live[k].shape != v.shape:
            raise ValueError(f"checkpoint array {k} has shape {v.shape}, expected {live[k].shape}")
        live[k][...] = v
    return model


def model_arrays(model: Model) -> dict[str, np.ndarray]:
    out = {"param/" + k: v for k, v in model.parameters().items()}
    out.update({"param/warp." + k: v for k, v in model.warp.parameters().items()})
    out["reflection_base"] = model.reflection_base
    return out


def save_model(model: Model, out_dir: str | Path) -> Path:
    """Model-only checkpoint (no optimizer state) plus PLY exports, e.g. after an edit."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "checkpoint.npz"
    np.savez(path, meta=json.dumps({"version": CHECKPOINT_VERSION, "model": model_meta(model)}), **model_arrays(model))
    _export_clouds(model, out)
    return path


def save_checkpoint(state: TrainState, out_dir: str | Path) -> Path:
    """Write ``checkpoint.npz`` (full training state) plus PLY exports of both clouds."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": CHECKPOINT_VERSION,
        "model": model_meta(state.model),
        "config": state.config.to_dict(),
        "clouds": ["primary.ply", "reflection.ply"] if state.model.n_reflection else ["primary.ply"],
        "iteration": state.iteration,
        "accum_count": state.accum_count,
        "skipped": state.skipped,
        "loss_ema": state.loss_ema,
        "rng": state.rng.bit_generator.state,
        "adam": {
            "lr": state.adam.lr,
            "beta1": state.adam.beta1,
            "beta2": state.adam.beta2,
            "eps": state.adam.eps,
            "weight_decay": state.adam.weight_decay,
            "decay_prefix": state.adam.decay_prefix,
            "steps": state.adam.steps,
            "skipped": state.adam.skipped,
        },
    }
    arrays = model_arrays(state.model)
    arrays.update({"adam_m/" + k: v for k, v in state.adam.m.items()})
    arrays.update({"adam_v/" + k: v for k, v in state.adam.v.items()})
    arrays.update({"accum/" + k: v for k, v in state.accum.items()})
    arrays["subset_order"] = state.subset_order
    arrays["stats/norm_sum"] = state.stats.norm_sum
    arrays["stats/count"] = state.stats.count
    arrays["stats/world_sum"] = state.stats.world_sum
    path = out / "checkpoint.npz"
    tmp = out / "checkpoint.tmp.npz"
    np.savez(tmp, meta=json.dumps(meta), **arrays)
    tmp.replace(path)
    _export_clouds(state.model, out)
    return path


def _export_clouds(model: Model, out: Path) -> None:
    cloud = model.primary_cloud()
    write_ply_points(
        out / "primary.ply",
        {"xyz": cloud.positions, "normal": cloud.normals, "f": cloud.footprints, "o": cloud.opacities, "rho": cloud.rho, "feature": cloud.features},
    )
    if model.n_reflection:
        write_ply_points(
            out / "reflection.ply",
            {"xyz": model.reflection_base, "f": np.exp(model.params["refl.f"]), "o": sigmoid(model.params["refl.o"]), "feature": model.params["refl.feat"]},
        )


def _read_npz(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.npz"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays.pop("meta")))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    return meta, arrays


def load_model(path: str | Path) -> Model:
    meta, arrays = _read_npz(path)
    return model_from_arrays(meta["model"], arrays)


def load_checkpoint(path: str | Path) -> TrainState:
    meta, arrays = _read_npz(path)
    if "config" not in meta:
        raise ValueError("file holds a model only, not a training state")
    model = model_from_arrays(meta["model"], arrays)
    a = meta["adam"]
    adam = AdamState(
        lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
        weight_decay=a["weight_decay"], decay_prefix=a["decay_prefix"],
    )
    adam.m = {k[len("adam_m/") :]: v for k, v in arrays.items() if k.startswith("adam_m/")}
    adam.v = {k[len("adam_v/") :]: v for k, v in arrays.items() if k.startswith("adam_v/")}
    adam.steps = {k: int(v) for k, v in a["steps"].items()}
    adam.skipped = a["skipped"]
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    stats = DensifyStats(arrays["stats/norm_sum"], arrays["stats/count"], arrays["stats/world_sum"])
    return TrainState(
        config=TrainConfig.from_dict(meta["config"]),
        model=model,
        adam=adam,
        rng=rng,
        subset_order=arrays["subset_order"],
        stats=stats,
        iteration=meta["iteration"],
        accum={k[len("accum/") :]: v for k, v in arrays.items() if k.startswith("accum/")},
        accum_count=meta["accum_count"],
        skipped=meta["skipped"],
        loss_ema=meta["loss_ema"],
    )

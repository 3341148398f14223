"""Things a trained model can do besides reproducing its input views.

Free-viewpoint rendering with an optional warp-camera override, dense
reflection tracking, translation-only cloning of a reflector, comfortable
stereo with reduced reflection disparity, and a comparison of learned
trajectories against the analytic catacaustic of a sphere.
"""

from __future__ import annotations

import copy
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .caustics import NotVisibleError, Sphere, envelope_points, specular_point, virtual_point_on_catacaustic
from .fileio import write_pfm, write_png
from .geometry import Aabb, Camera, project
from .model import Model, Render
from .raster import median_depth

OCCLUSION_FRACTION = 0.01  # of the scene diagonal


@dataclass
class RenderRequest:
    cameras: list[Camera]
    warp_positions: list[np.ndarray | None] | None = None  # per-frame warp camera override
    out_dir: str | Path | None = None
    eye_separation: float = 0.0
    warp_eye_separation: float = 0.0

    def __post_init__(self) -> None:
        if not self.cameras:
            raise ValueError("camera path is empty")
        if self.warp_positions is not None and len(self.warp_positions) != len(self.cameras):
            raise ValueError("one warp camera (or None) per frame required")
        if self.eye_separation < 0 or self.warp_eye_separation < 0:
            raise ValueError("eye separations must be non-negative")


def write_frame(out_dir: str | Path, name: str, img: np.ndarray) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / f"{name}.png", img)
    write_pfm(out / f"{name}.pfm", img)


_WORKER_MODEL: Model | None = None


def _init_worker(model: Model) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _render_frame(job) -> np.ndarray:
    cam, wp = job
    return _WORKER_MODEL.render(cam, warp_position=wp).rgb


def render_path(model: Model, request: RenderRequest, workers: int = 1) -> list[np.ndarray]:
    """Render every camera of the path; the warp field sees the override when one is given.

    Frames are independent, so ``workers > 1`` spreads them over a process
    pool that holds one read-only copy of the model per worker.
    """
    warps = request.warp_positions or [None] * len(request.cameras)
    jobs = list(zip(request.cameras, warps))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs)), initializer=_init_worker, initargs=(model,)) as pool:
            frames = list(pool.map(_render_frame, jobs))
    else:
        frames = [model.render(cam, warp_position=wp).rgb for cam, wp in jobs]
    if request.out_dir is not None:
        for k, img in enumerate(frames):
            write_frame(request.out_dir, f"frame_{k:04d}", img)
    return frames


# ---------------------------------------------------------------------------
# tracking


@dataclass
class Tracks:
    indices: np.ndarray  # (P,) reflection base indices
    pixels: np.ndarray  # (C, P, 2)
    depth: np.ndarray  # (C, P)
    visible: np.ndarray  # (C, P) bool
    positions: np.ndarray = field(repr=False)  # (C, P, 3) warped points

    def rows(self):
        for c in range(self.pixels.shape[0]):
            for j, idx in enumerate(self.indices):
                u, v = self.pixels[c, j]
                yield {"camera": c, "point": int(idx), "u": u, "v": v, "depth": self.depth[c, j], "visible": int(self.visible[c, j])}


def scene_scale(model: Model) -> float:
    pts = model.params["prim.xyz"]
    if model.n_reflection:
        pts = np.concatenate([pts, model.reflection_base])
    box = Aabb.from_points(pts)
    return float(np.linalg.norm(box.extent))


def correspond(
    model: Model,
    indices: np.ndarray,
    cameras: list[Camera],
    occlusion_fraction: float = OCCLUSION_FRACTION,
) -> Tracks:
    """Project the warped trajectory of each selected reflection point into every camera.

    A point counts as visible when it lands inside the image and its depth is
    at most the composited median depth of the reflection cloud at its pixel
    plus ``occlusion_fraction`` of the scene diagonal.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= model.n_reflection):
        raise IndexError("reflection point index out of range")
    tol = occlusion_fraction * scene_scale(model)
    n_c, n_p = len(cameras), len(indices)
    pixels = np.zeros((n_c, n_p, 2))
    depth = np.zeros((n_c, n_p))
    visible = np.zeros((n_c, n_p), dtype=bool)
    positions = np.zeros((n_c, n_p, 3))
    for c, cam in enumerate(cameras):
        r = model.render(cam)
        q = r.reflection_positions[indices]
        uv, z = project(cam, q)
        positions[c], pixels[c], depth[c] = q, uv, z
        if r.reflection is None:
            continue
        med = median_depth(r.reflection)
        col = np.floor(uv[:, 0]).astype(np.int64)
        row = np.floor(uv[:, 1]).astype(np.int64)
        inside = (z > 0) & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
        ok = np.zeros(n_p, dtype=bool)
        ok[inside] = z[inside] <= med[row[inside], col[inside]] + tol
        visible[c] = ok
    return Tracks(indices, pixels, depth, visible, positions)


# ---------------------------------------------------------------------------
# editing


def clone(model: Model, selection: Aabb, translation, rotation=None) -> Model:
    """Copy of ``model`` with the selected primary points and the reflection cloud replicated at ``translation``.

    The replicated reflection cloud is warped with the camera moved by
    ``-translation`` and then shifted by ``translation``.  Only translations
    are supported.  Cloning onto itself (zero translation) leaves the model
    unchanged: the copy coincides with the original point set.
    """
    if rotation is not None and not np.allclose(np.asarray(rotation, dtype=np.float64), np.eye(3), atol=0, rtol=0):
        raise ValueError("only translations can be cloned")
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    out = copy.deepcopy(model)
    if not np.any(t):
        return out
    src = np.flatnonzero(selection.contains(out.params["prim.xyz"]))
    if len(src):
        out.append_primary(src, out.params["prim.xyz"][src] + t)
    if out.n_reflection:
        out.clone_offsets.append(t)
    return out


# ---------------------------------------------------------------------------
# stereo


@dataclass
class StereoPair:
    left: np.ndarray
    right: np.ndarray
    left_render: Render = field(repr=False)
    right_render: Render = field(repr=False)


def stereo_cameras(camera: Camera, separation: float) -> tuple[Camera, Camera]:
    right_axis = camera.rotation[0]
    half = 0.5 * separation * right_axis
    return camera.translated(-half), camera.translated(half)


def stereo_render(model: Model, camera: Camera, eye_separation: float, warp_eye_separation: float) -> StereoPair:
    """Raster eyes at ``eye_separation``; the warp field sees eyes at ``warp_eye_separation``.

    A zero warp separation gives both eyes one cyclopean warp camera, so the
    reflection sits at the same 3D place for both eyes.
    """
    if eye_separation < 0 or warp_eye_separation < 0:
        raise ValueError("eye separations must be non-negative")
    left, right = stereo_cameras(camera, eye_separation)
    wl, wr = stereo_cameras(camera, warp_eye_separation)
    rl = model.render(left, warp_position=wl.position)
    rr = model.render(right, warp_position=wr.position)
    return StereoPair(rl.rgb, rr.rgb, rl, rr)


# ---------------------------------------------------------------------------
# comparison with the analytic catacaustic


@dataclass
class CausticReport:
    point_index: int
    camera_positions: np.ndarray  # (S, 3) sampled warp cameras
    warped: np.ndarray  # (S, 3) learned positions of the chosen reflection point
    analytic: np.ndarray  # (M, 3) points of the analytic catacaustic surface
    virtual: np.ndarray  # (S, 3) analytic virtual point per camera (NaN where not visible)
    residual: np.ndarray  # (S,) distance of the warped point to that camera's reflected ray (NaN if not visible)
    chamfer: float
    median_residual: float


def catacaustic_surface(sphere: Sphere, source, n_profile: int = 400, n_around: int = 72, delta: float = 1e-5) -> np.ndarray:
    """Sample the caustic of a point source in a convex sphere, by revolving the great-circle caustic.

    The caustic is rotationally symmetric about the axis through the center
    and the source; only the lit part of the mirror is used.
    """
    src = np.asarray(source, dtype=np.float64)
    rel = src - sphere.center
    d = np.linalg.norm(rel)
    if d <= sphere.radius:
        raise NotVisibleError("source inside the sphere")
    axis = rel / d
    helper = np.eye(3)[np.argmin(np.abs(axis))]
    e2 = helper - (helper @ axis) * axis
    e2 /= np.linalg.norm(e2)
    lit = np.arccos(sphere.radius / d)  # angular radius of the lit cap seen from the center
    t = np.linspace(-lit, lit, n_profile + 2)[1:-1]
    samples = envelope_points(sphere, src, t, delta=delta, section=(axis, e2))
    prof = np.array([s.point for s in samples if s.valid and np.isfinite(s.point).all()]) - sphere.center
    a = prof @ axis
    b = prof @ e2
    keep = b >= 0  # half profile; revolution covers the rest
    a, b = a[keep], b[keep]
    e3 = np.cross(axis, e2)
    phi = np.linspace(0, 2 * np.pi, n_around, endpoint=False)
    pts = sphere.center + a[None, :, None] * axis + b[None, :, None] * (np.cos(phi)[:, None, None] * e2 + np.sin(phi)[:, None, None] * e3)
    return pts.reshape(-1, 3)


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance."""
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(0.5 * (da.mean() + db.mean()))


def _ray_distance(x: np.ndarray, origin: np.ndarray, through: np.ndarray) -> float:
    d = through - origin
    d = d / np.linalg.norm(d)
    v = x - origin
    return float(np.linalg.norm(v - (v @ d) * d))


def compare_catacaustic(
    model: Model,
    sphere: Sphere,
    source,
    n_cameras: int = 200,
    seed: int = 0,
    point_index: int | None = None,
    camera_box: Aabb | None = None,
) -> CausticReport:
    """Learned trajectory of one reflection point vs the analytic catacaustic of ``source``.

    Warp cameras are drawn uniformly from ``camera_box`` (default: the
    warp field's camera normalization box).  Without ``point_index`` the
    reflection point closest to the analytic virtual image seen from the box
    center is used.
    """
    if model.n_reflection == 0:
        raise ValueError("model has no reflection cloud")
    src = np.asarray(source, dtype=np.float64)
    box = model.warp.camera_box if camera_box is None else camera_box
    rng = np.random.default_rng(seed)
    cams = box.min + rng.random((n_cameras, 3)) * box.extent
    analytic = catacaustic_surface(sphere, src)
    if point_index is None:
        try:
            target = virtual_point_on_catacaustic(sphere, src, box.center)
        except NotVisibleError:
            target = specular_point(sphere, src, box.center) if np.linalg.norm(box.center - sphere.center) > sphere.radius else sphere.center
        point_index = int(np.argmin(np.linalg.norm(model.reflection_base - target, axis=1)))
    base = model.reflection_base[point_index : point_index + 1]
    warped = np.array([model.warp(base, c)[0] for c in cams])
    virtual = np.full((n_cameras, 3), np.nan)
    residual = np.full(n_cameras, np.nan)
    for k, c in enumerate(cams):
        try:
            s = specular_point(sphere, src, c)
            virtual[k] = virtual_point_on_catacaustic(sphere, src, c)
        except NotVisibleError:
            continue
        residual[k] = _ray_distance(warped[k], c, s)
    ok = np.isfinite(residual)
    return CausticReport(
        point_index=point_index,
        camera_positions=cams,
        warped=warped,
        analytic=analytic,
        virtual=virtual,
        residual=residual,
        chamfer=chamfer(warped, analytic),
        median_residual=float(np.median(residual[ok])) if ok.any() else float("nan"),
    )

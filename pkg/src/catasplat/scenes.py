"""Synthetic reflector scenes, a small Whitted ray tracer and dataset generation.

Diffuse geometry is a list of triangles with procedural checkerboard albedo and
round color markers; the reflector is a sphere, a rectangular plane mirror or a
concave spherical cap.  The tracer does Lambertian shading with hard shadows
from point lights plus mirror bounces off the reflector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .caustics import Sphere
from .fileio import read_mask_png, read_pfm, read_ply_points, write_pfm, write_png, write_ply_points
from .geometry import Camera, look_at, pixel_centers, pixel_rays, save_cameras, load_cameras
from .volume import MaskImage

RAY_EPS = 1e-7
MISS = 0
DIFFUSE = 1
REFLECTOR = 2


@dataclass(frozen=True)
class PlaneMirror:
    """Rectangle ``center + a u + b v`` with ``|a| <= half_u``, ``|b| <= half_v``."""

    center: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    half_u: float
    half_v: float

    def __post_init__(self) -> None:
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        u = np.asarray(self.u_axis, dtype=np.float64)
        u = u - (u @ n) * n
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "u_axis", u / np.linalg.norm(u))

    @property
    def v_axis(self) -> np.ndarray:
        return np.cross(self.normal, self.u_axis)

    def corners(self) -> np.ndarray:
        u, v = self.half_u * self.u_axis, self.half_v * self.v_axis
        c = self.center
        return np.array([c - u - v, c + u - v, c + u + v, c - u + v])


@dataclass(frozen=True)
class ConcaveCap:
    """Part of a sphere within ``angle`` (radians) of ``axis`` seen from the center."""

    center: np.ndarray
    radius: float
    axis: np.ndarray
    angle: float

    def __post_init__(self) -> None:
        a = np.asarray(self.axis, dtype=np.float64)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "axis", a / np.linalg.norm(a))


@dataclass
class SyntheticScene:
    """Immutable-by-convention scene description (arrays are not copied)."""

    name: str
    triangles: np.ndarray  # (T, 3, 3)
    tex_u: np.ndarray  # (T, 3) checker frame axes
    tex_v: np.ndarray
    color_a: np.ndarray  # (T, 3)
    color_b: np.ndarray
    checker: np.ndarray  # (T,) period in world units; <= 0 means flat color_a
    lights: np.ndarray  # (L, 3)
    light_colors: np.ndarray  # (L, 3)
    reflector: Sphere | PlaneMirror | ConcaveCap | None = None
    markers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    marker_radius: np.ndarray = field(default_factory=lambda: np.zeros(0))
    marker_colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    ambient: float = 0.15
    background: np.ndarray = field(default_factory=lambda: np.array([0.55, 0.65, 0.8]))
    reflectance: float = 0.9

    def __post_init__(self) -> None:
        self.triangles = np.asarray(self.triangles, dtype=np.float64).reshape(-1, 3, 3)
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.reflector is not None and _reflector_touches(self.reflector, self.triangles):
            raise ValueError("reflector intersects diffuse geometry")

    @property
    def normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @property
    def areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def albedo(self, points: np.ndarray, tri: np.ndarray) -> np.ndarray:
        """Checkerboard albedo of ``points`` lying on triangles ``tri``, markers on top."""
        rel = points - self.triangles[tri, 0]
        a = np.einsum("ij,ij->i", rel, self.tex_u[tri])
        b = np.einsum("ij,ij->i", rel, self.tex_v[tri])
        period = self.checker[tri]
        safe = np.where(period > 0, period, 1.0)
        odd = (np.floor(a / safe) + np.floor(b / safe)) % 2 == 1
        col = np.where((odd & (period > 0))[:, None], self.color_b[tri], self.color_a[tri])
        for m, r, c in zip(self.markers, self.marker_radius, self.marker_colors):
            col[np.linalg.norm(points - m, axis=1) <= r] = c
        return col

    def to_dict(self) -> dict:
        d = {
            k: getattr(self, k).tolist()
            for k in (
                "triangles", "tex_u", "tex_v", "color_a", "color_b", "checker", "lights",
                "light_colors", "markers", "marker_radius", "marker_colors", "background",
            )
        }
        d.update(name=self.name, ambient=self.ambient, reflectance=self.reflectance)
        d["reflector"] = _reflector_to_dict(self.reflector)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in d.items() if isinstance(v, list)}
        for k in ("markers", "marker_colors"):
            arrays[k] = arrays[k].reshape(-1, 3)
        return cls(
            name=d["name"], ambient=d["ambient"], reflectance=d["reflectance"],
            reflector=_reflector_from_dict(d.get("reflector")), **arrays,
        )


def _reflector_to_dict(r) -> dict | None:
    if r is None:
        return None
    if isinstance(r, Sphere):
        return {"type": "sphere", "center": r.center.tolist(), "radius": r.radius}
    if isinstance(r, PlaneMirror):
        return {
            "type": "plane", "center": r.center.tolist(), "normal": r.normal.tolist(),
            "u_axis": r.u_axis.tolist(), "half_u": r.half_u, "half_v": r.half_v,
        }
    return {"type": "cap", "center": r.center.tolist(), "radius": r.radius, "axis": r.axis.tolist(), "angle": r.angle}


def _reflector_from_dict(d: dict | None):
    if d is None:
        return None
    kind = d["type"]
    args = {k: v for k, v in d.items() if k != "type"}
    return {"sphere": Sphere, "plane": PlaneMirror, "cap": ConcaveCap}[kind](**args)


# ---------------------------------------------------------------------------
# intersection


def _closest_on_triangle(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Closest point to ``p`` on triangle ``abc`` (region tests on barycentrics)."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return a
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        return a + d1 / (d1 - d3) * ab
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        return a + d2 / (d2 - d6) * ac
    va = d3 * d6 - d5 * d4
    if va <= 0 and d4 - d3 >= 0 and d5 - d6 >= 0:
        return b + (d4 - d3) / ((d4 - d3) + (d5 - d6)) * (c - b)
    denom = 1.0 / (va + vb + vc)
    return a + ab * vb * denom + ac * vc * denom


def _segment_hits_triangles(p0, p1, tris) -> bool:
    d = p1 - p0
    t, _ = _hit_triangles(p0[None], d[None], tris)
    return bool(t[0] <= 1.0)


def _reflector_touches(r, tris: np.ndarray) -> bool:
    if isinstance(r, (Sphere, ConcaveCap)):
        for a, b, c in tris:
            if np.linalg.norm(_closest_on_triangle(r.center, a, b, c) - r.center) <= r.radius:
                if isinstance(r, Sphere):
                    return True
                # a cap only collides where the closest point lies inside its solid angle
                q = _closest_on_triangle(r.center, a, b, c) - r.center
                if q @ r.axis >= np.cos(r.angle) * np.linalg.norm(q) - 1e-12:
                    return True
        return False
    quad = r.corners()
    quad_tris = np.array([quad[[0, 1, 2]], quad[[0, 2, 3]]])
    for tri in tris:
        for i in range(3):
            if _segment_hits_triangles(tri[i], tri[(i + 1) % 3], quad_tris):
                return True
    for i in range(4):
        if _segment_hits_triangles(quad[i], quad[(i + 1) % 4], tris):
            return True
    return False


def _hit_triangles(orig, dirs, tris, tmin=RAY_EPS):
    """Nearest triangle hit per ray (Moller-Trumbore); ``inf`` and -1 on a miss."""
    n = len(dirs)
    orig = np.broadcast_to(orig, dirs.shape)
    best = np.full(n, np.inf)
    idx = np.full(n, -1)
    tmin = np.broadcast_to(tmin, (n,))
    for k, (a, b, c) in enumerate(tris):
        e1, e2 = b - a, c - a
        pvec = np.cross(dirs, e2)
        det = pvec @ e1
        ok = np.abs(det) > 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = orig - a
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = np.einsum("ij,ij->i", dirs, qvec) * inv
        t = (qvec @ e2) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > tmin) & (t < best)
        best = np.where(hit, t, best)
        idx = np.where(hit, k, idx)
    return best, idx


def _sphere_roots(orig, dirs, center, radius):
    oc = np.broadcast_to(orig - center, dirs.shape)
    b = np.einsum("ij,ij->i", dirs, oc)
    c = np.einsum("ij,ij->i", oc, oc) - radius**2
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    valid = disc >= 0
    return -b - root, -b + root, valid


def _hit_reflector(r, orig, dirs, tmin=RAY_EPS):
    """Nearest reflector hit: (t, unit normal facing the incoming ray)."""
    n = len(dirs)
    orig = np.broadcast_to(orig, dirs.shape)
    t = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    if r is None:
        return t, normal
    tmin = np.broadcast_to(tmin, (n,))
    if isinstance(r, PlaneMirror):
        denom = dirs @ r.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = ((r.center - orig) @ r.normal) / denom
        x = orig + tt[:, None] * dirs
        rel = x - r.center
        inside = (np.abs(rel @ r.u_axis) <= r.half_u) & (np.abs(rel @ r.v_axis) <= r.half_v)
        hit = (denom != 0) & (tt > tmin) & inside
        t = np.where(hit, tt, np.inf)
        normal[:] = r.normal
    else:
        t0, t1, valid = _sphere_roots(orig, dirs, r.center, r.radius)
        for root in (t1, t0):  # t0 last so the nearest valid root wins
            ok = valid & (root > tmin)
            if isinstance(r, ConcaveCap):
                x = orig + root[:, None] * dirs
                ok &= (x - r.center) @ r.axis >= np.cos(r.angle) * r.radius
            t = np.where(ok, root, t)
        x = orig + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        normal = (x - r.center) / r.radius
    flip = np.einsum("ij,ij->i", normal, dirs) > 0
    normal = np.where(flip[:, None], -normal, normal)
    return t, normal


# ---------------------------------------------------------------------------
# shading


def shade_diffuse(scene: SyntheticScene, points: np.ndarray, tri: np.ndarray, view_dirs: np.ndarray) -> np.ndarray:
    """Lambertian radiance with hard shadows; normals face the incoming rays."""
    n = scene.normals[tri]
    flip = np.einsum("ij,ij->i", n, view_dirs) > 0
    n = np.where(flip[:, None], -n, n)
    albedo = scene.albedo(points, tri)
    light = np.full((len(points), 3), scene.ambient)
    origin = points + 1e-6 * n
    for lp, lc in zip(scene.lights, scene.light_colors):
        to_l = lp - origin
        dist = np.linalg.norm(to_l, axis=1)
        ldir = to_l / dist[:, None]
        cos = np.einsum("ij,ij->i", n, ldir)
        lit = cos > 0
        if np.any(lit):
            t, _ = _hit_triangles(origin[lit], ldir[lit], scene.triangles)
            blocked = np.zeros(len(points), dtype=bool)
            blocked[lit] = t < dist[lit]
            lit &= ~blocked
        light += np.where(lit, cos, 0.0)[:, None] * lc
    return albedo * light


def trace(scene: SyntheticScene, orig, dirs, bounces: int = 1, tmin=RAY_EPS, use_reflector: bool = True):
    """Unclipped radiance and first-hit kind (MISS / DIFFUSE / REFLECTOR) per ray."""
    dirs = np.asarray(dirs, dtype=np.float64)
    n = len(dirs)
    orig = np.broadcast_to(np.asarray(orig, dtype=np.float64), dirs.shape)
    td, tri = _hit_triangles(orig, dirs, scene.triangles, tmin)
    if use_reflector:
        tr, nr = _hit_reflector(scene.reflector, orig, dirs, tmin)
    else:
        tr, nr = np.full(n, np.inf), np.zeros((n, 3))
    kind = np.full(n, MISS)
    kind[np.isfinite(td)] = DIFFUSE
    refl = tr < td
    kind[refl] = REFLECTOR
    color = np.tile(scene.background, (n, 1))
    dif = kind == DIFFUSE
    if np.any(dif):
        x = orig[dif] + td[dif, None] * dirs[dif]
        color[dif] = shade_diffuse(scene, x, tri[dif], dirs[dif])
    if np.any(refl):
        if bounces > 0:
            x = orig[refl] + tr[refl, None] * dirs[refl]
            nn = nr[refl]
            d2 = dirs[refl] - 2.0 * np.einsum("ij,ij->i", dirs[refl], nn)[:, None] * nn
            sub, _ = trace(scene, x + 1e-9 * nn, d2, bounces - 1)
            color[refl] = scene.reflectance * sub
        # with no bounce left the ray keeps the background color
    return color, kind


def _sample_pixels(camera: Camera, spp: int, rng: np.random.Generator) -> np.ndarray:
    centers = pixel_centers(camera.width, camera.height).reshape(-1, 2)
    if spp == 1:
        return centers[None]
    return centers[None] + rng.uniform(-0.5, 0.5, size=(spp,) + centers.shape)


def render_reference(scene: SyntheticScene, camera: Camera, spp: int = 1, seed: int = 0, bounces: int = 1) -> np.ndarray:
    """Ground-truth RGB image in [0, 1]; deterministic given ``seed``."""
    if spp < 1:
        raise ValueError("spp must be >= 1")
    samples = _sample_pixels(camera, spp, np.random.default_rng(seed))
    acc = np.zeros((camera.width * camera.height, 3))
    for px in samples:
        col, _ = trace(scene, camera.position, pixel_rays(camera, px), bounces)
        acc += np.clip(col, 0.0, 1.0)
    return (acc / spp).reshape(camera.height, camera.width, 3)


def hit_kinds(scene: SyntheticScene, camera: Camera) -> np.ndarray:
    """(H, W) first-hit kind through every pixel center."""
    d = pixel_rays(camera).reshape(-1, 3)
    n = len(d)
    orig = np.broadcast_to(camera.position, d.shape)
    td, _ = _hit_triangles(orig, d, scene.triangles)
    tr, _ = _hit_reflector(scene.reflector, orig, d)
    kind = np.where(np.isfinite(td), DIFFUSE, MISS)
    kind[tr < td] = REFLECTOR
    return kind.reshape(camera.height, camera.width)


def reflector_mask(scene: SyntheticScene, camera: Camera, dilate: int = 0) -> MaskImage:
    """Pixels where the reflector is the first hit, optionally grown by ``dilate`` pixels."""
    bits = hit_kinds(scene, camera) == REFLECTOR
    for _ in range(dilate):
        grown = bits.copy()
        grown[1:] |= bits[:-1]
        grown[:-1] |= bits[1:]
        grown[:, 1:] |= bits[:, :-1]
        grown[:, :-1] |= bits[:, 1:]
        bits = grown
    return MaskImage(bits)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Orbit:
    """Cameras on a horizontal arc ``center + (r cos a, r sin a, height)`` looking at ``target``.

    ``arc`` is ``(start, end)`` in radians; ``None`` means a full ring.
    """

    radius: float
    height: float
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    target: tuple[float, float, float] | None = None
    arc: tuple[float, float] | None = None
    fov_deg: float = 50.0
    height_wobble: float = 0.0

    def cameras(self, n: int, width: int, height: int) -> list[Camera]:
        center = np.asarray(self.center, dtype=np.float64)
        target = center if self.target is None else np.asarray(self.target, dtype=np.float64)
        if self.arc is None:
            angles = 2 * np.pi * np.arange(n) / n
        else:
            angles = np.linspace(self.arc[0], self.arc[1], n)
        cams = []
        for k, a in enumerate(angles):
            h = self.height + self.height_wobble * np.sin(3.0 * a + 0.5 * k)
            pos = center + np.array([self.radius * np.cos(a), self.radius * np.sin(a), h])
            cams.append(look_at(pos, target, width=width, height=height, fov_deg=self.fov_deg))
        return cams


@dataclass
class Dataset:
    cameras: list[Camera]
    images: list[np.ndarray]
    points: dict[str, np.ndarray]
    masks: dict[int, MaskImage]
    scene: SyntheticScene | None = None


REFLECTOR_GRAY = 0.5  # color given to reconstructed points on the mirror itself


def reflector_area(r) -> float:
    if r is None:
        return 0.0
    if isinstance(r, PlaneMirror):
        return 4.0 * r.half_u * r.half_v
    if isinstance(r, ConcaveCap):
        return 2.0 * np.pi * r.radius**2 * (1.0 - np.cos(r.angle))
    return 4.0 * np.pi * r.radius**2


def sample_reflector_surface(r, count: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform points on the reflector with normals (outward for spheres, toward the center for caps)."""
    if isinstance(r, PlaneMirror):
        a = rng.uniform(-r.half_u, r.half_u, count)
        b = rng.uniform(-r.half_v, r.half_v, count)
        pts = r.center + a[:, None] * r.u_axis + b[:, None] * r.v_axis
        return pts, np.tile(r.normal, (count, 1))
    dirs = np.zeros((0, 3))
    while len(dirs) < count:
        d = rng.normal(size=(2 * count + 16, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        if isinstance(r, ConcaveCap):
            d = d[d @ r.axis >= np.cos(r.angle)]
        dirs = np.concatenate([dirs, d])
    dirs = dirs[:count]
    pts = r.center + r.radius * dirs
    return pts, (-dirs if isinstance(r, ConcaveCap) else dirs)


def sample_diffuse_points(
    scene: SyntheticScene,
    count: int,
    rng: np.random.Generator,
    cameras: list[Camera] | None = None,
    jitter: float = 0.0,
    holes: np.ndarray | None = None,
    hole_radius: float = 0.0,
    include_reflector: bool = False,
) -> dict[str, np.ndarray]:
    """Area-weighted surface samples with normals and shaded colors.

    With ``cameras`` given, only points seen unoccluded by at least one camera
    are kept, as a multi-view stereo reconstruction would.  Points within
    ``hole_radius`` of any ``holes`` center are dropped before jitter.  With
    ``include_reflector`` the mirror surface is sampled too (at the same
    density, flat gray, ``tri == -1``), standing in for the noisy geometry a
    reconstruction recovers on a shiny object.
    """
    r_area = reflector_area(scene.reflector) if include_reflector else 0.0
    over = 3 if cameras else 1
    total = count * over
    n_refl = int(round(total * r_area / (r_area + scene.areas.sum())))
    prob = scene.areas / scene.areas.sum()
    tri = rng.choice(len(prob), size=total - n_refl, p=prob)
    r1, r2 = rng.random(len(tri)), rng.random(len(tri))
    s = np.sqrt(r1)
    t = scene.triangles[tri]
    pts = (1 - s)[:, None] * t[:, 0] + (s * (1 - r2))[:, None] * t[:, 1] + (s * r2)[:, None] * t[:, 2]
    normals = scene.normals[tri]
    if cameras:
        # orient normals toward the cameras that see the surface
        mean_cam = np.mean([c.position for c in cameras], axis=0)
        flip = np.einsum("ij,ij->i", normals, mean_cam - pts) < 0
        normals = np.where(flip[:, None], -normals, normals)
    if n_refl:
        rp, rn = sample_reflector_surface(scene.reflector, n_refl, rng)
        pts = np.concatenate([pts, rp])
        normals = np.concatenate([normals, rn])
        tri = np.concatenate([tri, np.full(n_refl, -1)])
        order = rng.permutation(len(pts))
        pts, normals, tri = pts[order], normals[order], tri[order]
    keep = np.ones(len(pts), dtype=bool)
    if cameras:
        keep &= _seen_by_any(scene, pts, cameras)
    if holes is not None and len(holes):
        d = np.linalg.norm(pts[:, None, :] - np.asarray(holes)[None], axis=2)
        keep &= d.min(axis=1) > hole_radius
    idx = np.flatnonzero(keep)[:count]
    pts, tri, normals = pts[idx], tri[idx], normals[idx]
    color = np.full((len(pts), 3), REFLECTOR_GRAY)
    on_tri = tri >= 0
    color[on_tri] = np.clip(shade_diffuse(scene, pts[on_tri], tri[on_tri], -normals[on_tri]), 0.0, 1.0)
    if jitter > 0:
        pts = pts + rng.normal(scale=jitter, size=pts.shape)
    return {"xyz": pts, "normal": normals, "color": color, "tri": tri.astype(np.float64)}


def _seen_by_any(scene: SyntheticScene, pts: np.ndarray, cameras: list[Camera]) -> np.ndarray:
    seen = np.zeros(len(pts), dtype=bool)
    for cam in cameras:
        todo = np.flatnonzero(~seen)
        if len(todo) == 0:
            break
        q = cam.to_view(pts[todo])
        z = q[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * q[:, 0] / z + cam.cx
            v = cam.fy * q[:, 1] / z + cam.cy
        inside = (z > 1e-3) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        cand = todo[inside]
        if len(cand) == 0:
            continue
        d = pts[cand] - cam.position
        dist = np.linalg.norm(d, axis=1)
        d /= dist[:, None]
        td, _ = _hit_triangles(cam.position, d, scene.triangles)
        tr, _ = _hit_reflector(scene.reflector, cam.position, d)
        visible = (td >= dist * (1 - 1e-6)) & (tr >= dist * (1 - 1e-6))
        seen[cand[visible]] = True
    return seen


def generate_dataset(
    scene: SyntheticScene,
    n_views: int,
    orbit: Orbit,
    width: int = 96,
    height: int = 96,
    seed: int = 0,
    n_points: int = 20000,
    spp: int = 4,
    jitter: float = 0.0,
    n_holes: int = 0,
    hole_radius: float = 0.2,
    mask_views: int = 4,
    out_dir: str | Path | None = None,
    include_reflector: bool = True,
) -> Dataset:
    """Render a multi-view dataset of ``scene`` and optionally write it to ``out_dir``."""
    if n_views < 2:
        raise ValueError("need at least two views")
    rng = np.random.default_rng(seed)
    cams = orbit.cameras(n_views, width, height)
    images = [render_reference(scene, c, spp, seed=seed * 7919 + k) for k, c in enumerate(cams)]
    holes = None
    if n_holes:
        probe = sample_diffuse_points(scene, 4 * n_holes, rng, cams)
        holes = probe["xyz"][:n_holes]
    points = sample_diffuse_points(scene, n_points, rng, cams, jitter, holes, hole_radius, include_reflector)
    if holes is not None:
        points["holes"] = holes
    masks = {}
    if scene.reflector is not None and mask_views:
        for k in np.linspace(0, n_views, mask_views, endpoint=False).astype(int):
            masks[int(k)] = reflector_mask(scene, cams[k], dilate=1)
    ds = Dataset(cams, images, points, masks, scene)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    save_cameras(out / "cameras.json", ds.cameras)
    for k, img in enumerate(ds.images):
        write_png(out / "images" / f"view_{k:04d}.png", img)
        write_pfm(out / "images" / f"view_{k:04d}.pfm", img)
    pts = {k: v for k, v in ds.points.items() if k in ("xyz", "normal", "color")}
    write_ply_points(out / "points_primary.ply", pts)
    if ds.masks:
        (out / "masks").mkdir(exist_ok=True)
        for k, m in ds.masks.items():
            write_png(out / "masks" / f"view_{k:04d}.png", m.bits.astype(np.float64))
    if ds.scene is not None:
        (out / "scene.json").write_text(json.dumps(ds.scene.to_dict()))


def load_dataset(path: str | Path) -> Dataset:
    """Read a dataset directory; float PFM images are preferred over PNG."""
    root = Path(path)
    if not (root / "cameras.json").exists():
        raise FileNotFoundError(f"{root} has no cameras.json")
    cams = load_cameras(root / "cameras.json")
    images = []
    for k in range(len(cams)):
        pfm = root / "images" / f"view_{k:04d}.pfm"
        if pfm.exists():
            images.append(read_pfm(pfm))
        else:
            from .fileio import read_png

            images.append(read_png(root / "images" / f"view_{k:04d}.png"))
    points = read_ply_points(root / "points_primary.ply")
    masks = {}
    if (root / "masks").is_dir():
        for f in sorted((root / "masks").glob("view_*.png")):
            masks[int(f.stem.split("_")[1])] = MaskImage(read_mask_png(f))
    scene = None
    if (root / "scene.json").exists():
        scene = SyntheticScene.from_dict(json.loads((root / "scene.json").read_text()))
    return Dataset(cams, images, points, masks, scene)


# ---------------------------------------------------------------------------
# named scenes


class _Builder:
    def __init__(self) -> None:
        self.tris, self.u, self.v, self.a, self.b, self.p = [], [], [], [], [], []

    def quad(self, corner, eu, ev, ca, cb=None, period=0.0):
        corner, eu, ev = (np.asarray(x, dtype=np.float64) for x in (corner, eu, ev))
        p0, p1, p2, p3 = corner, corner + eu, corner + eu + ev, corner + ev
        uu = eu / np.linalg.norm(eu)
        vv = ev - (ev @ uu) * uu
        vv /= np.linalg.norm(vv)
        for tri in ((p0, p1, p2), (p0, p2, p3)):
            self.tris.append(np.array(tri))
            self.u.append(uu)
            self.v.append(vv)
            self.a.append(ca)
            self.b.append(ca if cb is None else cb)
            self.p.append(period)
        return self

    def box(self, lo, hi, ca, cb=None, period=0.0, bottom=False):
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        dx, dy, dz = np.diag(hi - lo)
        self.quad(lo, dx, dz, ca, cb, period)
        self.quad(lo + dy, dx, dz, ca, cb, period)
        self.quad(lo, dy, dz, ca, cb, period)
        self.quad(lo + dx, dy, dz, ca, cb, period)
        self.quad(lo + dz, dx, dy, ca, cb, period)
        if bottom:
            self.quad(lo, dx, dy, ca, cb, period)
        return self

    def arrays(self) -> dict:
        f = lambda x: np.array(x, dtype=np.float64)
        return dict(
            triangles=f(self.tris), tex_u=f(self.u), tex_v=f(self.v),
            color_a=f(self.a), color_b=f(self.b), checker=f(self.p),
        )


_LIGHTS = np.array([[2.5, -2.0, 3.5], [-2.5, 1.5, 3.0]])
_LIGHT_COLORS = np.array([[0.55, 0.55, 0.5], [0.35, 0.35, 0.4]])


def _room(b: _Builder, half: float = 3.0, wall_h: float = 2.2) -> _Builder:
    b.quad([-half, -half, 0], [2 * half, 0, 0], [0, 2 * half, 0], [0.8, 0.8, 0.78], [0.35, 0.35, 0.4], 0.5)
    b.quad([-half, half, 0], [2 * half, 0, 0], [0, 0, wall_h], [0.85, 0.55, 0.3], [0.95, 0.85, 0.6], 0.6)
    b.quad([half, -half, 0], [0, 2 * half, 0], [0, 0, wall_h], [0.3, 0.55, 0.75], [0.75, 0.85, 0.95], 0.6)
    b.quad([-half, -half, 0], [0, 2 * half, 0], [0, 0, wall_h], [0.45, 0.7, 0.4], [0.85, 0.9, 0.6], 0.6)
    return b


def sphere_room() -> SyntheticScene:
    """Mirror sphere on a checkered floor among colored blocks and walls."""
    b = _room(_Builder())
    b.box([1.0, 0.9, 0], [1.5, 1.4, 0.5], [0.9, 0.2, 0.2], [0.95, 0.9, 0.85], 0.25)
    b.box([-1.5, 0.8, 0], [-1.0, 1.3, 0.8], [0.2, 0.3, 0.9], [0.9, 0.9, 0.3], 0.2)
    b.box([-0.4, -1.6, 0], [0.2, -1.1, 0.35], [0.2, 0.75, 0.3], [0.95, 0.95, 0.95], 0.15)
    markers = np.array([[-1.0, 3.0, 1.2], [3.0, 0.4, 1.1], [-3.0, -0.6, 1.3], [1.25, 1.15, 0.5], [-1.25, 1.05, 0.8]])
    return SyntheticScene(
        "sphere_room", lights=_LIGHTS, light_colors=_LIGHT_COLORS,
        reflector=Sphere([0.0, 0.0, 0.75], 0.55),
        markers=markers, marker_radius=np.full(len(markers), 0.12),
        marker_colors=np.array([[1, 0, 1], [1, 1, 0], [0, 1, 1], [0, 0, 0], [1, 1, 1.0]]),
        **b.arrays(),
    )


def planar_room() -> SyntheticScene:
    """Vertical rectangular mirror facing colored blocks with markers."""
    b = _room(_Builder())
    b.box([0.7, -1.6, 0], [1.2, -1.1, 0.6], [0.9, 0.2, 0.2], [0.95, 0.9, 0.85], 0.25)
    b.box([-1.3, -1.4, 0], [-0.8, -0.9, 0.9], [0.2, 0.3, 0.9], [0.9, 0.9, 0.3], 0.2)
    b.box([-0.2, -0.8, 0], [0.3, -0.3, 0.4], [0.2, 0.75, 0.3], [0.95, 0.95, 0.95], 0.15)
    markers = np.array([
        [0.95, -1.6, 0.45], [-1.05, -1.4, 0.7], [0.05, -0.8, 0.3], [-1.3, -1.15, 0.35],
        [1.2, -1.35, 0.3], [0.05, -0.55, 0.4], [-0.55, -0.6, 0.02], [0.5, -0.2, 0.02],
    ])
    colors = np.array([[1, 0, 1], [1, 1, 0], [0, 1, 1], [0, 0, 0], [1, 1, 1], [1, 0.5, 0], [0.5, 0, 1], [0, 0, 0.0]])
    return SyntheticScene(
        "planar_room", lights=_LIGHTS, light_colors=_LIGHT_COLORS,
        reflector=PlaneMirror([0.0, 0.6, 0.8], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0], 0.75, 0.6),
        markers=markers, marker_radius=np.full(len(markers), 0.09), marker_colors=colors,
        **b.arrays(),
    )


def diffuse_room() -> SyntheticScene:
    """The sphere room without its reflector."""
    s = sphere_room()
    s.name = "diffuse_room"
    s.reflector = None
    return s


SCENES = {"sphere_room": sphere_room, "planar_room": planar_room, "diffuse_room": diffuse_room}

DEFAULT_ORBITS = {
    "sphere_room": Orbit(radius=2.3, height=0.75, target=(0.0, 0.0, 0.7), center=(0.0, 0.0, 0.75), height_wobble=0.25),
    "planar_room": Orbit(radius=2.0, height=0.6, center=(0.0, 0.6, 0.6), target=(0.0, 0.6, 0.65), arc=(-2.4, -0.74), height_wobble=0.2),
    "diffuse_room": Orbit(radius=2.3, height=0.75, target=(0.0, 0.0, 0.7), center=(0.0, 0.0, 0.75), height_wobble=0.25),
}

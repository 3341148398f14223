"""Convex reflection volume built from a handful of per-view reflector masks.

Pipeline: mask -> 2D convex hull -> Douglas-Peucker simplification -> one
halfspace per polyline edge (plane through the camera center) -> bounded
convex polyhedron (clipped by a scene box) -> triangulated boundary.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fileio import read_ply_mesh, write_ply_mesh
from .geometry import Aabb, Camera, pixel_rays


class InvalidMaskError(ValueError):
    pass


class EmptyVolumeError(ValueError):
    """The mask constraints have no common 3D region."""


@dataclass(frozen=True)
class MaskImage:
    bits: np.ndarray  # (H, W) bool, row-major

    def __post_init__(self) -> None:
        object.__setattr__(self, "bits", np.asarray(self.bits, dtype=bool))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def boundary_points(self) -> np.ndarray:
        """Corners of the leftmost/rightmost set pixel of every row (pixel-edge coordinates)."""
        pts = []
        for i in np.flatnonzero(self.bits.any(axis=1)):
            cols = np.flatnonzero(self.bits[i])
            lo, hi = cols[0], cols[-1] + 1
            pts += [(lo, i), (lo, i + 1), (hi, i), (hi, i + 1)]
        return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class Halfspace:
    normal: np.ndarray
    offset: float

    def __post_init__(self) -> None:
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("halfspace normal must be unit length")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    def contains(self, pts: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.normal <= self.offset + tol


@dataclass(frozen=True)
class ReflectionVolume:
    normals: np.ndarray  # (K, 3) supporting planes, interior n.x <= d
    offsets: np.ndarray  # (K,)
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) outward-oriented triangles

    @property
    def halfspaces(self) -> list[Halfspace]:
        return [Halfspace(n, d) for n, d in zip(self.normals, self.offsets)]

    @property
    def aabb(self) -> Aabb:
        return Aabb.from_points(self.vertices)

    @property
    def volume(self) -> float:
        tri = self.vertices[self.faces]
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def contains(self, pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return np.all(pts @ self.normals.T <= self.offsets + tol, axis=-1)


def _cross2(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Counterclockwise convex hull (positive signed area), collinear vertices dropped.

    Monotone chain; raises :class:`InvalidMaskError` for fewer than three
    non-collinear points.
    """
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        raise InvalidMaskError("need at least three distinct points")
    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and _cross2(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and _cross2(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        raise InvalidMaskError("points are collinear")
    return hull


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(p - a, axis=-1)
    t = np.clip((p - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def _douglas_peucker(chain: np.ndarray, epsilon: float) -> list[int]:
    keep = [0, len(chain) - 1]
    stack = [(0, len(chain) - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d = _point_segment_distance(chain[lo + 1 : hi], chain[lo], chain[hi])
        k = int(np.argmax(d))
        if d[k] > epsilon:
            mid = lo + 1 + k
            keep.append(mid)
            stack += [(lo, mid), (mid, hi)]
    return sorted(set(keep))


def simplify_polyline(polyline: np.ndarray, epsilon: float) -> np.ndarray:
    """Douglas-Peucker on a closed polyline; output is a subset of the input vertices.

    The loop is split at vertex 0 and the vertex farthest from it, and each
    open chain is simplified independently.
    """
    poly = np.asarray(polyline, dtype=np.float64)
    if len(poly) < 3:
        raise InvalidMaskError("closed polyline needs at least three vertices")
    if epsilon <= 0:
        return poly.copy()
    far = int(np.argmax(np.linalg.norm(poly - poly[0], axis=1)))
    first = _douglas_peucker(poly[: far + 1], epsilon)
    loop = np.vstack([poly[far:], poly[:1]])
    second = _douglas_peucker(loop, epsilon)
    idx = first + [far + k for k in second[1:-1]]
    return poly[idx]


def lift_mask_to_halfspaces(camera: Camera, polyline: np.ndarray) -> list[Halfspace]:
    """One halfspace per polyline edge, bounded by the plane through the camera
    center and the two pixel rays of the edge endpoints."""
    poly = np.asarray(polyline, dtype=np.float64)
    rays = pixel_rays(camera, poly)
    inside_ray = pixel_rays(camera, poly.mean(axis=0))
    out = []
    for k in range(len(poly)):
        n = np.cross(rays[k], rays[(k + 1) % len(poly)])
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise InvalidMaskError("degenerate mask edge (parallel edge rays)")
        n /= norm
        if n @ inside_ray > 0:
            n = -n
        out.append(Halfspace(n, float(n @ camera.position)))
    return out


def aabb_halfspaces(box: Aabb) -> list[Halfspace]:
    out = []
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = 1.0
        out.append(Halfspace(e, box.max[axis]))
        out.append(Halfspace(-e, -box.min[axis]))
    return out


def intersect_halfspaces(halfspaces: Sequence[Halfspace], clip: Aabb) -> ReflectionVolume:
    """Bounded convex polyhedron ``clip ∩ (∩ halfspaces)`` by triple-plane vertex enumeration."""
    hs = list(halfspaces) + aabb_halfspaces(clip)
    normals = np.array([h.normal for h in hs])
    offsets = np.array([h.offset for h in hs])
    scale = max(float(np.abs(np.concatenate([clip.min, clip.max])).max()), 1.0)
    tol = 1e-9 * scale

    triples = np.array(list(itertools.combinations(range(len(hs)), 3)))
    a = normals[triples]
    b = offsets[triples]
    det = np.linalg.det(a)
    ok = np.abs(det) > 1e-12
    verts = np.linalg.solve(a[ok], b[ok][..., None])[..., 0]
    inside = np.all(verts @ normals.T <= offsets + tol, axis=1)
    verts = verts[inside]
    if len(verts) < 4:
        raise EmptyVolumeError("mask constraints have no common interior")

    # merge numerically coincident vertices
    uniq: list[np.ndarray] = []
    for v in verts:
        if not any(np.linalg.norm(v - u) <= 10 * tol for u in uniq):
            uniq.append(v)
    verts = np.array(uniq)
    if len(verts) < 4:
        raise EmptyVolumeError("mask constraints have no common interior")
    # pull vertices inside by rounding residue so every halfspace holds to 1e-7
    verts = _project_inside(verts, normals, offsets)

    centroid = verts.mean(axis=0)
    faces: list[tuple[int, int, int]] = []
    used = []
    for k, (n, d) in enumerate(zip(normals, offsets)):
        on = np.flatnonzero(np.abs(verts @ n - d) <= 100 * tol)
        if len(on) < 3:
            continue
        pts = verts[on]
        c = pts.mean(axis=0)
        u = pts[np.argmax(np.linalg.norm(pts - c, axis=1))] - c
        if np.linalg.norm(u) < tol:
            continue
        u /= np.linalg.norm(u)
        w = np.cross(n, u)
        ang = np.arctan2((pts - c) @ w, (pts - c) @ u)
        ring = on[np.argsort(ang)]
        used.append(k)
        for j in range(1, len(ring) - 1):
            tri = (int(ring[0]), int(ring[j]), int(ring[j + 1]))
            p0, p1, p2 = verts[list(tri)]
            if np.cross(p1 - p0, p2 - p0) @ n < 0:
                tri = (tri[0], tri[2], tri[1])
            faces.append(tri)
    vol = ReflectionVolume(normals[used], offsets[used], verts, np.array(faces, dtype=np.int64))
    if not np.isfinite(vol.volume) or vol.volume <= tol**2 or not np.all(vol.contains(centroid)):
        raise EmptyVolumeError("mask constraints enclose no volume")
    return vol


def _project_inside(verts: np.ndarray, normals: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    for _ in range(3):
        viol = verts @ normals.T - offsets
        if viol.max() <= 0:
            break
        viol = np.clip(viol, 0.0, None)
        verts = verts - viol @ normals
    return verts


def sample_surface(volume: ReflectionVolume, count: int = 400_000, seed: int | np.random.Generator = 0) -> np.ndarray:
    """Points drawn uniformly (by area) on the triangulated boundary."""
    rng = np.random.default_rng(seed)
    areas = volume.face_areas()
    face = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    tri = volume.vertices[volume.faces[face]]
    pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
    return pts


def ray_volume_hits(volume: ReflectionVolume, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Boolean: does the forward ray ``origin + t d`` (t >= 0) meet the polyhedron?"""
    dirs = np.asarray(dirs, dtype=np.float64)
    flat = dirs.reshape(-1, 3)
    denom = flat @ volume.normals.T  # (P, K)
    num = volume.offsets - volume.normals @ origin  # (K,)
    t_enter = np.zeros(len(flat))
    t_exit = np.full(len(flat), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    entering = denom < 0
    exiting = denom > 0
    parallel_out = (denom == 0) & (num < 0)
    t_enter = np.maximum(t_enter, np.where(entering, t, -np.inf).max(axis=1))
    t_exit = np.minimum(t_exit, np.where(exiting, t, np.inf).min(axis=1))
    hit = (t_enter <= t_exit) & ~parallel_out.any(axis=1)
    return hit.reshape(dirs.shape[:-1])


def rasterize_volume_mask(volume: ReflectionVolume, camera: Camera) -> MaskImage:
    """Pixel set iff the pixel-center ray intersects the polyhedron."""
    return MaskImage(ray_volume_hits(volume, camera.position, pixel_rays(camera)))


def mask_polyline(mask: MaskImage, epsilon: float = 2.0) -> np.ndarray:
    pts = mask.boundary_points()
    if len(pts) == 0:
        raise InvalidMaskError("mask has no set pixels")
    return simplify_polyline(convex_hull_2d(pts), epsilon)


def build_reflection_volume(
    masks: Sequence[MaskImage],
    cameras: Sequence[Camera],
    clip: Aabb,
    epsilon: float = 2.0,
) -> ReflectionVolume:
    """Full mask -> polyhedron pipeline (Douglas-Peucker tolerance in pixels)."""
    if len(masks) != len(cameras):
        raise ValueError("one camera per mask required")
    hs: list[Halfspace] = []
    for mask, cam in zip(masks, cameras):
        hs += lift_mask_to_halfspaces(cam, mask_polyline(mask, epsilon))
    return intersect_halfspaces(hs, clip)


def volume_from_mesh(vertices: np.ndarray, faces: np.ndarray, tol: float = 1e-9) -> ReflectionVolume:
    """Rebuild the supporting planes of a closed convex triangle mesh (outward faces)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    tri = vertices[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    d = np.einsum("ij,ij->i", n, tri[:, 0])
    normals: list[np.ndarray] = []
    offsets: list[float] = []
    for ni, di in zip(n, d):
        if not any(np.abs(ni - nj).max() <= tol and abs(di - dj) <= tol * max(1.0, abs(di)) for nj, dj in zip(normals, offsets)):
            normals.append(ni)
            offsets.append(float(di))
    return ReflectionVolume(np.array(normals), np.array(offsets), vertices, faces)


def save_volume(path, volume: ReflectionVolume) -> None:
    write_ply_mesh(path, volume.vertices, volume.faces)


def load_volume(path) -> ReflectionVolume:
    return volume_from_mesh(*read_ply_mesh(path))

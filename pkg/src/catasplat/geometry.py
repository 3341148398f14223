"""Pinhole cameras, rays, mirror reflection and coordinate normalization.

Conventions used across the package:

* right-handed world coordinates, ``+z`` is "up" for generated orbits;
* view space: camera at the origin looking down ``+z``, ``+x`` right, ``+y`` down;
* pixel coordinates have their origin at the top-left image corner and pixel
  ``(row i, col j)`` has its center at ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPS_DEPTH = 1e-6


class NotVisibleError(ValueError):
    """Raised when a point lies behind (or on) the camera plane."""


@dataclass(frozen=True)
class Camera:
    position: np.ndarray
    rotation: np.ndarray  # world -> view
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", rot)
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9:
            raise ValueError("camera rotation is not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_view(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.position) @ self.rotation.T

    def scaled(self, factor: float) -> "Camera":
        """Same pose, intrinsics rescaled for an image resized by ``factor``."""
        return replace(
            self,
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
        )

    def crop(self, x0: int, y0: int, width: int, height: int) -> "Camera":
        """Camera whose image is the ``width x height`` window starting at pixel (x0, y0)."""
        return replace(self, cx=self.cx - x0, cy=self.cy - y0, width=width, height=height)

    def translated(self, offset: Sequence[float]) -> "Camera":
        return replace(self, position=self.position + np.asarray(offset, dtype=np.float64))

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "rotation": self.rotation.reshape(-1).tolist(),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            position=np.asarray(d["position"], dtype=np.float64),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must have unit norm")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError("Aabb min must be <= max componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def from_points(cls, pts: np.ndarray) -> "Aabb":
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    def dilated(self, fraction: float) -> "Aabb":
        """Grow every axis by ``fraction`` of its extent (split evenly on both sides)."""
        pad = 0.5 * fraction * self.extent
        return Aabb(self.min - pad, self.max + pad)

    def contains(self, pts: np.ndarray, tol: float = 0.0) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return np.all((pts >= self.min - tol) & (pts <= self.max + tol), axis=-1)


def look_at(
    position: Sequence[float],
    target: Sequence[float],
    up: Sequence[float] = (0.0, 0.0, 1.0),
    *,
    width: int,
    height: int,
    fov_deg: float = 50.0,
) -> Camera:
    """Camera at ``position`` looking at ``target`` with image-up aligned to ``up``."""
    pos = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Camera(pos, rot, f, f, width / 2, height / 2, width, height)


def ring_orbit(
    center: Sequence[float],
    radius: float,
    height: float,
    n: int,
    *,
    width: int,
    height_px: int,
    fov_deg: float = 50.0,
    phase: float = 0.0,
    target: Sequence[float] | None = None,
) -> list[Camera]:
    """``n`` cameras evenly spaced on a horizontal circle, all looking at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    target = center if target is None else np.asarray(target, dtype=np.float64)
    cams = []
    for k in range(n):
        a = phase + 2 * np.pi * k / n
        pos = center + np.array([radius * np.cos(a), radius * np.sin(a), height])
        cams.append(look_at(pos, target, width=width, height=height_px, fov_deg=fov_deg))
    return cams


def project(camera: Camera, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates and view depth of world point(s) ``p``.

    Points with depth ``<= EPS_DEPTH`` are not visible; their pixel entries
    are NaN and callers are expected to cull on ``depth``.
    """
    q = camera.to_view(p)
    z = q[..., 2]
    ok = z > EPS_DEPTH
    zs = np.where(ok, z, np.nan)
    u = camera.fx * q[..., 0] / zs + camera.cx
    v = camera.fy * q[..., 1] / zs + camera.cy
    return np.stack([u, v], axis=-1), z


def unproject(camera: Camera, pixel: np.ndarray, depth: np.ndarray) -> np.ndarray:
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (pixel[..., 0] - camera.cx) / camera.fx * depth
    y = (pixel[..., 1] - camera.cy) / camera.fy * depth
    q = np.stack([x, y, depth], axis=-1)
    return q @ camera.rotation + camera.position


def view_jacobian(camera: Camera, q: np.ndarray) -> np.ndarray:
    """d(pixel)/d(view point) for view-space point(s) ``q``; shape (..., 2, 3)."""
    q = np.asarray(q, dtype=np.float64)
    x, y, z = q[..., 0], q[..., 1], q[..., 2]
    jac = np.zeros(q.shape[:-1] + (2, 3))
    jac[..., 0, 0] = camera.fx / z
    jac[..., 0, 2] = -camera.fx * x / z**2
    jac[..., 1, 1] = camera.fy / z
    jac[..., 1, 2] = -camera.fy * y / z**2
    return jac


def projection_jacobian(camera: Camera, p: np.ndarray) -> np.ndarray:
    """d(pixel)/d(world point), shape (2, 3) for a single point."""
    q = camera.to_view(p)
    if np.any(q[..., 2] <= EPS_DEPTH):
        raise NotVisibleError("point is behind the camera")
    return view_jacobian(camera, q) @ camera.rotation


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(H, W, 2) array of pixel-center coordinates ``(x, y)``."""
    xs = np.arange(width) + 0.5
    ys = np.arange(height) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def pixel_rays(camera: Camera, pixels: np.ndarray | None = None) -> np.ndarray:
    """Unit world-space ray directions through ``pixels`` (default: every pixel center)."""
    if pixels is None:
        pixels = pixel_centers(camera.width, camera.height)
    pixels = np.asarray(pixels, dtype=np.float64)
    d = np.stack(
        [
            (pixels[..., 0] - camera.cx) / camera.fx,
            (pixels[..., 1] - camera.cy) / camera.fy,
            np.ones(pixels.shape[:-1]),
        ],
        axis=-1,
    )
    d = d @ camera.rotation
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def reflect_direction(d: np.ndarray, n: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return d - 2.0 * np.sum(d * n, axis=-1, keepdims=True) * n


def reflect_ray(incident: Ray, hit: Sequence[float], normal: Sequence[float]) -> Ray:
    n = np.asarray(normal, dtype=np.float64)
    d = reflect_direction(incident.direction, n)
    return Ray(np.asarray(hit, dtype=np.float64), d / np.linalg.norm(d))


def normalize_to_unit_cube(p: np.ndarray, box: Aabb) -> np.ndarray:
    """Affine map of ``box`` onto ``[-1, 1]^3`` (componentwise)."""
    ext = box.extent
    if np.any(ext < 1e-12):
        raise ValueError("degenerate normalization box")
    return 2.0 * (np.asarray(p, dtype=np.float64) - box.center) / ext


def denormalize_from_unit_cube(u: np.ndarray, box: Aabb) -> np.ndarray:
    return np.asarray(u, dtype=np.float64) * (0.5 * box.extent) + box.center


def mirror_matrix(normal: Sequence[float]) -> np.ndarray:
    """Householder reflection ``I - 2 n n^T`` for a unit plane normal."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    return np.eye(3) - 2.0 * np.outer(n, n)


def mirrored_camera(camera: Camera, plane_point: Sequence[float], plane_normal: Sequence[float]) -> Camera:
    """Virtual camera seen through a planar mirror.

    The returned rotation is improper (det = -1); projection formulas are
    unaffected, so rendering from it reproduces the mirror image.
    """
    h = mirror_matrix(plane_normal)
    q = np.asarray(plane_point, dtype=np.float64)
    pos = h @ (camera.position - q) + q
    return replace(camera, position=pos, rotation=camera.rotation @ h)


def save_cameras(path: str | Path, cameras: Iterable[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1))


def load_cameras(path: str | Path) -> list[Camera]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and "cameras" in data:
        data = data["cameras"]
    return [Camera.from_dict(d) for d in data]

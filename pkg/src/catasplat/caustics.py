"""Analytic reflection geometry: planar virtual points, catacaustic envelopes
and the virtual image of a point seen in a curved mirror.

Curved reflectors are handled in 2D.  A sphere is reduced to the great circle
that contains the source and the observer, which is exact because every normal
of that circle lies in its plane, so reflected rays never leave it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PARALLEL_TOL = 1e-14
SPECULAR_TOL = 1e-12


class NotVisibleError(ValueError):
    """No specular point exists for the requested source and observer."""


@dataclass(frozen=True)
class Circle:
    center: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(2))
        if not self.radius > 0:
            raise ValueError("radius must be positive")

    def point(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.center + self.radius * np.stack([np.cos(t), np.sin(t)], axis=-1)

    def normal(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.stack([np.cos(t), np.sin(t)], axis=-1)


@dataclass(frozen=True)
class Line:
    """A flat 2D mirror ``point + t * direction``."""

    point0: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        d = np.asarray(self.direction, dtype=np.float64).reshape(2)
        object.__setattr__(self, "point0", np.asarray(self.point0, dtype=np.float64).reshape(2))
        object.__setattr__(self, "direction", d / np.linalg.norm(d))

    def point(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.point0 + t[..., None] * self.direction

    def normal(self, t):
        n = np.array([-self.direction[1], self.direction[0]])
        return np.broadcast_to(n, np.shape(t) + (2,))


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if not self.radius > 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class Plane:
    """Interior side is ``normal . (x - point) < 0``."""

    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self) -> None:
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64).reshape(3))
        object.__setattr__(self, "normal", n / np.linalg.norm(n))


@dataclass
class CatacausticSample:
    source: np.ndarray
    param: float
    point: np.ndarray
    residual: float
    valid: bool


def planar_virtual_point(plane: Plane, p) -> np.ndarray:
    """Mirror image of ``p`` in ``plane``; the same for every observer."""
    p = np.asarray(p, dtype=np.float64)
    dist = (p - plane.point) @ plane.normal
    if np.any(np.abs(dist) == 0):
        raise ValueError("point lies on the mirror plane")
    return p - 2.0 * np.asarray(dist)[..., None] * plane.normal


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def reflected_ray(reflector, source, t, at_infinity: bool = False):
    """Origin and unit direction of the ray leaving the mirror at parameter ``t``.

    ``source`` is a point, or the propagation direction when ``at_infinity``.
    """
    r = reflector.point(t)
    n = reflector.normal(t)
    if at_infinity:
        d = np.broadcast_to(np.asarray(source, dtype=np.float64), r.shape)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    else:
        d = r - np.asarray(source, dtype=np.float64)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    out = d - 2.0 * np.sum(d * n, axis=-1, keepdims=True) * n
    return r, out


def _intersect_lines(o1, d1, o2, d2):
    det = _cross2(d1, d2)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = _cross2(o2 - o1, d2) / det
        return o1 + s[..., None] * d1, det


def _line_distance(x, o, d):
    return np.abs(_cross2(x - o, d))


def _section_basis(center, a, b=None):
    """Orthonormal basis of a plane through ``center`` containing ``a`` (and ``b``)."""
    e1 = np.asarray(a, dtype=np.float64) - center
    e1 /= np.linalg.norm(e1)
    if b is not None:
        e2 = np.asarray(b, dtype=np.float64) - center
        e2 = e2 - (e2 @ e1) * e1
        if np.linalg.norm(e2) > 1e-12 * np.linalg.norm(b - center):
            return e1, e2 / np.linalg.norm(e2)
    helper = np.eye(3)[np.argmin(np.abs(e1))]
    e2 = helper - (helper @ e1) * e1
    return e1, e2 / np.linalg.norm(e2)


def _to_2d(reflector, source, at_infinity, section):
    """Reduce a sphere to a great-circle problem; returns (circle, source2d, lift)."""
    if isinstance(reflector, (Circle, Line)):
        return reflector, np.asarray(source, dtype=np.float64), None
    if not isinstance(reflector, Sphere):
        raise TypeError(f"unsupported reflector {type(reflector).__name__}")
    c = reflector.center
    src = np.asarray(source, dtype=np.float64)
    if section is None:
        e1, e2 = _section_basis(c, c + src if at_infinity else src)
    else:
        e1, e2 = section
    basis = np.stack([e1, e2])
    rel = src if at_infinity else src - c
    if abs(rel @ np.cross(e1, e2)) > 1e-9 * max(1.0, np.linalg.norm(rel)):
        raise ValueError("section plane does not contain the source")
    circle = Circle(np.zeros(2), reflector.radius)
    return circle, basis @ rel, lambda x: c + x @ basis


def envelope_points(
    reflector,
    source,
    params,
    delta: float = 1e-5,
    at_infinity: bool = False,
    section=None,
) -> list[CatacausticSample]:
    """Caustic points at ``params`` as intersections of the rays at ``t - delta/2`` and ``t + delta/2``.

    Rays that are parallel (caustic at infinity) give an invalid sample with a
    NaN point.  For a sphere, ``section`` optionally fixes the great-circle
    basis ``(e1, e2)``; the parameter is the angle in that basis.
    """
    refl2, src2, lift = _to_2d(reflector, source, at_infinity, section)
    t = np.atleast_1d(np.asarray(params, dtype=np.float64))
    if t.size < 3 and np.ndim(params) > 0:
        raise ValueError("need at least 3 parameter samples")
    o1, d1 = reflected_ray(refl2, src2, t - delta / 2, at_infinity)
    o2, d2 = reflected_ray(refl2, src2, t + delta / 2, at_infinity)
    pts, det = _intersect_lines(o1, d1, o2, d2)
    with np.errstate(invalid="ignore"):
        res = np.maximum(_line_distance(pts, o1, d1), _line_distance(pts, o2, d2))
    out = []
    for k in range(t.size):
        ok = abs(det[k]) > PARALLEL_TOL and np.all(np.isfinite(pts[k]))
        p = pts[k] if ok else np.full(2, np.nan)
        if lift is not None:
            p = lift(p)
        out.append(CatacausticSample(np.asarray(source, dtype=np.float64), float(t[k]), p, float(res[k]) if ok else np.inf, bool(ok)))
    return out


def specular_residual(circle: Circle, source, observer, t: float) -> float:
    """|angle of incidence - angle of reflection| at ``t`` (radians)."""
    r = circle.point(t)
    n = circle.normal(t)
    a = np.arctan2(abs(_cross2(n, source - r)), n @ (source - r))
    b = np.arctan2(abs(_cross2(n, observer - r)), n @ (observer - r))
    return float(abs(a - b))


def specular_param(circle: Circle, source, observer, tol: float = SPECULAR_TOL) -> float:
    """Angle of the mirror point that reflects ``source`` toward ``observer`` (convex side).

    Bracketed bisection between the directions of source and observer seen
    from the center, where the bisector condition changes sign.
    """
    source = np.asarray(source, dtype=np.float64)
    observer = np.asarray(observer, dtype=np.float64)
    rs = np.linalg.norm(source - circle.center)
    ro = np.linalg.norm(observer - circle.center)
    if rs <= circle.radius or ro <= circle.radius:
        raise NotVisibleError("source and observer must lie outside the reflector")
    ta = np.arctan2(*(source - circle.center)[::-1])
    tb = np.arctan2(*(observer - circle.center)[::-1])
    span = np.angle(np.exp(1j * (tb - ta)))
    if abs(abs(span) - np.pi) < 1e-12:
        raise NotVisibleError("source and observer are diametrically opposed")

    def g(t):
        r = circle.point(t)
        n = circle.normal(t)
        us = (source - r) / np.linalg.norm(source - r)
        uo = (observer - r) / np.linalg.norm(observer - r)
        return _cross2(n, us + uo)

    lo, hi = ta, ta + span
    glo = g(lo)
    if span == 0:
        return float(ta)
    while abs(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if gm == 0:
            return float(mid)
        if np.sign(gm) == np.sign(glo):
            lo, glo = mid, gm
        else:
            hi = mid
    t = 0.5 * (lo + hi)
    r = circle.point(t)
    n = circle.normal(t)
    if n @ (source - r) <= 0 or n @ (observer - r) <= 0:
        raise NotVisibleError("specular point is not lit or not seen")
    return float(t)


def specular_point(reflector, source, observer) -> np.ndarray:
    """Mirror point reflecting ``source`` toward ``observer``."""
    source = np.asarray(source, dtype=np.float64)
    observer = np.asarray(observer, dtype=np.float64)
    if isinstance(reflector, Plane):
        v = planar_virtual_point(reflector, source)
        d = v - observer
        denom = d @ reflector.normal
        if denom == 0:
            raise NotVisibleError("line of sight parallel to mirror")
        s = ((reflector.point - observer) @ reflector.normal) / denom
        if not 0 < s < 1:
            raise NotVisibleError("source and observer on opposite sides of the mirror")
        return observer + s * d
    if isinstance(reflector, Circle):
        return reflector.point(specular_param(reflector, source, observer))
    c = reflector.center
    e1, e2 = _section_basis(c, source, observer)
    basis = np.stack([e1, e2])
    circle = Circle(np.zeros(2), reflector.radius)
    t = specular_param(circle, basis @ (source - c), basis @ (observer - c))
    return c + circle.point(t) @ basis


def virtual_point_on_catacaustic(reflector, source, observer, delta: float = 1e-5) -> np.ndarray:
    """Virtual image of ``source`` seen from ``observer``: the caustic point at the specular parameter."""
    source = np.asarray(source, dtype=np.float64)
    observer = np.asarray(observer, dtype=np.float64)
    if isinstance(reflector, Plane):
        specular_point(reflector, source, observer)
        return planar_virtual_point(reflector, source)
    if isinstance(reflector, Circle):
        t = specular_param(reflector, source, observer)
        return _single(envelope_points(reflector, source, t, delta))
    c = reflector.center
    section = _section_basis(c, source, observer)
    basis = np.stack(section)
    circle = Circle(np.zeros(2), reflector.radius)
    t = specular_param(circle, basis @ (source - c), basis @ (observer - c))
    return _single(envelope_points(reflector, source, t, delta, section=section))


def _single(samples: list[CatacausticSample]) -> np.ndarray:
    s = samples[0]
    if not s.valid:
        raise NotVisibleError("virtual point at infinity")
    return s.point

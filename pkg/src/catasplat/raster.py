"""Differentiable EWA point splatting.

Each point is an oriented disk projected to a screen-space Gaussian with
covariance ``Sigma = f * J (I - m m^T) J^T + nu * I`` where ``J`` is the
view-space projection Jacobian, ``m`` the view-space disk normal and ``f``
the squared disk radius. ``J (I - m m^T) J^T`` equals ``J_t J_t^T`` for the
2x2 Jacobian ``J_t`` of the tangent-plane -> screen map in any orthonormal
tangent frame, so no explicit frame is needed and the map stays smooth in
the normal.

Splats are composited front to back per pixel; the backward pass walks
each pixel's contributor list once back to front, giving exact gradients
for every contributor in linear time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import EPS_DEPTH, Camera, pixel_rays

NU = 0.3
# splats centred further than this outside the raster window are dropped; they can only reach
# the window with a radius above it, which happens for grazing points next to the camera plane
GUARD_PIXELS = 128.0
ALPHA_MAX = 0.999


@dataclass
class SplatPoint:
    """One oriented disk. ``normal=None`` means camera-facing (reflection points)."""

    position: np.ndarray
    footprint: float
    opacity: float
    features: np.ndarray
    normal: np.ndarray | None = None
    rho: float | None = None


@dataclass
class SplatCloud:
    """Struct-of-arrays view of a point cloud with activated (constrained) attributes."""

    positions: np.ndarray  # (N, 3)
    footprints: np.ndarray  # (N,) squared disk radius, >= 0
    opacities: np.ndarray  # (N,) in [0, 1]
    features: np.ndarray  # (N, C)
    normals: np.ndarray | None = None  # (N, 3) or None for camera-facing disks
    rho: np.ndarray | None = None  # (N,)

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def from_points(cls, points: list[SplatPoint]) -> "SplatCloud":
        has_normals = points and points[0].normal is not None
        has_rho = points and points[0].rho is not None
        return cls(
            positions=np.array([p.position for p in points], dtype=np.float64).reshape(-1, 3),
            footprints=np.array([p.footprint for p in points], dtype=np.float64),
            opacities=np.array([p.opacity for p in points], dtype=np.float64),
            features=np.array([p.features for p in points], dtype=np.float64).reshape(len(points), -1),
            normals=np.array([p.normal for p in points], dtype=np.float64) if has_normals else None,
            rho=np.array([p.rho for p in points], dtype=np.float64) if has_rho else None,
        )


@dataclass
class Splat2D:
    center: np.ndarray
    covariance: np.ndarray
    depth: float
    index: int


@dataclass
class ProjectionCache:
    q: np.ndarray
    jv: np.ndarray
    m: np.ndarray
    a: np.ndarray  # J M J^T before footprint scaling
    footprints: np.ndarray
    rotation: np.ndarray
    fx: float
    fy: float
    nhat: np.ndarray | None
    nnorm: np.ndarray | None


def project_splats(
    positions: np.ndarray,
    normals: np.ndarray | None,
    footprints: np.ndarray,
    camera: Camera,
    nu: float = NU,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, ProjectionCache]:
    """Screen-space means, covariances and depths of a batch of disks.

    Returns ``(mu (N,2), cov (N,2,2), depth (N,), visible (N,), cache)``.
    Invisible points get placeholder values and must be culled by the caller.
    """
    positions = np.asarray(positions, dtype=np.float64)
    q = (positions - camera.position) @ camera.rotation.T
    depth = q[:, 2].copy()
    visible = depth > EPS_DEPTH
    q = np.where(visible[:, None], q, np.array([0.0, 0.0, 1.0]))
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    n = len(q)
    jv = np.zeros((n, 2, 3))
    jv[:, 0, 0] = camera.fx / z
    jv[:, 0, 2] = -camera.fx * x / z**2
    jv[:, 1, 1] = camera.fy / z
    jv[:, 1, 2] = -camera.fy * y / z**2
    if normals is None:
        m = -q / np.linalg.norm(q, axis=1, keepdims=True)
        nhat = nnorm = None
    else:
        normals = np.asarray(normals, dtype=np.float64)
        nnorm = np.linalg.norm(normals, axis=1)
        nhat = normals / nnorm[:, None]
        m = nhat @ camera.rotation.T
    jm = jv - np.einsum("nij,nj,nk->nik", jv, m, m)
    a = np.einsum("nik,njk->nij", jm, jv)
    cov = footprints[:, None, None] * a + nu * np.eye(2)
    mu = np.stack([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy], axis=1)
    cache = ProjectionCache(q, jv, m, a, np.asarray(footprints, dtype=np.float64), camera.rotation, camera.fx, camera.fy, nhat, nnorm)
    return mu, cov, depth, visible, cache


def project_splats_backward(
    cache: ProjectionCache, g_mu: np.ndarray, g_cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Pull back gradients on (mu, cov) to (positions, normals, footprints)."""
    q, jv, m, f = cache.q, cache.jv, cache.m, cache.footprints
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    fx, fy = cache.fx, cache.fy
    g_cov = 0.5 * (g_cov + np.swapaxes(g_cov, 1, 2))

    g_f = np.einsum("nij,nij->n", g_cov, cache.a)
    # Sigma = f J M J^T: dJ = 2 f G J M, dM = f J^T G J
    jm = jv - np.einsum("nij,nj,nk->nik", jv, m, m)
    g_jv = 2.0 * f[:, None, None] * np.einsum("nij,njk->nik", g_cov, jm)
    g_mmat = f[:, None, None] * np.einsum("nji,njk,nkl->nil", jv, g_cov, jv)
    g_m = -2.0 * np.einsum("nij,nj->ni", g_mmat, m)

    g_q = np.zeros_like(q)
    g_q[:, 0] = g_mu[:, 0] * fx / z - g_jv[:, 0, 2] * fx / z**2
    g_q[:, 1] = g_mu[:, 1] * fy / z - g_jv[:, 1, 2] * fy / z**2
    g_q[:, 2] = (
        -g_mu[:, 0] * fx * x / z**2
        - g_mu[:, 1] * fy * y / z**2
        - g_jv[:, 0, 0] * fx / z**2
        + g_jv[:, 0, 2] * 2 * fx * x / z**3
        - g_jv[:, 1, 1] * fy / z**2
        + g_jv[:, 1, 2] * 2 * fy * y / z**3
    )
    if cache.nhat is None:
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        g_q -= (g_m - m * np.sum(m * g_m, axis=1, keepdims=True)) / qn
        g_normals = None
    else:
        g_nhat = g_m @ cache.rotation
        nh = cache.nhat
        g_normals = (g_nhat - nh * np.sum(nh * g_nhat, axis=1, keepdims=True)) / cache.nnorm[:, None]
    g_pos = g_q @ cache.rotation
    return g_pos, g_normals, g_f


def _precull(positions: np.ndarray, footprints: np.ndarray, camera: Camera, nu: float) -> np.ndarray:
    """Indices of points that may touch the image, from a cheap bound on the splat radius.

    The bound uses ``||J||_F^2 >= ||J||_2^2`` so no visible splat is dropped,
    apart from the guard-band cut on the projected center.
    """
    q = (positions - camera.position) @ camera.rotation.T
    z = q[:, 2]
    front = z > EPS_DEPTH
    zs = np.where(front, z, 1.0)
    x, y = q[:, 0] / zs, q[:, 1] / zs
    frob = (camera.fx**2 * (1 + x * x) + camera.fy**2 * (1 + y * y)) / zs**2
    r = 3.0 * np.sqrt(footprints * frob + nu)
    u = camera.fx * x + camera.cx
    v = camera.fy * y + camera.cy
    ok = front & (u + r > 0) & (u - r < camera.width) & (v + r > 0) & (v - r < camera.height)
    g = GUARD_PIXELS
    ok &= (u > -g) & (u < camera.width + g) & (v > -g) & (v < camera.height + g)
    return np.flatnonzero(ok)


def _subset_cache(pc: ProjectionCache, sel: np.ndarray) -> ProjectionCache:
    return ProjectionCache(
        pc.q[sel],
        pc.jv[sel],
        pc.m[sel],
        pc.a[sel],
        pc.footprints[sel],
        pc.rotation,
        pc.fx,
        pc.fy,
        None if pc.nhat is None else pc.nhat[sel],
        None if pc.nnorm is None else pc.nnorm[sel],
    )


def splat_covariance(point: SplatPoint, camera: Camera, nu: float = NU) -> Splat2D:
    mu, cov, depth, visible, _ = project_splats(
        np.asarray(point.position, dtype=np.float64)[None],
        None if point.normal is None else np.asarray(point.normal, dtype=np.float64)[None],
        np.array([point.footprint], dtype=np.float64),
        camera,
        nu,
    )
    if not visible[0]:
        from .geometry import NotVisibleError

        raise NotVisibleError("splat is behind the camera")
    return Splat2D(mu[0], cov[0], float(depth[0]), 0)


def _invert_2x2(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    return conic, det


@dataclass
class RasterOutput:
    features: np.ndarray  # (H, W, C)
    obar: np.ndarray  # (H, W)
    rho: np.ndarray | None  # (H, W) or None
    # backward state
    camera: Camera
    index: np.ndarray = field(repr=False)  # visible splat indices (into the cloud)
    offsets: np.ndarray = field(repr=False)
    spl: np.ndarray = field(repr=False)  # contributor -> local visible index
    pix: np.ndarray = field(repr=False)
    gauss: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    clamped: np.ndarray = field(repr=False)
    trans: np.ndarray = field(repr=False)
    colors: np.ndarray = field(repr=False)  # composited per-splat channels (features [+ rho])
    mu: np.ndarray = field(repr=False)  # per visible splat (aligned with index)
    conic: np.ndarray = field(repr=False)
    depth: np.ndarray = field(repr=False)
    proj_cache: ProjectionCache = field(repr=False)
    n_points: int = 0

    def contributors(self, row: int, col: int) -> np.ndarray:
        """Cloud indices of the contributors of one pixel, front to back."""
        p = row * self.camera.width + col
        return self.index[self.spl[self.offsets[p] : self.offsets[p + 1]]]


@dataclass
class RasterGradients:
    positions: np.ndarray
    normals: np.ndarray | None
    footprints: np.ndarray
    opacities: np.ndarray
    features: np.ndarray
    rho: np.ndarray | None
    means2d: np.ndarray  # view-space positional gradient, (N, 2)


def rasterize(
    cloud: SplatCloud,
    camera: Camera,
    with_rho: bool = False,
    nu: float = NU,
    alpha_max: float = ALPHA_MAX,
) -> RasterOutput:
    """Composite a point cloud into feature, rho and accumulated-opacity images.

    Per pixel, contributors are the splats whose Gaussian at the pixel center
    is within 3 sigma, ordered by view depth (ties by point index).
    """
    h, w = camera.height, camera.width
    n_ch = cloud.features.shape[1]
    n_out = n_ch + (1 if with_rho else 0)
    if with_rho and cloud.rho is None:
        raise ValueError("with_rho requires per-point rho")

    if len(cloud) > 0:
        cand = _precull(cloud.positions, cloud.footprints, camera, nu)
        normals = None if cloud.normals is None else cloud.normals[cand]
        mu, cov, depth, visible, pcache = project_splats(
            cloud.positions[cand], normals, cloud.footprints[cand], camera, nu
        )
        conic, _ = _invert_2x2(cov)
        lam_max = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1]) + np.sqrt(
            0.25 * (cov[:, 0, 0] - cov[:, 1, 1]) ** 2 + cov[:, 0, 1] ** 2
        )
        radius = 3.0 * np.sqrt(lam_max)
        on_screen = (
            (mu[:, 0] + radius > 0) & (mu[:, 0] - radius < w) & (mu[:, 1] + radius > 0) & (mu[:, 1] - radius < h)
        )
        sel = np.flatnonzero(visible & on_screen)
        index = cand[sel]
        mu, conic, radius, depth = mu[sel], conic[sel], radius[sel], depth[sel]
        pcache = _subset_cache(pcache, sel)
    else:
        index = np.zeros(0, dtype=np.int64)
        mu = np.zeros((0, 2))
        conic = np.zeros((0, 3))
        radius = np.zeros(0)
        depth = np.zeros(0)
        pcache = None

    # front-to-back per pixel, ties broken by point index
    visit = np.lexsort((index, depth)).astype(np.int64)
    pix, spl, gauss, offsets = _kernels.gather_contributors(
        np.ascontiguousarray(mu), np.ascontiguousarray(conic), radius, visit, w, h
    )

    raw_alpha = cloud.opacities[index][spl] * gauss if len(spl) else np.zeros(0)
    clamped = raw_alpha > alpha_max
    alpha = np.minimum(raw_alpha, alpha_max)
    colors = cloud.features[index]
    if with_rho:
        colors = np.concatenate([colors, cloud.rho[index][:, None]], axis=1)
    colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(len(index), n_out)
    out = np.zeros((h * w, n_out))
    obar = np.zeros(h * w)
    trans = np.zeros(len(spl))
    _kernels.composite_forward(offsets, spl, alpha, colors, out, obar, trans)

    out = out.reshape(h, w, n_out)
    return RasterOutput(
        features=out[..., :n_ch],
        obar=obar.reshape(h, w),
        rho=out[..., n_ch] if with_rho else None,
        camera=camera,
        index=index,
        offsets=offsets,
        spl=spl,
        pix=pix,
        gauss=gauss,
        alpha=alpha,
        clamped=clamped,
        trans=trans,
        colors=colors,
        mu=mu,
        conic=conic,
        depth=depth,
        proj_cache=pcache,
        n_points=len(cloud),
    )


def rasterize_backward(
    out: RasterOutput,
    cloud: SplatCloud,
    g_features: np.ndarray,
    g_obar: np.ndarray | None = None,
    g_rho: np.ndarray | None = None,
) -> RasterGradients:
    """Exact gradients of a :func:`rasterize` call w.r.t. every point attribute."""
    h, w = out.camera.height, out.camera.width
    n = out.n_points
    n_ch = out.features.shape[2]
    n_vis = len(out.index)
    g_img = np.zeros((h * w, out.colors.shape[1]))
    g_img[:, :n_ch] = np.asarray(g_features).reshape(h * w, n_ch)
    if out.rho is not None and g_rho is not None:
        g_img[:, n_ch] = np.asarray(g_rho).reshape(-1)
    g_ob = np.zeros(h * w) if g_obar is None else np.ascontiguousarray(g_obar, dtype=np.float64).reshape(-1)

    g_colors = np.zeros((n_vis, out.colors.shape[1]))
    g_alpha = np.zeros(len(out.spl))
    _kernels.composite_backward(out.offsets, out.spl, out.alpha, out.trans, out.colors, g_img, g_ob, g_colors, g_alpha)

    # alpha = o * G (zero gradient where clamped), G = exp(-1/2 d^T Q d), d = pixel_center - mu
    mu = out.mu
    conic = out.conic
    o_vis = cloud.opacities[out.index]
    g_o_vis = np.zeros(n_vis)
    g_mu = np.zeros((n_vis, 2))
    g_q = np.zeros((n_vis, 3))
    _kernels.gaussian_backward(
        out.pix, out.spl, w, g_alpha, out.clamped, out.gauss, o_vis,
        np.ascontiguousarray(mu), np.ascontiguousarray(conic), g_o_vis, g_mu, g_q,
    )
    g_qa, g_qb, g_qc = g_q[:, 0], g_q[:, 1], g_q[:, 2]
    # dL/dSigma = -Q (dL/dQ) Q with Q symmetric (off-diagonal gradient split evenly)
    qm = np.zeros((n_vis, 2, 2))
    qm[:, 0, 0], qm[:, 0, 1], qm[:, 1, 0], qm[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]
    gq = np.zeros((n_vis, 2, 2))
    gq[:, 0, 0], gq[:, 1, 1] = g_qa, g_qc
    gq[:, 0, 1] = gq[:, 1, 0] = 0.5 * g_qb
    g_cov = -np.einsum("nij,njk,nkl->nil", qm, gq, qm)

    grads = RasterGradients(
        positions=np.zeros((n, 3)),
        normals=None if cloud.normals is None else np.zeros((n, 3)),
        footprints=np.zeros(n),
        opacities=np.zeros(n),
        features=np.zeros((n, n_ch)),
        rho=None if cloud.rho is None else np.zeros(n),
        means2d=np.zeros((n, 2)),
    )
    if n_vis == 0:
        return grads
    g_pos, g_nrm, g_f = project_splats_backward(out.proj_cache, g_mu, g_cov)
    grads.positions[out.index] = g_pos
    if grads.normals is not None:
        grads.normals[out.index] = g_nrm
    grads.footprints[out.index] = g_f
    grads.opacities[out.index] = g_o_vis
    grads.features[out.index] = g_colors[:, :n_ch]
    if grads.rho is not None and out.rho is not None:
        grads.rho[out.index] = g_colors[:, n_ch]
    grads.means2d[out.index] = g_mu
    return grads


def median_depth(out: RasterOutput) -> np.ndarray:
    """Per-pixel depth of the contributor at which half the composited weight is reached (inf if empty)."""
    h, w = out.camera.height, out.camera.width
    if len(out.spl) == 0:
        return np.full((h, w), np.inf)
    return _kernels.median_depth(out.offsets, out.spl, out.alpha, out.trans, out.depth).reshape(h, w)


def composite_backward_naive(alpha: np.ndarray, colors: np.ndarray, g_out: np.ndarray, g_obar: float):
    """Quadratic-time reference: differentiate every ``T_i`` term explicitly."""
    n = len(alpha)
    g_alpha = np.zeros(n)
    g_colors = np.zeros_like(colors)
    trans = np.array([np.prod(1.0 - alpha[:i]) for i in range(n)])
    for j in range(n):
        g_colors[j] = g_out * alpha[j] * trans[j]
        d_out = colors[j] * trans[j]
        for i in range(j + 1, n):
            d_ti = -np.prod(np.delete(1.0 - alpha[:i], j))
            d_out = d_out + colors[i] * alpha[i] * d_ti
        d_obar = -np.prod(np.delete(1.0 - alpha, j))
        g_alpha[j] = float(g_out @ d_out) + g_obar * d_obar
    return g_alpha, g_colors


def composite_backward_two_pass(alpha: np.ndarray, colors: np.ndarray, g_out: np.ndarray, g_obar: float):
    return _kernels.composite_backward_pixel(
        np.ascontiguousarray(alpha, dtype=np.float64),
        np.ascontiguousarray(colors, dtype=np.float64),
        np.ascontiguousarray(g_out, dtype=np.float64),
        float(g_obar),
    )


# -- environment map --------------------------------------------------------


def _env_coords(dirs: np.ndarray, width: int, height: int):
    d = dirs.reshape(-1, 3)
    theta = np.arccos(np.clip(d[:, 2], -1.0, 1.0))
    phi = np.arctan2(d[:, 1], d[:, 0])
    u = (phi + np.pi) / (2 * np.pi) * width - 0.5
    v = theta / np.pi * height - 0.5
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = u - u0
    fv = v - v0
    u0 = u0.astype(np.int64) % width
    u1 = (u0 + 1) % width
    v0i = np.clip(v0.astype(np.int64), 0, height - 1)
    v1i = np.clip(v0.astype(np.int64) + 1, 0, height - 1)
    idx = np.stack([v0i * width + u0, v0i * width + u1, v1i * width + u0, v1i * width + u1], axis=1)
    wts = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
    return idx, wts


def envmap_lookup(texels: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Bilinear lookup in a polar (azimuth x inclination) map; ``texels`` is (H, W, C)."""
    th, tw, n_ch = texels.shape
    idx, wts = _env_coords(np.asarray(dirs, dtype=np.float64), tw, th)
    flat = texels.reshape(-1, n_ch)
    vals = np.einsum("pk,pkc->pc", wts, flat[idx])
    return vals.reshape(dirs.shape[:-1] + (n_ch,)), (idx, wts, texels.shape)


def envmap_lookup_backward(cache: tuple, g_vals: np.ndarray) -> np.ndarray:
    idx, wts, shape = cache
    th, tw, n_ch = shape
    g = g_vals.reshape(-1, n_ch)
    out = np.zeros((th * tw, n_ch))
    flat_idx = idx.reshape(-1)
    contrib = (wts[:, :, None] * g[:, None, :]).reshape(-1, n_ch)
    for ch in range(n_ch):
        out[:, ch] = np.bincount(flat_idx, weights=contrib[:, ch], minlength=th * tw)
    return out.reshape(shape)


@dataclass
class BlendCache:
    env_values: np.ndarray
    lookup: tuple
    obar: np.ndarray


def blend_environment(features: np.ndarray, obar: np.ndarray, texels: np.ndarray, camera: Camera):
    """``features + obar * env(pixel ray)``; returns (image, cache)."""
    env, lookup = envmap_lookup(texels, pixel_rays(camera))
    return features + obar[..., None] * env, BlendCache(env, lookup, obar)


def blend_environment_backward(cache: BlendCache, g_out: np.ndarray):
    """Returns (d/d features, d/d obar, d/d texels)."""
    g_obar = np.sum(g_out * cache.env_values, axis=-1)
    g_tex = envmap_lookup_backward(cache.lookup, g_out * cache.obar[..., None])
    return g_out, g_obar, g_tex

"""Full differentiable model: two point clouds, warp field, environment map and renderer.

Trainable per-point attributes are stored raw; activations map them to their
constrained ranges (``f = exp``, opacity and rho via sigmoid).  Rendering a
view runs

    primary cloud -> rasterize (features, rho, obar) -> blend environment
    reflection base points -> warp(c) -> rasterize (features, coverage)
    -> two-headed renderer -> RGB

and :meth:`Model.backward` differentiates all of it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Aabb, Camera, pixel_rays
from .neural import EnvironmentMap, NeuralRenderer, WarpField, logit, sigmoid
from .raster import (
    ALPHA_MAX,
    NU,
    RasterOutput,
    SplatCloud,
    blend_environment,
    blend_environment_backward,
    rasterize,
    rasterize_backward,
)

N_FEATURES = 6
PRIMARY_KEYS = ("prim.xyz", "prim.normal", "prim.f", "prim.o", "prim.feat", "prim.rho")
REFLECTION_KEYS = ("refl.f", "refl.o", "refl.feat")


def knn_footprints(points: np.ndarray, k: int = 3) -> np.ndarray:
    """Squared mean distance to the ``k`` nearest neighbours (initial disk size)."""
    if len(points) <= k:
        return np.full(len(points), 1e-4)
    dist, _ = cKDTree(points).query(points, k=k + 1)
    return np.maximum(dist[:, 1:].mean(axis=1), 1e-6) ** 2


@dataclass
class Render:
    rgb: np.ndarray
    rho: np.ndarray
    obar: np.ndarray  # primary accumulated opacity (transmittance)
    coverage: np.ndarray  # reflection cloud coverage, 1 - transmittance
    camera: Camera
    warp_position: np.ndarray
    reflection_positions: np.ndarray | None = None
    primary: RasterOutput | None = field(default=None, repr=False)
    reflection: RasterOutput | None = field(default=None, repr=False)
    cache: dict = field(default_factory=dict, repr=False)


class Model:
    """All trainable state plus the forward/backward rendering pipeline."""

    def __init__(
        self,
        params: dict[str, np.ndarray],
        reflection_base: np.ndarray,
        warp: WarpField,
        renderer: NeuralRenderer,
        primary_only: bool = False,
        clone_offsets: list | None = None,
        nu: float = NU,
        alpha_max: float = ALPHA_MAX,
    ):
        self.params = params
        self.reflection_base = np.asarray(reflection_base, dtype=np.float64)
        self.warp = warp
        self.renderer = renderer
        self.primary_only = primary_only
        self.clone_offsets = [np.asarray(t, dtype=np.float64) for t in (clone_offsets or [])]
        self.nu = nu
        self.alpha_max = alpha_max

    @classmethod
    def create(
        cls,
        primary_xyz: np.ndarray,
        primary_normals: np.ndarray,
        primary_colors: np.ndarray,
        reflection_base: np.ndarray,
        volume_box: Aabb,
        camera_positions: np.ndarray,
        seed: int = 0,
        warp_width: int = 256,
        warp_scale: float = 0.01,
        renderer_width: int = 32,
        renderer_layers: int = 9,
        env_size: tuple[int, int] = (256, 128),
        primary_only: bool = False,
        init_opacity: float = 0.5,
    ) -> "Model":
        rng = np.random.default_rng(seed)
        n = len(primary_xyz)
        feat = np.zeros((n, N_FEATURES))
        feat[:, :3] = primary_colors
        params = {
            "prim.xyz": np.array(primary_xyz, dtype=np.float64),
            "prim.normal": np.array(primary_normals, dtype=np.float64),
            "prim.f": np.log(knn_footprints(primary_xyz)),
            "prim.o": np.full(n, logit(np.array(init_opacity))),
            "prim.feat": feat,
            "prim.rho": np.zeros(n),
            "env": EnvironmentMap.zeros(env_size[0], env_size[1], N_FEATURES).texels,
        }
        m = 0 if primary_only else len(reflection_base)
        base = np.zeros((0, 3)) if primary_only else np.asarray(reflection_base, dtype=np.float64)
        params["refl.f"] = np.log(knn_footprints(base)) if m else np.zeros(0)
        params["refl.o"] = np.full(m, logit(np.array(init_opacity)))
        params["refl.feat"] = rng.normal(scale=0.05, size=(m, N_FEATURES))
        warp = WarpField.for_scene(volume_box, np.asarray(camera_positions), width=warp_width, scale=warp_scale, rng=rng)
        renderer = NeuralRenderer(N_FEATURES, renderer_width, renderer_layers, rng=rng)
        return cls(params, base, warp, renderer, primary_only)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        """Every trainable array by name; network weights are live references."""
        out = dict(self.params)
        if not self.primary_only:
            out.update({"warp." + k: v for k, v in self.warp.parameters().items()})
        out.update(self.renderer.parameters())
        return out

    @property
    def n_primary(self) -> int:
        return len(self.params["prim.xyz"])

    @property
    def n_reflection(self) -> int:
        return len(self.reflection_base)

    def primary_cloud(self, subset: np.ndarray | None = None) -> SplatCloud:
        p = self.params
        sel = slice(None) if subset is None else subset
        return SplatCloud(
            positions=p["prim.xyz"][sel],
            footprints=np.exp(p["prim.f"][sel]),
            opacities=sigmoid(p["prim.o"][sel]),
            features=p["prim.feat"][sel],
            normals=p["prim.normal"][sel],
            rho=sigmoid(p["prim.rho"][sel]),
        )

    def warped_reflection(self, warp_position: np.ndarray):
        """Warped positions of the reflection cloud (and any translated clones)."""
        c = np.asarray(warp_position, dtype=np.float64)
        pos, cache = self.warp.forward(self.reflection_base, c)
        parts, caches = [pos], [cache]
        for t in self.clone_offsets:
            q, qc = self.warp.forward(self.reflection_base, c - t)
            parts.append(q + t)
            caches.append(qc)
        return np.concatenate(parts), caches

    def reflection_cloud(self, positions: np.ndarray) -> SplatCloud:
        reps = 1 + len(self.clone_offsets)
        p = self.params
        return SplatCloud(
            positions=positions,
            footprints=np.tile(np.exp(p["refl.f"]), reps),
            opacities=np.tile(sigmoid(p["refl.o"]), reps),
            features=np.tile(p["refl.feat"], (reps, 1)),
        )

    # -- forward ------------------------------------------------------------

    def render(
        self,
        camera: Camera,
        warp_position: np.ndarray | None = None,
        primary_subset: np.ndarray | None = None,
    ) -> Render:
        """Render ``camera``; the warp field is fed ``warp_position`` (default: the camera center)."""
        c = camera.position if warp_position is None else np.asarray(warp_position, dtype=np.float64)
        prim = self.primary_cloud(primary_subset)
        r1 = rasterize(prim, camera, with_rho=True, nu=self.nu, alpha_max=self.alpha_max)
        feats, bcache = blend_environment(r1.features, r1.obar, self.params["env"], camera)
        h, w = camera.height, camera.width
        if self.primary_only or self.n_reflection == 0:
            refl_pos, wcaches, r2, refl = None, [], None, None
            refl_feat = np.zeros((h, w, N_FEATURES))
            coverage = np.zeros((h, w))
        else:
            refl_pos, wcaches = self.warped_reflection(c)
            refl = self.reflection_cloud(refl_pos)
            r2 = rasterize(refl, camera, nu=self.nu, alpha_max=self.alpha_max)
            refl_feat = r2.features
            coverage = 1.0 - r2.obar
        rho = np.ones((h, w)) if self.primary_only else r1.rho
        viewdirs = pixel_rays(camera)
        rgb, scache = self.renderer.forward(feats, rho, refl_feat, viewdirs)
        cache = dict(prim=prim, refl=refl, blend=bcache, shade=scache, warp=wcaches, subset=primary_subset)
        return Render(rgb, rho, r1.obar, coverage, camera, c, refl_pos, r1, r2, cache)

    # -- backward -----------------------------------------------------------

    def backward(
        self,
        r: Render,
        g_rgb: np.ndarray,
        g_rho: np.ndarray | None = None,
        g_coverage: np.ndarray | None = None,
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Gradients of a scalar loss given its partials w.r.t. the render outputs.

        Returns ``(grads by parameter name, per-primary-point view-space
        positional gradient (N, 2))``.
        """
        cache = r.cache
        g_feat, g_rho_sh, g_refl_feat, grads = self.renderer.backward(cache["shade"], g_rgb)
        g_prim_feat, g_obar, g_env = blend_environment_backward(cache["blend"], g_feat)
        grads["env"] = g_env
        if self.primary_only:
            g_rho_total = None
        else:
            g_rho_total = g_rho_sh if g_rho is None else g_rho_sh + g_rho
        prim = cache["prim"]
        rg = rasterize_backward(r.primary, prim, g_prim_feat, g_obar, g_rho_total)
        subset = cache["subset"]
        n = self.n_primary
        sel = slice(None) if subset is None else subset

        def scatter(vals, shape):
            out = np.zeros(shape)
            out[sel] = vals
            return out

        grads["prim.xyz"] = scatter(rg.positions, (n, 3))
        grads["prim.normal"] = scatter(rg.normals, (n, 3))
        grads["prim.f"] = scatter(rg.footprints * prim.footprints, n)
        grads["prim.o"] = scatter(rg.opacities * prim.opacities * (1 - prim.opacities), n)
        grads["prim.feat"] = scatter(rg.features, (n, N_FEATURES))
        if rg.rho is not None and not self.primary_only:
            grads["prim.rho"] = scatter(rg.rho * prim.rho * (1 - prim.rho), n)
        else:
            grads["prim.rho"] = np.zeros(n)
        means2d = scatter(rg.means2d, (n, 2))

        if r.reflection is not None:
            refl = cache["refl"]
            g_obar2 = None if g_coverage is None else -g_coverage
            rr = rasterize_backward(r.reflection, refl, g_refl_feat, g_obar2)
            m = self.n_reflection
            reps = 1 + len(self.clone_offsets)
            fold = lambda a: a.reshape((reps, m) + a.shape[1:]).sum(axis=0)
            grads["refl.f"] = fold(rr.footprints * refl.footprints)
            grads["refl.o"] = fold(rr.opacities * refl.opacities * (1 - refl.opacities))
            grads["refl.feat"] = fold(rr.features)
            wg = None
            for k, wc in enumerate(cache["warp"]):
                gk = self.warp.backward(wc, rr.positions[k * m : (k + 1) * m])
                wg = gk if wg is None else {name: wg[name] + gk[name] for name in wg}
            grads.update({"warp." + k: v for k, v in wg.items()})
        elif not self.primary_only:
            grads["refl.f"] = np.zeros(self.n_reflection)
            grads["refl.o"] = np.zeros(self.n_reflection)
            grads["refl.feat"] = np.zeros((self.n_reflection, N_FEATURES))
            grads.update({"warp." + k: np.zeros_like(v) for k, v in self.warp.parameters().items()})
        if self.primary_only:
            for k in REFLECTION_KEYS:
                grads[k] = np.zeros_like(self.params[k])
        return grads, means2d

    # -- editing ------------------------------------------------------------

    def append_primary(self, src: np.ndarray, positions: np.ndarray) -> None:
        """Add primary points copying all attributes of ``src`` rows, at ``positions``."""
        for k in PRIMARY_KEYS:
            new = self.params[k][src].copy()
            if k == "prim.xyz":
                new = positions
            self.params[k] = np.concatenate([self.params[k], new])

import numpy as np
import pytest

from catasplat.geometry import Aabb, Camera, look_at, pixel_rays, project
from catasplat.volume import (
    EmptyVolumeError,
    Halfspace,
    InvalidMaskError,
    MaskImage,
    build_reflection_volume,
    convex_hull_2d,
    intersect_halfspaces,
    lift_mask_to_halfspaces,
    mask_polyline,
    rasterize_volume_mask,
    sample_surface,
    simplify_polyline,
)


def inside_convex_polygon(poly, pts, tol=1e-9):
    """Brute-force membership for a CCW polygon."""
    ok = np.ones(len(pts), dtype=bool)
    for k in range(len(poly)):
        a, b = poly[k], poly[(k + 1) % len(poly)]
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        ok &= cross >= -tol
    return ok


def disk_mask(cam, center_world, radius_world):
    """Mask of a projected sphere silhouette (by ray casting)."""
    rays = pixel_rays(cam)
    oc = cam.position - center_world
    b = rays @ oc
    c = oc @ oc - radius_world**2
    return MaskImage(b * b - c >= 0)


def unit_cube_halfspaces():
    hs = []
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1
        hs += [Halfspace(e, 1.0), Halfspace(-e, 0.0)]
    return hs


def test_hull_drops_interior_point():
    pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]], dtype=float)
    hull = convex_hull_2d(pts)
    assert {tuple(p) for p in hull} == {(0, 0), (1, 0), (1, 1), (0, 1)}


def test_hull_pentagon_kept_ccw():
    a = 2 * np.pi * np.arange(5) / 5
    pent = np.stack([np.cos(a), np.sin(a)], axis=1)
    hull = convex_hull_2d(pent)
    assert len(hull) == 5
    area = 0.5 * np.sum(hull[:, 0] * np.roll(hull[:, 1], -1) - np.roll(hull[:, 0], -1) * hull[:, 1])
    assert area > 0


def test_hull_random_disk_membership(rng):
    r = np.sqrt(rng.random(1000))
    t = rng.random(1000) * 2 * np.pi
    pts = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    hull = convex_hull_2d(pts)
    assert inside_convex_polygon(hull, pts).all()
    assert all(any(np.array_equal(h, p) for p in pts) for h in hull)
    # no three consecutive collinear
    for k in range(len(hull)):
        a, b, c = hull[k - 1], hull[k], hull[(k + 1) % len(hull)]
        assert abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) > 0


def test_hull_collinear_rejected():
    with pytest.raises(InvalidMaskError):
        convex_hull_2d(np.array([[0, 0], [1, 1], [2, 2.0]]))


def test_simplify_removes_near_collinear_vertex():
    poly = np.array([[0, 0], [1, 0.001], [2, 0], [2, 2], [0, 2]], dtype=float)
    out = simplify_polyline(poly, 0.01)
    assert not any(np.array_equal(p, [1, 0.001]) for p in out)
    assert len(out) == 4


def test_simplify_zero_epsilon_is_identity():
    poly = np.array([[0, 0], [1, 0.001], [2, 0], [2, 2], [0, 2]], dtype=float)
    np.testing.assert_array_equal(simplify_polyline(poly, 0.0), poly)


def _dist_to_closed_chain(pts, chain):
    best = np.full(len(pts), np.inf)
    for k in range(len(chain)):
        a, b = chain[k], chain[(k + 1) % len(chain)]
        ab = b - a
        t = np.clip((pts - a) @ ab / (ab @ ab), 0, 1)
        best = np.minimum(best, np.linalg.norm(pts - (a + t[:, None] * ab), axis=1))
    return best


def test_simplify_circle_within_epsilon():
    a = 2 * np.pi * np.arange(360) / 360
    circle = 10 * np.stack([np.cos(a), np.sin(a)], axis=1)
    eps = 0.05 * 10
    out = simplify_polyline(circle, eps)
    assert len(out) < 360
    assert all(any(np.array_equal(o, c) for c in circle) for o in out)
    assert _dist_to_closed_chain(circle, out).max() <= eps + 1e-12


def test_lift_square_mask_gives_symmetric_frustum(identity_camera):
    sq = np.array([[40, 40], [60, 40], [60, 60], [40, 60]], dtype=float)
    hs = lift_mask_to_halfspaces(identity_camera, sq)
    assert len(hs) == 4
    normals = np.array([h.normal for h in hs])
    # symmetric: normals' x/y components pair up with equal z
    np.testing.assert_allclose(sorted(normals[:, 2]), [normals[0, 2]] * 4, atol=1e-12)
    np.testing.assert_allclose(np.sort(np.abs(normals[:, :2]).max(axis=1)), [np.abs(normals[0, :2]).max()] * 4)
    for h in hs:
        assert abs(h.offset) < 1e-12
    centroid_ray = pixel_rays(identity_camera, sq.mean(axis=0))
    assert all(h.contains(identity_camera.position + 3 * centroid_ray) for h in hs)


def test_lift_membership_brute_force(rng, orbit_camera):
    cam = orbit_camera
    poly = convex_hull_2d(rng.uniform([8, 6], [40, 34], size=(12, 2)))
    hs = lift_mask_to_halfspaces(cam, poly)
    pix = rng.uniform([0, 0], [cam.width, cam.height], size=(10_000, 2))
    dirs = pixel_rays(cam, pix)
    pts = cam.position + dirs * rng.uniform(0.5, 5.0, size=(len(pix), 1))
    in_hs = np.all([h.contains(pts, tol=0.0) for h in hs], axis=0)
    in_poly = inside_convex_polygon(poly, pix, tol=0.0)
    # ignore points within numerical reach of an edge
    margin = np.min([np.abs(pts @ h.normal - h.offset) for h in hs], axis=0) > 1e-9
    assert np.array_equal(in_hs[margin], in_poly[margin])


def test_cube_from_halfspaces():
    vol = intersect_halfspaces(unit_cube_halfspaces(), Aabb(np.full(3, -5.0), np.full(3, 5.0)))
    assert len(vol.vertices) == 8
    assert abs(vol.volume - 1.0) < 1e-12
    corners = {tuple(v) for v in np.round(vol.vertices, 12)}
    assert corners == {(x, y, z) for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)}


def test_single_frustum_clipped_membership(rng, orbit_camera):
    cam = orbit_camera
    poly = np.array([[15, 12], [33, 12], [33, 28], [15, 28]], dtype=float)
    clip = Aabb(np.full(3, -1.0), np.full(3, 1.0))
    vol = intersect_halfspaces(lift_mask_to_halfspaces(cam, poly), clip)
    lo, hi = vol.aabb.min, vol.aabb.max
    pts = rng.uniform(lo, hi, size=(20_000, 3))
    pts = pts[vol.contains(pts, tol=0.0)]
    assert len(pts) > 100
    pix, depth = project(cam, pts)
    assert (depth > 0).all()
    assert inside_convex_polygon(poly, pix, tol=1e-9).all()


def test_disjoint_masks_empty(orbit_camera):
    cam = orbit_camera
    left = np.array([[1, 1], [5, 1], [5, 5], [1, 5]], dtype=float)
    right = np.array([[40, 30], [46, 30], [46, 38], [40, 38]], dtype=float)
    hs = lift_mask_to_halfspaces(cam, left) + lift_mask_to_halfspaces(cam, right)
    with pytest.raises(EmptyVolumeError):
        intersect_halfspaces(hs, Aabb(np.full(3, -2.0), np.full(3, 2.0)))


@pytest.fixture(scope="module")
def cube_volume():
    return intersect_halfspaces(unit_cube_halfspaces(), Aabb(np.full(3, -5.0), np.full(3, 5.0)))


def test_sample_surface_area_weighting(cube_volume):
    n = 600_000
    pts = sample_surface(cube_volume, n, seed=3)
    counts = []
    for k in range(3):
        counts.append(np.sum(np.abs(pts[:, k]) < 1e-12))
        counts.append(np.sum(np.abs(pts[:, k] - 1) < 1e-12))
    # 3 sigma of a binomial(n, 1/6) is ~ 0.2% of 1e5; spec bound is 1%
    for c in counts:
        assert abs(c - 1e5) < 1e3


def test_sample_surface_on_boundary_and_deterministic(cube_volume):
    a = sample_surface(cube_volume, 5000, seed=9)
    b = sample_surface(cube_volume, 5000, seed=9)
    np.testing.assert_array_equal(a, b)
    assert cube_volume.contains(a, tol=1e-7).all()


def test_rasterize_mask_inside_and_behind(cube_volume):
    inside = Camera(np.full(3, 0.5), np.eye(3), 10, 10, 8, 8, 16, 16)
    assert rasterize_volume_mask(cube_volume, inside).bits.all()
    behind = Camera(np.array([0.5, 0.5, 3.0]), np.eye(3), 10, 10, 8, 8, 16, 16)
    assert not rasterize_volume_mask(cube_volume, behind).bits.any()


def test_rasterize_mask_vs_supersampled(cube_volume):
    cam = look_at((2.5, 1.9, 1.7), (0.5, 0.5, 0.5), width=40, height=32)
    mask = rasterize_volume_mask(cube_volume, cam).bits
    # 16x supersampling oracle: majority coverage rounds to the center sample except at edges
    from catasplat.volume import ray_volume_hits

    sub = (np.arange(4) + 0.5) / 4
    cover = np.zeros(mask.shape)
    ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
    for dy in sub:
        for dx in sub:
            pix = np.stack([xs + dx, ys + dy], axis=-1).astype(float)
            cover += ray_volume_hits(cube_volume, cam.position, pixel_rays(cam, pix))
    agree = mask == (cover / 16 >= 0.5)
    assert agree.mean() >= 0.99
    # vertex projections are all set
    pix, _ = project(cam, cube_volume.vertices)
    for x, y in np.clip(np.floor(pix), 0, [cam.width - 1, cam.height - 1]).astype(int):
        assert mask[y, x] or cover[y, x] > 0


def sphere_setup(n_views):
    cams = [
        look_at((3 * np.cos(a), 3 * np.sin(a), 0.8 + 0.3 * k), (0, 0, 0), width=48, height=48)
        for k, a in enumerate(np.linspace(0, 2 * np.pi, n_views, endpoint=False) + 0.3)
    ]
    masks = [disk_mask(c, np.zeros(3), 0.6) for c in cams]
    return cams, masks


def test_soundness_and_monotonicity(rng):
    cams, masks = sphere_setup(4)
    clip = Aabb(np.full(3, -2.0), np.full(3, 2.0))
    volumes = [build_reflection_volume(masks[:k], cams[:k], clip) for k in range(1, 5)]
    vols = [v.volume for v in volumes]
    assert all(b <= a + 1e-12 for a, b in zip(vols, vols[1:]))
    vol = volumes[2]
    pts = rng.uniform(vol.aabb.min, vol.aabb.max, size=(100_000, 3))
    pts = pts[vol.contains(pts, tol=0.0)]
    for cam, mask in zip(cams[:3], masks[:3]):
        hull = convex_hull_2d(mask.boundary_points())
        pix, depth = project(cam, pts)
        assert inside_convex_polygon(hull, pix, tol=1e-7).all()
    # sphere itself is inside (up to the simplification tolerance) - spot check its center
    assert vol.contains(np.zeros(3))


def test_mask_polyline_rejects_empty():
    with pytest.raises(InvalidMaskError):
        mask_polyline(MaskImage(np.zeros((4, 4), dtype=bool)))


def test_volume_ply_roundtrip(tmp_path):
    from catasplat.volume import load_volume, save_volume

    vol = intersect_halfspaces(unit_cube_halfspaces()[:3], Aabb(np.array([-2.0] * 3), np.array([2.0] * 3)))
    save_volume(tmp_path / "v.ply", vol)
    back = load_volume(tmp_path / "v.ply")
    assert back.volume == vol.volume
    pts = np.random.default_rng(0).uniform(-2.5, 2.5, size=(5000, 3))
    np.testing.assert_array_equal(back.contains(pts), vol.contains(pts))

"""Command-line entry point: ``catasplat <command> ...``.

Exit codes: 0 success, 2 bad input (missing files, malformed arguments or
data), 3 numerical failure (non-finite training loss or rendered image).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import apps
from .caustics import NotVisibleError, Sphere
from .fileio import read_mask_png, read_pfm, read_png, read_ply_points, write_ply_points
from .geometry import Aabb, Camera, load_cameras, ring_orbit
from .losses import dssim, psnr, ssim
from .scenes import DEFAULT_ORBITS, SCENES, SyntheticScene, generate_dataset, load_dataset
from .trainer import (
    LossLog,
    TrainConfig,
    init_state,
    load_checkpoint,
    load_model,
    prepare_data,
    save_model,
    train,
)
from .volume import (
    EmptyVolumeError,
    InvalidMaskError,
    MaskImage,
    build_reflection_volume,
    load_volume,
    rasterize_volume_mask,
    save_volume,
)

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("catasplat")


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# shared argument helpers


def _add_camera_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cameras", type=Path, help="camera path as a JSON camera list")
    p.add_argument("--orbit", help="generated path ring:radius,height,n")
    p.add_argument("--center", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar=("X", "Y", "Z"))
    p.add_argument("--target", type=float, nargs=3, metavar=("X", "Y", "Z"))
    p.add_argument("--res", type=int, default=96, help="square image size for --orbit")
    p.add_argument("--fov", type=float, default=50.0, help="vertical field of view (degrees) for --orbit")


def parse_orbit(spec: str, center, target, res: int, fov: float) -> list[Camera]:
    kind, _, rest = spec.partition(":")
    if kind != "ring":
        raise ValueError(f"unknown orbit kind {kind!r} (expected ring:radius,height,n)")
    try:
        radius, height, n = rest.split(",")
        radius, height, n = float(radius), float(height), int(n)
    except ValueError as exc:
        raise ValueError(f"malformed orbit {spec!r}, expected ring:radius,height,n") from exc
    if n < 1 or radius <= 0:
        raise ValueError("orbit needs a positive radius and at least one camera")
    return ring_orbit(center, radius, height, n, width=res, height_px=res, fov_deg=fov, target=target)


def cameras_from_args(args) -> list[Camera]:
    if (args.cameras is None) == (args.orbit is None):
        raise ValueError("give exactly one of --cameras or --orbit")
    if args.cameras is not None:
        cams = load_cameras(args.cameras)
    else:
        cams = parse_orbit(args.orbit, args.center, args.target, args.res, args.fov)
    if not cams:
        raise ValueError("camera path is empty")
    return cams


def _check_finite(img: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(img)):
        raise NumericalFailure(f"non-finite values in {what}")


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer, np.bool_)):
        return int(v)
    return v


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: _cell(v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.scene not in SCENES:
        raise ValueError(f"unknown scene {args.scene!r}; choose from {sorted(SCENES)}")
    scene = SCENES[args.scene]()
    orbit = DEFAULT_ORBITS[args.scene]
    ds = generate_dataset(
        scene, args.views, orbit, args.res, args.res, seed=args.seed, n_points=args.points, spp=args.spp,
        jitter=args.jitter, n_holes=args.holes, hole_radius=args.hole_radius, mask_views=args.mask_views,
        out_dir=args.out,
    )
    print(f"wrote {len(ds.cameras)} views, {len(ds.points['xyz'])} points, {len(ds.masks)} masks to {args.out}")
    return EXIT_OK


def _parse_mask_arg(spec: str) -> tuple[Path, int]:
    """``mask.png:K`` names camera K explicitly; a bare ``view_0005.png`` takes K from the trailing digits."""
    path, sep, idx = spec.rpartition(":")
    if sep and path and idx.isdigit():
        return Path(path), int(idx)
    m = re.search(r"(\d+)$", Path(spec).stem)
    if m is None:
        raise ValueError(f"mask argument {spec!r} must look like mask.png:camera_index")
    return Path(spec), int(m.group(1))


def cmd_volume(args) -> int:
    cams = load_cameras(args.cameras)
    masks, mcams = [], []
    for spec in args.masks:
        path, idx = _parse_mask_arg(spec)
        if not 0 <= idx < len(cams):
            raise ValueError(f"camera index {idx} out of range (0..{len(cams) - 1})")
        bits = read_mask_png(path)
        if bits.shape != cams[idx].shape:
            raise ValueError(f"mask {path} is {bits.shape[1]}x{bits.shape[0]}, camera {idx} is {cams[idx].width}x{cams[idx].height}")
        masks.append(MaskImage(bits))
        mcams.append(cams[idx])
    if args.points is not None:
        clip = Aabb.from_points(read_ply_points(args.points)["xyz"]).dilated(0.1)
    else:
        clip = Aabb.from_points(np.array([c.position for c in cams])).dilated(0.5)
    vol = build_reflection_volume(masks, mcams, clip, epsilon=args.epsilon)
    save_volume(args.out, vol)
    print(f"volume {vol.volume:.6g} with {len(vol.normals)} face planes -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    cfg_dict = {}
    if args.config is not None:
        cfg_dict = TrainConfig.load(args.config).to_dict()
    if args.iterations is not None:
        cfg_dict["iterations"] = args.iterations
    if args.primary_only:
        cfg_dict["primary_only"] = True
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    out = Path(args.out)
    resume = args.resume and (out / "checkpoint.npz").exists()
    if resume:
        state = load_checkpoint(out)
        if args.iterations is not None:
            # extending a run stretches its learning-rate schedule
            state.config = replace(state.config, iterations=args.iterations)
        cfg = state.config
        volume = load_volume(args.volume) if args.volume is not None and not cfg.primary_only else None
    else:
        cfg = TrainConfig.from_dict(cfg_dict)
        volume = None
        if not cfg.primary_only:
            if args.volume is None:
                raise ValueError("--volume is required unless training primary-only")
            volume = load_volume(args.volume)
        state = init_state(ds, volume, cfg)
    data = prepare_data(ds, volume)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    loss_log = LossLog(out / "loss_log.csv", append=resume)
    reported = [0]

    def progress(st, info):
        if st.iteration - reported[0] >= max(1, cfg.iterations // 20):
            reported[0] = st.iteration
            log.info("iteration %d loss %.5f (ema %.5f) points %d", st.iteration, info.report.total, st.loss_ema, st.model.n_primary)

    try:
        train(state, data, until=args.until, log=loss_log, out_dir=out, checkpoint_every=args.checkpoint_every, callback=progress)
    finally:
        loss_log.close()
    if not np.isfinite(state.loss_ema):
        raise NumericalFailure("training produced no finite loss")
    print(f"trained {state.iteration} iterations ({state.skipped} skipped); checkpoint in {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    model = load_model(args.checkpoint)
    cams = cameras_from_args(args)
    warp = None
    if args.warp_cameras is not None:
        wc = load_cameras(args.warp_cameras)
        if len(wc) != len(cams):
            raise ValueError("warp camera path must have one camera per frame")
        warp = [c.position for c in wc]
    elif args.warp_offset is not None:
        warp = [c.position + np.asarray(args.warp_offset) for c in cams]
    frames = apps.render_path(model, apps.RenderRequest(cams, warp, None), workers=args.workers)
    for k, img in enumerate(frames):
        _check_finite(img, f"frame {k}")
        apps.write_frame(args.out, f"frame_{k:04d}", img)
    print(f"rendered {len(frames)} frames to {args.out}")
    return EXIT_OK


def _image_files(d: Path) -> list[Path]:
    if (d / "images").is_dir():
        d = d / "images"
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    pfm = sorted(d.glob("*.pfm"))
    return pfm if pfm else sorted(d.glob("*.png"))


def _read_image(p: Path) -> np.ndarray:
    img = read_pfm(p) if p.suffix == ".pfm" else read_png(p)
    return np.repeat(img[..., None], 3, axis=2) if img.ndim == 2 else img


def cmd_metrics(args) -> int:
    pred = _image_files(args.pred)
    gt = _image_files(args.gt)
    cams = load_cameras(args.cameras) if args.cameras is not None else None
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predicted vs {len(gt)} ground-truth images")
    vol = None
    if args.volume is not None:
        if cams is None or len(cams) != len(gt):
            raise ValueError("region metrics need --cameras with one camera per image")
        vol = load_volume(args.volume)
    rows = []
    for k, (pp, gp) in enumerate(zip(pred, gt)):
        a, b = _read_image(pp), _read_image(gp)
        if a.shape != b.shape:
            raise ValueError(f"{pp.name} and {gp.name} differ in size")
        row = {"view": k, "pred": pp.name, "gt": gp.name, "psnr": psnr(a, b), "ssim": ssim(a, b), "dssim": dssim(a, b)}
        region = None if vol is None else rasterize_volume_mask(vol, cams[k]).bits
        if region is not None and region.any():
            row.update(psnr_region=psnr(a, b, region), ssim_region=ssim(a, b, region), dssim_region=dssim(a, b, region))
        else:
            row.update(psnr_region=float("nan"), ssim_region=float("nan"), dssim_region=float("nan"))
        rows.append(row)
    fields = ["view", "pred", "gt", "psnr", "ssim", "dssim", "psnr_region", "ssim_region", "dssim_region"]
    if args.out is not None:
        _write_csv(args.out, rows, fields)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=fields)
        w.writeheader()
        w.writerows({k: _cell(v) for k, v in r.items()} for r in rows)
    return EXIT_OK


def cmd_correspond(args) -> int:
    model = load_model(args.checkpoint)
    cams = cameras_from_args(args)
    if args.points:
        idx = np.array(args.points, dtype=np.int64)
    else:
        idx = np.sort(np.random.default_rng(args.seed).choice(model.n_reflection, size=min(args.count, model.n_reflection), replace=False))
    tracks = apps.correspond(model, idx, cams)
    _write_csv(args.out, list(tracks.rows()), ["camera", "point", "u", "v", "depth", "visible"])
    print(f"{len(idx)} tracks over {len(cams)} cameras -> {args.out}")
    return EXIT_OK


def cmd_clone(args) -> int:
    model = load_model(args.checkpoint)
    lo, hi = np.array(args.box[:3]), np.array(args.box[3:])
    rotation = None
    if args.rotate is not None:
        if args.rotate != 0:
            raise ValueError("only translations can be cloned")
    edited = apps.clone(model, Aabb(lo, hi), args.translate, rotation)
    save_model(edited, args.out)
    print(f"clone: {edited.n_primary - model.n_primary} primary points added, {len(edited.clone_offsets)} reflection copies -> {args.out}")
    return EXIT_OK


def cmd_stereo(args) -> int:
    model = load_model(args.checkpoint)
    cams = cameras_from_args(args)
    for k, cam in enumerate(cams):
        pair = apps.stereo_render(model, cam, args.eye_separation, args.warp_eye_separation)
        _check_finite(pair.left, "left image")
        _check_finite(pair.right, "right image")
        apps.write_frame(args.out, f"left_{k:04d}", pair.left)
        apps.write_frame(args.out, f"right_{k:04d}", pair.right)
    print(f"rendered {len(cams)} stereo pairs to {args.out}")
    return EXIT_OK


def _sphere_from_args(args) -> Sphere:
    if args.sphere is not None:
        return Sphere(args.sphere[:3], args.sphere[3])
    if args.scene is None:
        raise ValueError("give --sphere CX CY CZ R or --scene scene.json")
    scene = SyntheticScene.from_dict(json.loads(Path(args.scene).read_text()))
    if not isinstance(scene.reflector, Sphere):
        raise ValueError("scene reflector is not a sphere")
    return scene.reflector


def cmd_caustic_compare(args) -> int:
    model = load_model(args.checkpoint)
    sphere = _sphere_from_args(args)
    rep = apps.compare_catacaustic(model, sphere, args.source, args.samples, args.seed, args.point)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ply_points(out / "analytic.ply", {"xyz": rep.analytic})
    write_ply_points(out / "warped.ply", {"xyz": rep.warped})
    rows = [
        {
            "sample": k,
            "cx": c[0], "cy": c[1], "cz": c[2],
            "wx": w[0], "wy": w[1], "wz": w[2],
            "vx": v[0], "vy": v[1], "vz": v[2],
            "residual": r,
        }
        for k, (c, w, v, r) in enumerate(zip(rep.camera_positions, rep.warped, rep.virtual, rep.residual))
    ]
    _write_csv(out / "samples.csv", rows, list(rows[0]) if rows else ["sample"])
    summary = {"point_index": rep.point_index, "samples": len(rep.warped), "chamfer": rep.chamfer, "median_residual": rep.median_residual}
    _write_csv(out / "report.csv", [summary], list(summary))
    print(json.dumps(summary))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catasplat", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="ray-trace a synthetic multi-view dataset")
    p.add_argument("--scene", default="sphere_room")
    p.add_argument("--views", type=int, default=60)
    p.add_argument("--res", type=int, default=96)
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--spp", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", type=float, default=0.0, help="std. dev. of point position noise")
    p.add_argument("--holes", type=int, default=0, help="number of point-cloud dropout regions")
    p.add_argument("--hole-radius", type=float, default=0.2)
    p.add_argument("--mask-views", type=int, default=4)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("volume", help="build the reflection volume from masks")
    p.add_argument("--masks", nargs="+", required=True, metavar="MASK.png:CAM")
    p.add_argument("--cameras", type=Path, required=True)
    p.add_argument("--points", type=Path, help="point cloud PLY whose box clips the volume")
    p.add_argument("--epsilon", type=float, default=2.0, help="polyline simplification tolerance (pixels)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_volume)

    p = sub.add_parser("train", help="optimize a model on a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--volume", type=Path)
    p.add_argument("--config", type=Path, help="TOML or JSON training config")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--until", type=int, help="stop (with a checkpoint) after this iteration; the schedule is unchanged")
    p.add_argument("--primary-only", action="store_true", help="ablation without reflection cloud and warp")
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz if present")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a camera path")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_camera_args(p)
    p.add_argument("--warp-cameras", type=Path, help="per-frame cameras fed to the warp field")
    p.add_argument("--warp-offset", type=float, nargs=3, help="warp camera = raster camera + offset")
    p.add_argument("--workers", type=int, default=1, help="render frames in a process pool")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="PSNR/SSIM/DSSIM per view, full and reflector region")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--volume", type=Path)
    p.add_argument("--cameras", type=Path)
    p.add_argument("--out", type=Path, help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("correspond", help="track reflection points across cameras")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_camera_args(p)
    p.add_argument("--points", type=int, nargs="*", help="reflection point indices")
    p.add_argument("--count", type=int, default=100, help="random points when --points is absent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_correspond)

    p = sub.add_parser("clone", help="replicate the reflector by a translation")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--box", type=float, nargs=6, required=True, metavar=("X0", "Y0", "Z0", "X1", "Y1", "Z1"))
    p.add_argument("--translate", type=float, nargs=3, required=True)
    p.add_argument("--rotate", type=float, help="rotation angle in degrees (only 0 is accepted)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_clone)

    p = sub.add_parser("stereo", help="left/right images with reduced reflection disparity")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_camera_args(p)
    p.add_argument("--eye-separation", type=float, default=0.065)
    p.add_argument("--warp-eye-separation", type=float, default=0.0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_stereo)

    p = sub.add_parser("caustic-compare", help="learned trajectory vs analytic catacaustic of a sphere")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sphere", type=float, nargs=4, metavar=("CX", "CY", "CZ", "R"))
    p.add_argument("--scene", type=Path, help="scene.json of a synthetic dataset")
    p.add_argument("--source", type=float, nargs=3, required=True)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--point", type=int, help="reflection point index (default: nearest to the virtual image)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_caustic_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_BAD_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericalFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (
        FileNotFoundError,
        ValueError,
        KeyError,
        IndexError,
        InvalidMaskError,
        EmptyVolumeError,
        NotVisibleError,
        json.JSONDecodeError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())

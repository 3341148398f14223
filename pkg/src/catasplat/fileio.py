"""PNG / PFM images and PLY point clouds and meshes."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


def write_png(path: str | Path, img: np.ndarray) -> None:
    """Write a float image in [0, 1] (H, W) or (H, W, 3) as 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(str(path))


def read_png(path: str | Path) -> np.ndarray:
    """Float image in [0, 1]; grayscale files come back as (H, W)."""
    with Image.open(str(path)) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


def read_mask_png(path: str | Path) -> np.ndarray:
    """Boolean mask; any nonzero pixel marks the reflector."""
    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("L"))
    return arr > 0


def write_pfm(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        header = "Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError("PFM stores 1 or 3 channels")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        # PFM rows run bottom-to-top
        fh.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip().decode("ascii")
        dims = fh.readline().strip().decode("ascii")
        scale = float(fh.readline().strip().decode("ascii"))
        w, h = (int(v) for v in dims.split())
        channels = 3 if header == "PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


def write_pfm_stack(path: str | Path, img: np.ndarray) -> None:
    """Dump a multi-channel buffer as one grayscale PFM per channel (``name.cK.pfm``)."""
    img = np.asarray(img)
    path = Path(path)
    if img.ndim == 2:
        img = img[..., None]
    for k in range(img.shape[2]):
        write_pfm(path.with_suffix(f".c{k}.pfm"), img[..., k])


_PLY_TYPES = {"float": "<f4", "double": "<f8", "int": "<i4", "uchar": "u1", "uint": "<u4"}


def write_ply_points(path: str | Path, fields: dict[str, np.ndarray], binary: bool = True) -> None:
    """Write a vertex-only PLY. ``fields`` maps property names to (N,) or (N, k) arrays.

    Multi-column arrays are expanded to ``name_0 .. name_{k-1}`` except for
    ``xyz``/``normal``/``rgb`` which use the conventional PLY names.
    """
    cols: list[tuple[str, np.ndarray]] = []
    n = None
    for name, arr in fields.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        n = arr.shape[0] if n is None else n
        if arr.shape[0] != n:
            raise ValueError("all PLY fields must have the same length")
        if name == "xyz":
            names = ["x", "y", "z"]
        elif name == "normal":
            names = ["nx", "ny", "nz"]
        elif arr.shape[1] == 1:
            names = [name]
        else:
            names = [f"{name}_{k}" for k in range(arr.shape[1])]
        cols.extend((nm, arr[:, k]) for k, nm in enumerate(names))
    n = 0 if n is None else n
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {n}"]
    header += [f"property double {nm}" for nm, _ in cols]
    header.append("end_header")
    data = np.stack([c for _, c in cols], axis=1) if cols else np.zeros((n, 0))
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


def _read_ply_header(fh) -> tuple[str, list[tuple[str, int, list[tuple[str, str]]]]]:
    line = fh.readline().strip()
    if line != b"ply":
        raise ValueError("not a PLY file")
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    while True:
        line = fh.readline().decode("ascii").strip()
        if line == "end_header":
            break
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[-1], f"list {parts[2]} {parts[3]}"))
            else:
                elements[-1][2].append((parts[2], parts[1]))
    if fmt is None:
        raise ValueError("PLY header has no format line")
    return fmt, elements


def read_ply_points(path: str | Path) -> dict[str, np.ndarray]:
    """Read vertex properties of a PLY written by :func:`write_ply_points` (or any simple vertex PLY)."""
    with open(path, "rb") as fh:
        fmt, elements = _read_ply_header(fh)
        name, n, props = elements[0]
        if name != "vertex":
            raise ValueError("first PLY element must be 'vertex'")
        if fmt == "ascii":
            rows = [fh.readline().split() for _ in range(n)]
            data = np.array(rows, dtype=np.float64).reshape(n, len(props))
            out = {nm: data[:, k] for k, (nm, _) in enumerate(props)}
        else:
            dt = np.dtype([(nm, _PLY_TYPES[t]) for nm, t in props])
            rec = np.frombuffer(fh.read(dt.itemsize * n), dtype=dt, count=n)
            out = {nm: rec[nm].astype(np.float64) for nm, _ in props}
    return _regroup(out)


def _regroup(cols: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    if all(k in cols for k in ("x", "y", "z")):
        out["xyz"] = np.stack([cols.pop("x"), cols.pop("y"), cols.pop("z")], axis=1)
    if all(k in cols for k in ("nx", "ny", "nz")):
        out["normal"] = np.stack([cols.pop("nx"), cols.pop("ny"), cols.pop("nz")], axis=1)
    groups: dict[str, dict[int, np.ndarray]] = {}
    for name, col in cols.items():
        m = re.fullmatch(r"(.+)_(\d+)", name)
        if m:
            groups.setdefault(m.group(1), {})[int(m.group(2))] = col
        else:
            out[name] = col
    for base, parts in groups.items():
        out[base] = np.stack([parts[k] for k in sorted(parts)], axis=1)
    return out


def write_ply_mesh(path: str | Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """ASCII PLY triangle mesh."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [" ".join(repr(float(c)) for c in v) for v in vertices]
    lines += ["3 " + " ".join(str(int(i)) for i in f) for f in faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply_mesh(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        fmt, elements = _read_ply_header(fh)
        if fmt != "ascii":
            raise ValueError("only ASCII meshes are supported")
        counts = {name: n for name, n, _ in elements}
        nv = counts.get("vertex", 0)
        nf = counts.get("face", 0)
        verts = np.array([fh.readline().split()[:3] for _ in range(nv)], dtype=np.float64).reshape(nv, 3)
        faces = []
        for _ in range(nf):
            parts = fh.readline().split()
            k = int(parts[0])
            faces.append([int(v) for v in parts[1 : 1 + k]])
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)

"""Readers and writers for COLMAP text models, PLY, PFM, PNG images/masks and scene folders."""
from __future__ import annotations

import logging
import os
import re
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .scene import CameraView, rotmat_to_quat

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


# --------------------------------------------------------------------------
# COLMAP text format
# --------------------------------------------------------------------------

CAMERA_MODELS = {"SIMPLE_PINHOLE": 3, "PINHOLE": 4}


@dataclass
class ColmapCamera:
    id: int
    model: str
    width: int
    height: int
    params: np.ndarray

    @property
    def intrinsics(self) -> tuple[float, float, float, float]:
        if self.model == "SIMPLE_PINHOLE":
            f, cx, cy = self.params
            return float(f), float(f), float(cx), float(cy)
        fx, fy, cx, cy = self.params
        return float(fx), float(fy), float(cx), float(cy)


@dataclass
class ColmapImage:
    id: int
    qvec: np.ndarray  # (w, x, y, z), world-to-camera
    tvec: np.ndarray
    camera_id: int
    name: str
    xys: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    point3d_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def rotation(self) -> np.ndarray:
        w, x, y, z = self.qvec
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )


@dataclass
class ColmapPoint:
    id: int
    xyz: np.ndarray
    rgb: np.ndarray
    error: float
    track: np.ndarray  # (n, 2) of (image_id, point2d_idx)


@dataclass
class ColmapScene:
    cameras: dict[int, ColmapCamera]
    images: dict[int, ColmapImage]
    points3d: list[ColmapPoint]

    def point_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Point positions ``(N, 3)`` and colours in [0, 1] ``(N, 3)``."""
        if not self.points3d:
            return np.zeros((0, 3)), np.zeros((0, 3))
        xyz = np.stack([p.xyz for p in self.points3d])
        rgb = np.stack([p.rgb for p in self.points3d]).astype(np.float64) / 255.0
        return xyz, rgb


def _data_lines(path: Path):
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if line.lstrip().startswith("#"):
                continue
            yield lineno, line


def _parse_error(path: Path, lineno: int, msg: str) -> FormatError:
    return FormatError(f"{path}:{lineno}: {msg}")


def parse_colmap(directory: PathLike) -> ColmapScene:
    """Parse ``cameras.txt``, ``images.txt`` and ``points3D.txt`` from a directory."""
    d = Path(directory)
    paths = {name: d / f"{name}.txt" for name in ("cameras", "images", "points3D")}
    for p in paths.values():
        if not p.is_file():
            raise FileNotFoundError(f"missing COLMAP file {p}")

    cameras: dict[int, ColmapCamera] = {}
    for lineno, line in _data_lines(paths["cameras"]):
        if not line.strip():
            continue
        tok = line.split()
        try:
            cam_id, model, width, height = int(tok[0]), tok[1], int(tok[2]), int(tok[3])
            params = np.array([float(v) for v in tok[4:]])
        except (IndexError, ValueError) as exc:
            raise _parse_error(paths["cameras"], lineno, f"malformed camera line ({exc})") from None
        if model not in CAMERA_MODELS:
            raise _parse_error(paths["cameras"], lineno, f"unsupported camera model {model}")
        if params.size != CAMERA_MODELS[model]:
            raise _parse_error(paths["cameras"], lineno, f"{model} expects {CAMERA_MODELS[model]} params")
        cameras[cam_id] = ColmapCamera(cam_id, model, width, height, params)

    images: dict[int, ColmapImage] = {}
    lines = list(_data_lines(paths["images"]))
    i = 0
    while i < len(lines):
        lineno, line = lines[i]
        i += 1
        if not line.strip():
            continue
        tok = line.split()
        try:
            if len(tok) < 10:
                raise ValueError("expected 10 fields")
            img_id = int(tok[0])
            q = np.array([float(v) for v in tok[1:5]])
            t = np.array([float(v) for v in tok[5:8]])
            cam_id = int(tok[8])
            name = " ".join(tok[9:])
        except ValueError as exc:
            raise _parse_error(paths["images"], lineno, f"malformed image line ({exc})") from None
        pts_line = lines[i][1] if i < len(lines) else ""
        pts_lineno = lines[i][0] if i < len(lines) else lineno + 1
        i += 1
        vals = pts_line.split()
        if len(vals) % 3:
            raise _parse_error(paths["images"], pts_lineno, "POINTS2D entries must come in triples")
        try:
            arr = np.array([float(v) for v in vals]).reshape(-1, 3)
        except ValueError:
            raise _parse_error(paths["images"], pts_lineno, "malformed POINTS2D line") from None
        if cam_id not in cameras:
            raise _parse_error(paths["images"], lineno, f"image {img_id} references unknown camera id {cam_id}")
        norm = np.linalg.norm(q)
        if norm == 0:
            raise _parse_error(paths["images"], lineno, "zero quaternion")
        images[img_id] = ColmapImage(img_id, q / norm, t, cam_id, name, arr[:, :2], arr[:, 2].astype(np.int64))

    points: list[ColmapPoint] = []
    for lineno, line in _data_lines(paths["points3D"]):
        if not line.strip():
            continue
        tok = line.split()
        try:
            if len(tok) < 8 or (len(tok) - 8) % 2:
                raise ValueError("wrong field count")
            pid = int(tok[0])
            xyz = np.array([float(v) for v in tok[1:4]])
            rgb = np.array([int(v) for v in tok[4:7]], dtype=np.uint8)
            err = float(tok[7])
            track = np.array([int(v) for v in tok[8:]], dtype=np.int64).reshape(-1, 2)
        except ValueError as exc:
            raise _parse_error(paths["points3D"], lineno, f"malformed point line ({exc})") from None
        points.append(ColmapPoint(pid, xyz, rgb, err, track))
    points.sort(key=lambda p: p.id)
    images = dict(sorted(images.items()))
    cameras = dict(sorted(cameras.items()))
    return ColmapScene(cameras, images, points)


def write_colmap(scene: ColmapScene, directory: PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "cameras.txt", "w", encoding="utf-8") as f:
        f.write("# Camera list with one line of data per camera:\n")
        f.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for c in scene.cameras.values():
            f.write(" ".join([str(c.id), c.model, str(c.width), str(c.height)] + [repr(float(p)) for p in c.params]) + "\n")
    with open(d / "images.txt", "w", encoding="utf-8") as f:
        f.write("# Image list with two lines of data per image:\n")
        f.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        f.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for im in scene.images.values():
            head = [str(im.id)] + [repr(float(v)) for v in (*im.qvec, *im.tvec)] + [str(im.camera_id), im.name]
            f.write(" ".join(head) + "\n")
            obs = []
            for (x, y), pid in zip(im.xys, im.point3d_ids):
                obs += [repr(float(x)), repr(float(y)), str(int(pid))]
            f.write(" ".join(obs) + "\n")
    with open(d / "points3D.txt", "w", encoding="utf-8") as f:
        f.write("# 3D point list with one line of data per point:\n")
        f.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for p in scene.points3d:
            vals = [str(p.id)] + [repr(float(v)) for v in p.xyz] + [str(int(v)) for v in p.rgb] + [repr(float(p.error))]
            vals += [str(int(v)) for v in p.track.reshape(-1)]
            f.write(" ".join(vals) + "\n")


# --------------------------------------------------------------------------
# PLY
# --------------------------------------------------------------------------

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_NP_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort", "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


def read_ply(source: Union[PathLike, bytes]) -> dict[str, np.ndarray]:
    """Read the ``vertex`` element of an ascii or binary little-endian PLY file.

    Returns a mapping from property name to a 1-D array, in header order.
    """
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file (missing 'ply' magic or end_header)")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise FormatError("truncated PLY header")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[nl + 1:]

    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    current = None
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            current = tok[1]
            if current != "vertex":
                raise FormatError(f"unsupported PLY element {current!r}")
            count = int(tok[2])
        elif tok[0] == "property":
            if current != "vertex":
                raise FormatError("PLY property outside the vertex element")
            if tok[1] == "list":
                raise FormatError("PLY list properties are not supported")
            if tok[1] not in PLY_TYPES:
                raise FormatError(f"unknown PLY property type {tok[1]!r}")
            props.append((tok[2], PLY_TYPES[tok[1]]))
        else:
            raise FormatError(f"unexpected PLY header line {line!r}")
    if count is None or not props:
        raise FormatError("PLY file has no vertex element")

    if fmt == "binary_little_endian":
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        need = dtype.itemsize * count
        if len(body) < need:
            raise FormatError(f"truncated PLY body: expected {need} bytes, got {len(body)}")
        arr = np.frombuffer(body, dtype=dtype, count=count)
        return {name: arr[name].copy() for name, _ in props}
    if fmt == "ascii":
        rows = [r for r in body.decode("ascii").splitlines() if r.strip()]
        if len(rows) < count:
            raise FormatError(f"truncated PLY body: expected {count} rows, got {len(rows)}")
        out = {name: np.empty(count, dtype=t) for name, t in props}
        for i, row in enumerate(rows[:count]):
            vals = row.split()
            if len(vals) != len(props):
                raise FormatError(f"PLY row {i} has {len(vals)} values, expected {len(props)}")
            for (name, t), v in zip(props, vals):
                out[name][i] = float(v) if t[0] == "f" else int(v)
        return out
    if fmt == "binary_big_endian":
        raise FormatError("big-endian PLY is not supported")
    raise FormatError(f"unknown PLY format {fmt!r}")


def write_ply(
    target: Optional[PathLike],
    properties: dict[str, np.ndarray],
    binary: bool = True,
) -> bytes:
    """Write vertex properties (name -> 1-D array, dtype preserved) and return the bytes."""
    names = list(properties)
    arrays = [np.asarray(properties[n]) for n in names]
    count = len(arrays[0])
    if any(len(a) != count for a in arrays):
        raise ValueError("all PLY properties must have the same length")
    types = []
    for a in arrays:
        key = a.dtype.str[1:]
        if key not in _NP_TO_PLY:
            raise ValueError(f"cannot store dtype {a.dtype} in PLY")
        types.append(key)
    head = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {count}"]
    head += [f"property {_NP_TO_PLY[t]} {n}" for n, t in zip(names, types)]
    head.append("end_header")
    out = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        dtype = np.dtype([(n, "<" + t) for n, t in zip(names, types)])
        rec = np.empty(count, dtype=dtype)
        for n, a in zip(names, arrays):
            rec[n] = a
        out += rec.tobytes()
    else:
        lines = []
        for i in range(count):
            lines.append(" ".join(repr(float(a[i])) if t[0] == "f" else str(int(a[i])) for a, t in zip(arrays, types)))
        out += ("\n".join(lines) + "\n").encode("ascii")
    if target is not None:
        Path(target).write_bytes(out)
    return out


def points_to_ply(points, colours=None, normals=None) -> dict[str, np.ndarray]:
    pts = np.asarray(points, dtype=np.float32)
    props = {"x": pts[:, 0], "y": pts[:, 1], "z": pts[:, 2]}
    if normals is not None:
        nrm = np.asarray(normals, dtype=np.float32)
        props.update(nx=nrm[:, 0], ny=nrm[:, 1], nz=nrm[:, 2])
    if colours is not None:
        col = np.asarray(colours)
        if col.dtype != np.uint8:
            col = np.clip(np.round(col * 255.0), 0, 255).astype(np.uint8)
        props.update(red=col[:, 0], green=col[:, 1], blue=col[:, 2])
    return props


# --------------------------------------------------------------------------
# PFM
# --------------------------------------------------------------------------


def write_pfm(path: Optional[PathLike], depth, little_endian: bool = True) -> bytes:
    """Write a greyscale PFM (rows stored bottom to top) and return the bytes."""
    arr = np.asarray(depth, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("PFM depth must be a 2-D array")
    h, w = arr.shape
    scale = -1.0 if little_endian else 1.0
    out = f"Pf\n{w} {h}\n{scale}\n".encode("ascii")
    out += np.flipud(arr).astype("<f4" if little_endian else ">f4").tobytes()
    if path is not None:
        Path(path).write_bytes(out)
    return out


def read_pfm(source: Union[PathLike, bytes]) -> np.ndarray:
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    parts = []
    off = 0
    for _ in range(3):
        nl = data.find(b"\n", off)
        if nl < 0:
            raise FormatError("truncated PFM header")
        parts.append(data[off:nl].decode("ascii").strip())
        off = nl + 1
    kind, dims, scale_s = parts
    if kind == "PF":
        raise FormatError("colour PFM cannot be used as a depth map")
    if kind != "Pf":
        raise FormatError(f"not a PFM file (magic {kind!r})")
    try:
        w, h = (int(v) for v in dims.split())
        scale = float(scale_s)
    except ValueError:
        raise FormatError("malformed PFM header") from None
    if scale == 0:
        raise FormatError("PFM scale must be non-zero")
    dtype = "<f4" if scale < 0 else ">f4"
    need = 4 * w * h
    if len(data) - off < need:
        raise FormatError(f"truncated PFM body: expected {need} bytes")
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    return np.flipud(arr).astype(np.float32)


# --------------------------------------------------------------------------
# PNG images and masks
# --------------------------------------------------------------------------


def read_image(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(image) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: PathLike, image) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def read_mask(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.float64)


def write_mask(path: PathLike, mask) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------


@dataclass
class Scene:
    views: list[CameraView]
    points: np.ndarray
    colours: np.ndarray
    interp_files: list[Path] = field(default_factory=list)
    root: Optional[Path] = None


def split_views(views: Sequence, modulus: int = 8) -> tuple[list, list]:
    """Every ``modulus``-th view (index 0, modulus, ...) goes to test; the rest train."""
    if modulus < 2:
        raise ValueError("split modulus must be at least 2")
    test = [v for i, v in enumerate(views) if i % modulus == 0]
    train = [v for i, v in enumerate(views) if i % modulus != 0]
    if not train:
        log.warning("split left no training views (%d views total)", len(views))
    return train, test


def load_scene(root: PathLike, load_images: bool = True) -> Scene:
    """Load ``images/``, ``sparse/0/``, optional ``depth/``, ``masks/`` and ``interp/``."""
    root = Path(root)
    colmap = parse_colmap(root / "sparse" / "0")
    views = []
    for im in sorted(colmap.images.values(), key=lambda im: im.name):
        cam = colmap.cameras[im.camera_id]
        fx, fy, cx, cy = cam.intrinsics
        stem = Path(im.name).stem
        image = read_image(root / "images" / im.name) if load_images else None
        depth_path = root / "depth" / f"{stem}.pfm"
        mask_path = root / "masks" / f"{stem}.png"
        pseudo = read_pfm(depth_path).astype(np.float64) if depth_path.is_file() else None
        mask = read_mask(mask_path) if mask_path.is_file() else None
        views.append(
            CameraView(
                id=stem, fx=fx, fy=fy, cx=cx, cy=cy, width=cam.width, height=cam.height,
                R=im.rotation(), t=im.tvec, image=image, pseudo_depth=pseudo, motion_mask=mask,
            )
        )
    points, colours = colmap.point_arrays()
    interp_dir = root / "interp"
    interp_files = sorted(interp_dir.glob("*.png")) if interp_dir.is_dir() else []
    return Scene(views, points, colours, interp_files, root)


def views_to_colmap(views: Sequence[CameraView], points, colours, observations: bool = True) -> ColmapScene:
    """Build a COLMAP model (one PINHOLE camera per distinct intrinsics) from views and points."""
    cameras: dict[int, ColmapCamera] = {}
    keys: dict[tuple, int] = {}
    images: dict[int, ColmapImage] = {}
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tracks: list[list[tuple[int, int]]] = [[] for _ in range(len(points))]
    for img_id, v in enumerate(views, start=1):
        key = (v.fx, v.fy, v.cx, v.cy, v.width, v.height)
        if key not in keys:
            keys[key] = len(keys) + 1
            cameras[keys[key]] = ColmapCamera(keys[key], "PINHOLE", v.width, v.height, np.array([v.fx, v.fy, v.cx, v.cy]))
        xys, ids = np.zeros((0, 2)), np.zeros(0, dtype=np.int64)
        if observations and len(points):
            pc = points @ v.R.T + v.t
            z = pc[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                u = v.fx * pc[:, 0] / z + v.cx
                w = v.fy * pc[:, 1] / z + v.cy
            ok = (z > 0.01) & (u >= 0) & (u < v.width) & (w >= 0) & (w < v.height)
            sel = np.nonzero(ok)[0]
            xys = np.stack([u[sel], w[sel]], axis=1)
            ids = sel + 1
            for k, pid in enumerate(sel):
                tracks[pid].append((img_id, k))
        images[img_id] = ColmapImage(img_id, rotmat_to_quat(v.R), v.t.copy(), keys[key], f"{v.id}.png", xys, ids)
    rgb = np.clip(np.round(np.asarray(colours, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8).reshape(-1, 3)
    pts = [
        ColmapPoint(i + 1, points[i], rgb[i], 0.0, np.array(tracks[i], dtype=np.int64).reshape(-1, 2))
        for i in range(len(points))
    ]
    return ColmapScene(cameras, images, pts)

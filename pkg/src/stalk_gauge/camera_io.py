"""RGB-D ingestion: intrinsics, depth/mask/RGB files, back-projection and PLY export.

Depth images are ``uint16`` arrays of shape ``(height, width)`` where 0 means
"no measurement" and ``value * depth_scale`` is metres.  Masks are ``bool``
arrays of the same shape.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import EmptyCloudError


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    depth_scale: float = 0.001

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("width and height must be integers")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.height), int(self.width))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PointCloud:
    """Points in metres, ``(n, 3)`` float64; optional ``(n, 3)`` colours in [0, 1]."""

    points: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors must be parallel to points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)

    def select(self, keep) -> "PointCloud":
        """Subset by boolean mask or index array, keeping colours in step."""
        colors = None if self.colors is None else self.colors[keep]
        return PointCloud(self.points[keep], colors)

    @classmethod
    def concat(cls, clouds: Sequence["PointCloud"]) -> "PointCloud":
        pts = np.concatenate([c.points for c in clouds]) if clouds else np.empty((0, 3))
        if clouds and all(c.colors is not None for c in clouds):
            return cls(pts, np.concatenate([c.colors for c in clouds]))
        return cls(pts)


@dataclass
class RearView:
    """A second registered view: depth, mask and the 4x4 rear-to-front camera transform."""

    depth: np.ndarray
    mask: np.ndarray
    to_front: np.ndarray

    def __post_init__(self):
        self.to_front = check_rigid(self.to_front)


def check_rigid(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError("pose must be a 4x4 matrix")
    rot = m[:3, :3]
    if (not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or not np.allclose(m[3], [0, 0, 0, 1])
            or np.linalg.det(rot) < 0):
        raise ValueError("pose must be a rigid transform")
    return m


def transform_cloud(cloud: PointCloud, matrix: np.ndarray) -> PointCloud:
    pts = cloud.points @ matrix[:3, :3].T + matrix[:3, 3]
    return PointCloud(pts, cloud.colors)


def load_pose(path) -> np.ndarray:
    """JSON object ``{"matrix": [[...4 floats], x4]}``."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict) or set(data) != {"matrix"}:
        raise ValueError(f"{path}: pose file must be an object with a single 'matrix' key")
    return check_rigid(data["matrix"])


def save_pose(matrix: np.ndarray, path) -> None:
    rows = [[float(x) for x in row] for row in check_rigid(matrix)]
    Path(path).write_text(json.dumps({"matrix": rows}, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- intrinsics

_INTRINSIC_FIELDS = {f.name for f in fields(CameraIntrinsics)}


def intrinsics_from_dict(data: dict) -> CameraIntrinsics:
    unknown = set(data) - _INTRINSIC_FIELDS
    if unknown:
        raise ValueError(f"unknown intrinsics keys: {sorted(unknown)}")
    missing = _INTRINSIC_FIELDS - {"depth_scale"} - set(data)
    if missing:
        raise ValueError(f"missing intrinsics keys: {sorted(missing)}")
    return CameraIntrinsics(**data)


def load_intrinsics(path) -> CameraIntrinsics:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: intrinsics must be a JSON object")
    return intrinsics_from_dict(data)


def save_intrinsics(intr: CameraIntrinsics, path) -> None:
    Path(path).write_text(json.dumps(intr.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


# ---------------------------------------------------------------- images

def _read_pgm(path) -> np.ndarray:
    tokens = []
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.split(b"#", 1)[0]
            tokens.extend(line.split())
    if not tokens or tokens[0] != b"P2":
        raise ValueError(f"{path}: only ASCII PGM (P2) is supported")
    width, height, maxval = (int(t) for t in tokens[1:4])
    values = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if values.size != width * height:
        raise ValueError(f"{path}: expected {width * height} samples, found {values.size}")
    if maxval > 65535 or values.max(initial=0) > maxval:
        raise ValueError(f"{path}: sample values out of range")
    return values.reshape(height, width).astype(np.uint16)


def _write_pgm(arr: np.ndarray, path) -> None:
    h, w = arr.shape
    rows = "\n".join(" ".join(str(int(v)) for v in row) for row in arr)
    Path(path).write_text(f"P2\n{w} {h}\n65535\n{rows}\n", encoding="ascii")


def load_depth(path) -> np.ndarray:
    """Read a single-channel 16-bit PNG or an ASCII PGM into ``uint16``."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return _read_pgm(path)
    with Image.open(path) as img:
        if img.mode not in ("I;16", "I;16B", "I", "L"):
            raise ValueError(f"{path}: expected a single-channel depth image, got mode {img.mode}")
        arr = np.array(img)
    if arr.ndim != 2:
        raise ValueError(f"{path}: depth image must be single-channel")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
        raise ValueError(f"{path}: depth values exceed 16 bits")
    return arr.astype(np.uint16)


def save_depth(depth: np.ndarray, path) -> None:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError("depth must be 2-D")
    depth = depth.astype(np.uint16)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        _write_pgm(depth, path)
    else:
        Image.fromarray(depth.astype("<u2")).save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """8-bit mask image; values above 127 are foreground."""
    with Image.open(path) as img:
        arr = np.array(img.convert("L"))
    return arr > 127


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img.convert("RGB"))


# ---------------------------------------------------------------- geometry

def resize_mask(mask: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Nearest-neighbour resample: ``src = floor(dst * src_dim / dst_dim)``."""
    if target_w <= 0 or target_h <= 0:
        raise ValueError(f"target size must be positive, got {target_w}x{target_h}")
    mask = np.asarray(mask).astype(bool)
    src_h, src_w = mask.shape
    rows = (np.arange(target_h) * src_h) // target_h
    cols = (np.arange(target_w) * src_w) // target_w
    return mask[rows[:, None], cols[None, :]]


def backproject(depth: np.ndarray, mask: np.ndarray, intr: CameraIntrinsics,
                rgb: Optional[np.ndarray] = None) -> PointCloud:
    """Pinhole back-projection of masked, non-zero depth pixels in row-major order.

    Raises :class:`EmptyCloudError` when no pixel is both foreground and valid.
    """
    depth = np.asarray(depth)
    mask = np.asarray(mask).astype(bool)
    if depth.shape != intr.shape or mask.shape != intr.shape:
        raise ValueError(f"dimension mismatch: depth {depth.shape}, mask {mask.shape}, "
                         f"intrinsics {intr.shape}")
    vs, us = np.nonzero(mask & (depth > 0))
    if vs.size == 0:
        raise EmptyCloudError("no foreground pixel has a valid depth")
    z = depth[vs, us].astype(np.float64) * intr.depth_scale
    x = (us - intr.cx) * z / intr.fx
    y = (vs - intr.cy) * z / intr.fy
    colors = None
    if rgb is not None:
        rgb = np.asarray(rgb)
        if rgb.shape[:2] != intr.shape:
            raise ValueError(f"dimension mismatch: rgb {rgb.shape[:2]}, intrinsics {intr.shape}")
        colors = rgb[vs, us, :3].astype(np.float64) / 255.0
    return PointCloud(np.column_stack([x, y, z]), colors)


# ---------------------------------------------------------------- PLY

def write_ply(cloud: PointCloud, path, edges: Optional[np.ndarray] = None) -> None:
    """ASCII PLY; 9 significant digits per coordinate, colours as 0-255 bytes."""
    pts = cloud.points
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property float64 x", "property float64 y", "property float64 z"]
    has_color = cloud.colors is not None
    if has_color:
        lines += ["property uint8 red", "property uint8 green", "property uint8 blue"]
    if edges is not None:
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        lines += [f"element edge {len(edges)}", "property int32 vertex1", "property int32 vertex2"]
    lines.append("end_header")
    if has_color:
        rgb = np.clip(np.rint(cloud.colors * 255), 0, 255).astype(int)
        for p, c in zip(pts, rgb):
            lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}")
    else:
        lines.extend(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in pts)
    if edges is not None:
        lines.extend(f"{a} {b}" for a, b in edges)
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ply(path) -> PointCloud:
    """Parse the ASCII PLY subset emitted by :func:`write_ply`."""
    with open(path, encoding="ascii") as fh:
        text = fh.read().splitlines()
    if not text or text[0] != "ply" or text[1] != "format ascii 1.0":
        raise ValueError(f"{path}: not an ASCII PLY file")
    n_vertex, props, i = 0, [], 2
    in_vertex = False
    while text[i] != "end_header":
        parts = text[i].split()
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        i += 1
    body = text[i + 1:i + 1 + n_vertex]
    data = np.array([[float(t) for t in line.split()] for line in body]).reshape(n_vertex, len(props))
    col = {name: k for k, name in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    colors = None
    if "red" in col:
        colors = data[:, [col["red"], col["green"], col["blue"]]] / 255.0
    return PointCloud(pts, colors)

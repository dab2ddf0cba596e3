"""Synthetic stalks with known diameter: point clouds and rendered depth/mask pairs.

Randomness comes from ``numpy.random.Generator(PCG64(seed))`` (recorded as
``GENERATOR``), consumed in a fixed order so a seed fully determines a sample.

Geometry
    The centreline runs from ``base_point`` along ``axis_direction`` for
    ``length`` metres (chord length), bowed by ``curvature * 4 u (1 - u)``
    towards the first in-plane frame vector, ``u = s / length``.  Rings sit at
    equal arc-length spacing along the centreline.

Rendering
    Depth images are produced by splatting oriented surface discs (surfels)
    into a z-buffer: each disc is intersected with the ray through every pixel
    centre it may cover, and the nearest hit wins.  Full-visibility specs get a
    second depth image from the camera opposite the first across the stalk
    chord, returned as a :class:`RearView`.  Sensor corruption (Gaussian depth
    noise, interior samples, flying pixels pushed away from the camera) is applied per pixel
    after z-buffering so that it is not hidden by the front surface.  Rendered
    stalks are closed by flat end caps that occlude but are never
    masked; sampled clouds are open tubes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .axis_geometry import _orient, frame_from_direction
from .camera_io import CameraIntrinsics, PointCloud, RearView
from .errors import RenderError

GENERATOR = "numpy.random.PCG64"
VISIBILITY = ("full", "half")


@dataclass(frozen=True)
class StalkSpec:
    radius: float
    length: float
    axis_direction: tuple = (0.0, 1.0, 0.0)
    base_point: tuple = (0.0, -0.06, 0.3)
    curvature: float = 0.0
    visibility: str = "full"
    points_per_ring: int = 64
    rings: int = 101
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    outlier_scale: float = 0.0
    interior_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be > 0")
        if not self.length > 0:
            raise ValueError("length must be > 0")
        if self.visibility not in VISIBILITY:
            raise ValueError(f"visibility must be one of {VISIBILITY}")
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if not 0 <= self.interior_fraction < 1:
            raise ValueError("interior_fraction must lie in [0, 1)")
        if self.outlier_fraction + self.interior_fraction >= 1:
            raise ValueError("outlier_fraction + interior_fraction must be < 1")
        if self.noise_sigma < 0 or self.outlier_scale < 0:
            raise ValueError("noise_sigma and outlier_scale must be >= 0")
        if self.points_per_ring < 3 or self.rings < 2:
            raise ValueError("need at least 3 points per ring and 2 rings")
        if np.linalg.norm(self.axis_direction) == 0:
            raise ValueError("axis_direction must be non-zero")

    @property
    def direction(self) -> np.ndarray:
        d = np.asarray(self.axis_direction, dtype=np.float64)
        return d / np.linalg.norm(d)

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius


@dataclass
class RenderedSample:
    depth: np.ndarray
    mask: np.ndarray
    intr: CameraIntrinsics
    true_diameter: float
    spec: StalkSpec
    rear: Optional[RearView] = None


def centered_spec(radius: float, length: float, direction, center=(0.0, 0.0, 0.3),
                  **kwargs) -> StalkSpec:
    """Spec whose chord midpoint sits at ``center``."""
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    base = np.asarray(center, dtype=np.float64) - 0.5 * length * d
    return StalkSpec(radius=radius, length=length, axis_direction=tuple(d),
                     base_point=tuple(base), **kwargs)


# ---------------------------------------------------------------- centreline

def _bow_params(spec: StalkSpec) -> tuple[float, float]:
    length = spec.length
    return length, 4.0 * spec.curvature / length ** 2


def _arc_primitive(w: np.ndarray) -> np.ndarray:
    return 0.5 * (w * np.sqrt(1.0 + w * w) + np.arcsinh(w))


def _arc_length(s, length, a):
    if a == 0:
        return np.asarray(s, dtype=np.float64)
    return (_arc_primitive(np.asarray(a * length)) - _arc_primitive(a * (length - 2.0 * s))) / (2.0 * a)


def _chord_params_at_arc(targets: np.ndarray, length: float, a: float) -> np.ndarray:
    """Invert arc length to chord parameter by Newton iteration."""
    if a == 0:
        return targets.copy()
    total = float(_arc_length(length, length, a))
    s = targets * length / total
    for _ in range(50):
        slope = np.sqrt(1.0 + (a * (length - 2.0 * s)) ** 2)
        step = (_arc_length(s, length, a) - targets) / slope
        s = np.clip(s - step, 0.0, length)
        if np.max(np.abs(step)) < 1e-15 * length:
            break
    return s


def centerline(spec: StalkSpec, s) -> tuple[np.ndarray, np.ndarray]:
    """Centreline points and unit tangents at chord parameters ``s``."""
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    d = spec.direction
    w, _ = frame_from_direction(d)
    length, a = _bow_params(spec)
    bow = a * s * (length - s)
    slope = a * (length - 2.0 * s)
    pts = np.asarray(spec.base_point)[None, :] + s[:, None] * d + bow[:, None] * w
    tan = d[None, :] + slope[:, None] * w
    tan /= np.linalg.norm(tan, axis=1, keepdims=True)
    return pts, tan


def ring_parameters(spec: StalkSpec, n_rings: int) -> np.ndarray:
    length, a = _bow_params(spec)
    total = float(_arc_length(length, length, a))
    return _chord_params_at_arc(np.linspace(0.0, total, n_rings), length, a)


def _surface(spec: StalkSpec, n_rings: int, per_ring: int, phase: bool = False):
    """Noise-free surface points, outward normals and ring centres."""
    s = ring_parameters(spec, n_rings)
    centers, tan = centerline(spec, s)
    w, _ = frame_from_direction(spec.direction)
    e1 = w[None, :] - (tan @ w)[:, None] * tan
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(tan, e1)
    theta = 2.0 * np.pi * np.arange(per_ring) / per_ring
    if phase:
        # stagger alternate rings by half a step for denser coverage
        theta = theta[None, :] + (np.arange(n_rings) % 2)[:, None] * (np.pi / per_ring)
    else:
        theta = np.broadcast_to(theta, (n_rings, per_ring))
    normals = (np.cos(theta)[..., None] * e1[:, None, :] + np.sin(theta)[..., None] * e2[:, None, :])
    normals = normals.reshape(-1, 3)
    ring_c = np.repeat(centers, per_ring, axis=0)
    return ring_c + spec.radius * normals, normals, ring_c


def _caps(spec: StalkSpec, step: float):
    """Flat end discs closing the tube (rendering only), sampled on concentric rings."""
    s = np.array([0.0, spec.length])
    centers, tan = centerline(spec, s)
    pts, normals = [], []
    radii = np.arange(0.0, spec.radius, step)
    for c, t, sign in zip(centers, tan, (-1.0, 1.0)):
        e1, e2 = frame_from_direction(t)
        for rho in radii:
            m = max(1, int(math.ceil(2 * math.pi * rho / step)))
            th = 2 * math.pi * np.arange(m) / m
            pts.append(c + rho * (np.cos(th)[:, None] * e1 + np.sin(th)[:, None] * e2))
            normals.append(np.broadcast_to(sign * t, (m, 3)))
    return np.concatenate(pts), np.concatenate(normals)


def true_axis_direction(spec: StalkSpec) -> np.ndarray:
    return _orient(spec.direction.copy())


def sample_stalk_cloud(spec: StalkSpec) -> tuple[PointCloud, np.ndarray]:
    """Ring-sampled stalk surface and its true (+z oriented) chord direction.

    Draw order: Gaussian noise ``(n, 3)``, a permutation choosing interior and
    outlier points, interior depths ``U(0, 1)``, outlier offsets ``U(0, scale)``.
    Interior points move radially towards their ring centre; outliers move
    along +z (away from a camera looking down +z).
    """
    pts, normals, ring_c = _surface(spec, spec.rings, spec.points_per_ring)
    if spec.visibility == "half":
        keep = normals[:, 2] < 0
        pts, ring_c = pts[keep], ring_c[keep]
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n = len(pts)
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(0.0, spec.noise_sigma, size=(n, 3))
    n_int = int(math.floor(spec.interior_fraction * n))
    n_out = int(math.floor(spec.outlier_fraction * n))
    if n_int or n_out:
        perm = rng.permutation(n)
        inner, outer = perm[:n_int], perm[n_int:n_int + n_out]
        pts = pts.copy()
        frac = rng.uniform(0.0, 1.0, size=n_int)
        pts[inner] = ring_c[inner] + frac[:, None] * (pts[inner] - ring_c[inner])
        pts[outer, 2] += rng.uniform(0.0, spec.outlier_scale, size=n_out)
    return PointCloud(pts), true_axis_direction(spec)


# ---------------------------------------------------------------- rendering

def _splat(points: np.ndarray, normals: np.ndarray, disc_radius: float,
           intr: CameraIntrinsics, occluder: Optional[np.ndarray] = None):
    """Rasterize surfels; returns per-pixel ``(near, far, cos, occluded)``.

    ``near``/``far`` are the nearest and farthest hit depths (``inf``/``-inf``
    when empty), ``cos`` the incidence cosine at the nearest hit and
    ``occluded`` whether the nearest hit belongs to an occluder surfel.
    """
    h, w = intr.shape
    near = np.full(h * w, np.inf)
    far = np.full(h * w, -np.inf)
    near_cos = np.zeros(h * w)
    near_occ = np.zeros(h * w, dtype=bool)
    if occluder is None:
        occluder = np.zeros(len(points), dtype=bool)
    z = points[:, 2]
    ok = z > 1e-6
    points, normals, z, occluder = points[ok], normals[ok], z[ok], occluder[ok]

    def result():
        return (near.reshape(h, w), far.reshape(h, w), near_cos.reshape(h, w),
                near_occ.reshape(h, w))

    if len(points) == 0:
        return result()
    pu = intr.fx * points[:, 0] / z + intr.cx
    pv = intr.fy * points[:, 1] / z + intr.cy
    reach = int(math.ceil(disc_radius * max(intr.fx, intr.fy) / z.min())) + 1
    offsets = np.arange(-reach, reach + 1)
    nd = np.einsum("ij,ij->i", normals, points)
    chunk = max(1, 4_000_000 // len(offsets) ** 2)
    hit_pix, hit_depth, hit_cos, hit_occ = [], [], [], []
    for start in range(0, len(points), chunk):
        sl = slice(start, start + chunk)
        u = np.rint(pu[sl])[:, None, None] + offsets[None, None, :]
        v = np.rint(pv[sl])[:, None, None] + offsets[None, :, None]
        u, v = np.broadcast_arrays(u, v)
        inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        rx = (u - intr.cx) / intr.fx
        ry = (v - intr.cy) / intr.fy
        n = normals[sl]
        denom = n[:, 0, None, None] * rx + n[:, 1, None, None] * ry + n[:, 2, None, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            depth = nd[sl, None, None] / denom
        p = points[sl]
        dx = depth * rx - p[:, 0, None, None]
        dy = depth * ry - p[:, 1, None, None]
        dz = depth - p[:, 2, None, None]
        hit = inside & (np.abs(denom) > 1e-9) & (depth > 0) & (dx * dx + dy * dy + dz * dz <= disc_radius ** 2)
        hit_pix.append((v[hit] * w + u[hit]).astype(np.intp))
        hit_depth.append(depth[hit])
        hit_cos.append(np.abs(denom[hit]) / np.sqrt(rx[hit] ** 2 + ry[hit] ** 2 + 1.0))
        hit_occ.append(np.broadcast_to(occluder[sl, None, None], hit.shape)[hit])
    pix = np.concatenate(hit_pix)
    if pix.size == 0:
        return result()
    depth = np.concatenate(hit_depth)
    cos = np.concatenate(hit_cos)
    occ = np.concatenate(hit_occ)
    order = np.lexsort((depth, pix))
    pix, depth, cos, occ = pix[order], depth[order], cos[order], occ[order]
    first = np.r_[True, pix[1:] != pix[:-1]]
    last = np.r_[pix[1:] != pix[:-1], True]
    near[pix[first]] = depth[first]
    near_cos[pix[first]] = cos[first]
    near_occ[pix[first]] = occ[first]
    far[pix[last]] = depth[last]
    return result()


def _quantize(z: np.ndarray, scale: float) -> np.ndarray:
    q = np.rint(z / scale)
    if q.max(initial=0) > 65535:
        raise RenderError("depth exceeds the 16-bit range at this depth_scale")
    return np.clip(q, 1, 65535).astype(np.uint16)


def rear_transform(pivot, axis) -> np.ndarray:
    """Half turn about the line through ``pivot`` along ``axis``.

    The matrix is an involution: it maps front-camera coordinates to those of
    a camera sitting diametrically opposite across the stalk axis, and back.
    """
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    p = np.asarray(pivot, dtype=np.float64)
    rot = 2.0 * np.outer(a, a) - np.eye(3)
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = p - rot @ p
    return m


def _render_view(spec: StalkSpec, intr: CameraIntrinsics, pose: np.ndarray,
                 rng: np.random.Generator, samples_per_pixel: float,
                 max_incidence_deg: float):
    rot, trans = pose[:3, :3], pose[:3, 3]
    ends, _ = centerline(spec, [0.0, spec.length * 0.5, spec.length])
    ends_cam = ends @ rot.T + trans
    if ends_cam[:, 2].max() + spec.radius + abs(spec.curvature) <= 0:
        raise RenderError("stalk lies entirely behind the camera")
    z_near = max(ends_cam[:, 2].min() - spec.radius - abs(spec.curvature), 1e-3)
    step = z_near / max(intr.fx, intr.fy) / samples_per_pixel
    per_ring = max(16, int(math.ceil(2 * math.pi * spec.radius / step)))
    n_rings = max(2, int(math.ceil(spec.length / step)) + 1)
    pts, normals, _ = _surface(spec, n_rings, per_ring, phase=True)
    arc = 2 * math.pi * spec.radius / per_ring
    ring_gap = spec.length / (n_rings - 1)
    cap_pts, cap_normals = _caps(spec, step)
    occluder = np.r_[np.zeros(len(pts), dtype=bool), np.ones(len(cap_pts), dtype=bool)]
    pts = np.concatenate([pts, cap_pts])
    normals = np.concatenate([normals, cap_normals])
    disc = 0.75 * math.hypot(max(arc, step), ring_gap)

    near, far, cos, capped = _splat(pts @ rot.T + trans, normals @ rot.T, disc, intr, occluder)
    mask = np.isfinite(near) & ~capped
    if max_incidence_deg is not None:
        mask &= cos >= math.cos(math.radians(max_incidence_deg))
    if not mask.any():
        raise RenderError("no stalk surface is visible from this pose (outside the frustum or seen edge-on)")

    vs, us = np.nonzero(mask)
    z = near[vs, us]
    chord = far[vs, us] - z
    n = vs.size
    n_int = int(math.floor(spec.interior_fraction * n))
    n_out = int(math.floor(spec.outlier_fraction * n))
    perm = rng.permutation(n)
    inner, outer = perm[:n_int], perm[n_int:n_int + n_out]
    z[inner] += rng.uniform(0.0, 1.0, n_int) * chord[inner]
    z[outer] += rng.uniform(0.0, spec.outlier_scale, n_out)
    if spec.noise_sigma > 0:
        z += rng.normal(0.0, spec.noise_sigma, n)
    depth = np.zeros(intr.shape, dtype=np.uint16)
    depth[vs, us] = _quantize(z, intr.depth_scale)
    return depth, mask


def render_depth(spec: StalkSpec, intr: CameraIntrinsics,
                 camera_pose: Optional[np.ndarray] = None,
                 samples_per_pixel: float = 2.0,
                 max_incidence_deg: Optional[float] = None) -> RenderedSample:
    """Surfel-splat the stalk into a depth image seen by ``camera_pose``.

    ``camera_pose`` is the 4x4 rigid transform from scene to camera
    coordinates (identity when omitted).  Surface sampling density follows the
    pixel footprint so that the discs overlap without gaps.  Full-visibility
    specs add a rear view from the camera opposite the first across the stalk
    chord (:func:`rear_transform`), so the two views cover the full circumference.
    The end caps only occlude (they hide the tube interior but are never part
    of the mask), since a real stalk continues beyond the measured section.
    With ``max_incidence_deg`` set, pixels whose surface is seen at more than
    that angle from the ray return no depth, as on a real depth sensor.

    Each view draws from ``PCG64(SeedSequence([seed, view]))`` (view 0 front,
    1 rear): a pixel permutation, interior fractions ``U(0, 1)`` of the local
    chord, flying-pixel offsets ``U(0, outlier_scale)``, then Gaussian noise.
    """
    pose = np.eye(4) if camera_pose is None else np.asarray(camera_pose, dtype=np.float64)
    front_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 0])))
    depth, mask = _render_view(spec, intr, pose, front_rng, samples_per_pixel,
                               max_incidence_deg)
    sample = RenderedSample(depth, mask, intr, spec.diameter, spec)
    if spec.visibility == "full":
        mid, _ = centerline(spec, [0.5 * spec.length])
        to_rear = rear_transform(pose[:3, :3] @ mid[0] + pose[:3, 3], pose[:3, :3] @ spec.direction)
        rear_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, 1])))
        rd, rm = _render_view(spec, intr, to_rear @ pose, rear_rng, samples_per_pixel,
                              max_incidence_deg)
        sample.rear = RearView(rd, rm, to_rear)
    return sample


# ---------------------------------------------------------------- datasets

SYNTH_INTRINSICS = CameraIntrinsics(width=640, height=480, fx=800.0, fy=800.0,
                                    cx=320.0, cy=240.0, depth_scale=1e-5)


def random_direction(rng: np.random.Generator, min_abs_z: float = 0.1,
                     max_abs_z: float = 1.0) -> np.ndarray:
    """Uniform unit vector on the sphere conditioned on ``min_abs_z < |z| <= max_abs_z``."""
    while True:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if min_abs_z < abs(d[2]) <= max_abs_z:
            return d


def random_specs(n: int, seed: int, *, diameter_range=(0.010, 0.020), length: float = 0.12,
                 orientation: str = "random", min_abs_z: float = 0.1, max_abs_z: float = 1.0,
                 distance: float = 0.3, **spec_kwargs) -> list:
    """``n`` reproducible specs; per-sample seeds are drawn from the master seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    specs = []
    for _ in range(n):
        sample_seed = int(rng.integers(0, 2 ** 63 - 1))
        lo, hi = diameter_range
        # whole micrometres, so six significant digits in a manifest are exact
        diameter = lo if hi == lo else round(float(rng.uniform(lo, hi)), 6)
        if orientation == "vertical":
            d = np.array([0.0, 1.0, 0.0])
        else:
            d = random_direction(rng, min_abs_z, max_abs_z)
        specs.append(centered_spec(0.5 * diameter, length, d, (0.0, 0.0, distance),
                                   seed=sample_seed, **spec_kwargs))
    return specs


def with_seed(spec: StalkSpec, seed: int) -> StalkSpec:
    return replace(spec, seed=seed)

"""Axis-orthogonal slicing, per-slice diameter fits and slice aggregation.

:func:`measure_cloud` runs in three stages (filter + axis, slab extraction +
DBSCAN, fit + aggregation).  The stages are exposed privately so the ablation
runner can share the expensive early stages between configurations that only
differ later on; results are identical to calling :func:`measure_cloud`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .axis_geometry import StalkAxis, axial_coordinates, principal_axis, project_to_slice_plane
from .camera_io import (CameraIntrinsics, PointCloud, RearView, backproject, resize_mask,
                        transform_cloud)
from .cloudfilter import DbscanParams, SorParams, dbscan, largest_cluster, sor_filter
from .errors import DegenerateAxisError, NoValidSlicesError

CIRCLE_FIT_METHODS = ("percentile", "mean", "median")
AGGREGATION_MODES = ("one_std", "plain_mean")


@dataclass(frozen=True)
class SlicingParams:
    n_slices: int = 100
    trim_fraction: float = 0.10
    slab_half_thickness: float = 0.0075
    min_slice_points: int = 5

    def __post_init__(self):
        if self.n_slices < 2:
            raise ValueError("n_slices must be >= 2")
        if not 0 <= self.trim_fraction < 0.5:
            raise ValueError("trim_fraction must lie in [0, 0.5)")
        if not self.slab_half_thickness > 0:
            raise ValueError("slab_half_thickness must be > 0")
        if self.min_slice_points < 1:
            raise ValueError("min_slice_points must be >= 1")


@dataclass(frozen=True)
class CircleFitParams:
    method: str = "percentile"
    percentile_q: float = 0.95

    def __post_init__(self):
        if self.method not in CIRCLE_FIT_METHODS:
            raise ValueError(f"unknown circle fit method {self.method!r}")
        if not 0 < self.percentile_q <= 1:
            raise ValueError("percentile_q must lie in (0, 1]")


@dataclass(frozen=True)
class PipelineConfig:
    sor: SorParams = field(default_factory=SorParams)
    sor_enabled: bool = True
    dbscan: DbscanParams = field(default_factory=DbscanParams)
    dbscan_enabled: bool = True
    slicing: SlicingParams = field(default_factory=SlicingParams)
    circle_fit: CircleFitParams = field(default_factory=CircleFitParams)
    aggregation: str = "one_std"

    def __post_init__(self):
        if self.aggregation not in AGGREGATION_MODES:
            raise ValueError(f"unknown aggregation mode {self.aggregation!r}")

    # flat JSON form: one key per tunable, all optional on input
    def to_flat(self) -> dict:
        return {
            "sor_enabled": self.sor_enabled,
            "sor_k_neighbors": self.sor.k_neighbors,
            "sor_std_ratio": self.sor.std_ratio,
            "dbscan_enabled": self.dbscan_enabled,
            "dbscan_eps": self.dbscan.eps,
            "dbscan_min_samples": self.dbscan.min_samples,
            "n_slices": self.slicing.n_slices,
            "trim_fraction": self.slicing.trim_fraction,
            "slab_half_thickness": self.slicing.slab_half_thickness,
            "min_slice_points": self.slicing.min_slice_points,
            "circle_fit_method": self.circle_fit.method,
            "percentile_q": self.circle_fit.percentile_q,
            "aggregation": self.aggregation,
        }

    @classmethod
    def from_flat(cls, data: dict, base: Optional["PipelineConfig"] = None) -> "PipelineConfig":
        base = base or cls()
        flat = base.to_flat()
        unknown = set(data) - set(flat)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key, value in data.items():
            expected = type(flat[key])
            if expected is bool:
                if not isinstance(value, bool):
                    raise ValueError(f"config key {key!r} must be a boolean")
            elif expected is int:
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ValueError(f"config key {key!r} must be an integer")
            elif expected is float:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ValueError(f"config key {key!r} must be a number")
                value = float(value)
            elif not isinstance(value, str):
                raise ValueError(f"config key {key!r} must be a string")
            flat[key] = value
        return cls(
            sor=SorParams(flat["sor_k_neighbors"], flat["sor_std_ratio"]),
            sor_enabled=flat["sor_enabled"],
            dbscan=DbscanParams(flat["dbscan_eps"], flat["dbscan_min_samples"]),
            dbscan_enabled=flat["dbscan_enabled"],
            slicing=SlicingParams(flat["n_slices"], flat["trim_fraction"],
                                  flat["slab_half_thickness"], flat["min_slice_points"]),
            circle_fit=CircleFitParams(flat["circle_fit_method"], flat["percentile_q"]),
            aggregation=flat["aggregation"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        canonical = json.dumps(self.to_flat(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return PipelineConfig.from_flat(data, base)


@dataclass
class SliceMeasurement:
    index: int
    t_center: float
    n_raw: int
    n_kept: int
    diameter: Optional[float]
    retained: bool = False


@dataclass
class StalkEstimate:
    slices: list
    mean_diameter: float
    std_diameter: float
    predicted_diameter: float
    n_valid: int
    axis: Optional[StalkAxis] = None
    cloud: Optional[PointCloud] = None
    n_input_points: int = 0

    def diameters(self) -> np.ndarray:
        return np.array([s.diameter for s in self.slices if s.diameter is not None])


# ---------------------------------------------------------------- primitives

def slice_centers(axis: StalkAxis, params: SlicingParams = SlicingParams()) -> np.ndarray:
    length = axis.t_max - axis.t_min
    if not length > 0:
        raise DegenerateAxisError("cloud has zero extent along its axis")
    lo = axis.t_min + params.trim_fraction * length
    hi = axis.t_max - params.trim_fraction * length
    i = np.arange(params.n_slices)
    return lo + i * (hi - lo) / (params.n_slices - 1)


def slab_points(cloud: PointCloud, axis: StalkAxis, t_center: float,
                half_thickness: float) -> np.ndarray:
    """Points whose axial coordinate lies within ``half_thickness`` of ``t_center``."""
    pts = cloud.points
    t = axial_coordinates(pts, axis.centroid, axis.direction)
    return pts[np.abs(t - t_center) <= half_thickness]


def percentile(values, q: float) -> float:
    """Linear interpolation between order statistics at rank ``q * (m - 1)``."""
    r = np.sort(np.asarray(values, dtype=np.float64))
    if r.size == 0:
        raise ValueError("percentile of an empty sample")
    h = q * (r.size - 1)
    lo = math.floor(h)
    hi = math.ceil(h)
    return float(r[lo] + (h - lo) * (r[hi] - r[lo]))


def _fit_slice(points2d: np.ndarray, dbscan_params: DbscanParams, dbscan_enabled: bool,
               fit: CircleFitParams, min_points: int) -> tuple[int, Optional[float]]:
    kept = _filter_slice(points2d, dbscan_params, dbscan_enabled)
    return len(kept), _diameter(kept, fit, min_points)


def _filter_slice(points2d, dbscan_params, dbscan_enabled) -> np.ndarray:
    pts = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if dbscan_enabled and len(pts):
        return largest_cluster(pts, dbscan(pts, dbscan_params))
    return pts


def _diameter(kept: np.ndarray, fit: CircleFitParams, min_points: int) -> Optional[float]:
    if len(kept) < min_points:
        return None
    center = kept.mean(axis=0)
    dx = kept[:, 0] - center[0]
    dy = kept[:, 1] - center[1]
    radii = np.sqrt(dx * dx + dy * dy)
    if fit.method == "percentile":
        r = percentile(radii, fit.percentile_q)
    elif fit.method == "median":
        r = percentile(radii, 0.5)
    else:
        r = float(radii.mean())
    return 2.0 * r


def fit_slice_diameter(points2d, dbscan_params: DbscanParams = DbscanParams(),
                       dbscan_enabled: bool = True, fit: CircleFitParams = CircleFitParams(),
                       min_points: int = 5) -> Optional[float]:
    """Diameter of one projected cross-section, or ``None`` when too sparse."""
    return _fit_slice(points2d, dbscan_params, dbscan_enabled, fit, min_points)[1]


def aggregate(diameters, mode: str = "one_std") -> tuple[float, float, float, np.ndarray]:
    """Combine slice diameters into ``(predicted, mean, std, retained_flags)``."""
    d = np.asarray(diameters, dtype=np.float64)
    if d.size == 0:
        raise ValueError("no diameters to aggregate")
    if mode not in AGGREGATION_MODES:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    m = float(d.mean())
    s = float(d.std())
    if mode == "plain_mean" or s == 0:
        retained = np.ones(d.size, dtype=bool)
    else:
        retained = np.abs(d - m) <= s
    predicted = m if mode == "plain_mean" else float(d[retained].mean())
    return predicted, m, s, retained


# ---------------------------------------------------------------- pipeline stages

def _prepare(cloud: PointCloud, config: PipelineConfig) -> tuple[PointCloud, StalkAxis]:
    if config.sor_enabled:
        if len(cloud) <= config.sor.k_neighbors:
            raise DegenerateAxisError(f"only {len(cloud)} points; SOR needs more than "
                                      f"{config.sor.k_neighbors}")
        cloud = sor_filter(cloud, config.sor)
    return cloud, principal_axis(cloud)


def _extract_slices(cloud: PointCloud, axis: StalkAxis, slicing: SlicingParams,
                    dbscan_params: DbscanParams, dbscan_enabled: bool) -> list:
    """Per slice: ``(index, t_center, n_raw, kept_2d_points)``."""
    centers = slice_centers(axis, slicing)
    t = axial_coordinates(cloud.points, axis.centroid, axis.direction)
    plane = project_to_slice_plane(cloud.points, axis)
    order = np.argsort(t, kind="stable")
    ts = t[order]
    h = slicing.slab_half_thickness
    pad = 1e-9 * (abs(ts[0]) + abs(ts[-1]) + h)
    out = []
    for i, c in enumerate(centers):
        lo = np.searchsorted(ts, c - h - pad, side="left")
        hi = np.searchsorted(ts, c + h + pad, side="right")
        cand = np.sort(order[lo:hi])
        sel = cand[np.abs(t[cand] - c) <= h]
        kept = _filter_slice(plane[sel], dbscan_params, dbscan_enabled)
        out.append((i, float(c), int(sel.size), kept))
    return out


def _finish(extracted: list, fit: CircleFitParams, aggregation: str,
            min_points: int) -> StalkEstimate:
    slices = [SliceMeasurement(i, c, n_raw, len(kept), _diameter(kept, fit, min_points))
              for i, c, n_raw, kept in extracted]
    valid = [s for s in slices if s.diameter is not None]
    if not valid:
        raise NoValidSlicesError("no slice had enough points for a diameter fit")
    predicted, m, s, retained = aggregate([v.diameter for v in valid], aggregation)
    for v, flag in zip(valid, retained):
        v.retained = bool(flag)
    return StalkEstimate(slices, m, s, predicted, len(valid))


def measure_cloud(cloud: PointCloud, config: PipelineConfig = PipelineConfig()) -> StalkEstimate:
    """Full measurement on an already reconstructed cloud."""
    n_input = len(cloud)
    filtered, axis = _prepare(cloud, config)
    extracted = _extract_slices(filtered, axis, config.slicing, config.dbscan,
                                config.dbscan_enabled)
    est = _finish(extracted, config.circle_fit, config.aggregation,
                  config.slicing.min_slice_points)
    est.axis, est.cloud, est.n_input_points = axis, filtered, n_input
    return est


def _fit_mask(mask, intr: CameraIntrinsics) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if mask.shape != intr.shape:
        mask = resize_mask(mask, intr.width, intr.height)
    return mask


def reconstruct(depth, mask, intr: CameraIntrinsics, rgb=None,
                rear: Optional[RearView] = None) -> PointCloud:
    """Masked back-projection; a rear view is mapped into the front camera frame.

    The mask is resized to the depth resolution when their sizes differ.
    """
    cloud = backproject(depth, _fit_mask(mask, intr), intr, rgb)
    if rear is None:
        return cloud
    back = backproject(rear.depth, _fit_mask(rear.mask, intr), intr)
    if cloud.colors is not None:
        back = PointCloud(back.points, np.full((len(back), 3), 0.5))
    return PointCloud.concat([cloud, transform_cloud(back, rear.to_front)])


def measure_stalk(depth, mask, intr: CameraIntrinsics, config: PipelineConfig = PipelineConfig(),
                  rgb=None, rear: Optional[RearView] = None) -> StalkEstimate:
    """Depth + mask (and optionally a registered rear view) to a diameter estimate."""
    return measure_cloud(reconstruct(depth, mask, intr, rgb, rear), config)


def with_overrides(config: PipelineConfig, **flat) -> PipelineConfig:
    return PipelineConfig.from_flat(flat, config)

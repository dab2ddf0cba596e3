"""Principal axis of a stalk cloud and the orthonormal slicing frame."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .camera_io import PointCloud
from .errors import DegenerateAxisError

_ISOTROPY_RTOL = 1e-12


@dataclass(frozen=True)
class StalkAxis:
    centroid: np.ndarray
    direction: np.ndarray
    u: np.ndarray
    v: np.ndarray
    t_min: float
    t_max: float

    @property
    def length(self) -> float:
        return self.t_max - self.t_min


def jacobi_eigh(a: np.ndarray, max_sweeps: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors as columns, in the
    order the rotations leave them (unsorted).
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.abs(a).max()
    if scale == 0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[p, q] ** 2 for p in range(n) for q in range(p + 1, n)))
        if off <= 1e-300 or off <= 1e-17 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
                v = v @ rot
    return np.diag(a).copy(), v


def covariance(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centroid and 1/n scatter matrix."""
    centroid = points.mean(axis=0)
    x = points - centroid
    return centroid, (x.T @ x) / len(points)


def _orient(d: np.ndarray) -> np.ndarray:
    for axis in (2, 1, 0):
        if d[axis] != 0:
            return d if d[axis] > 0 else -d
    return d


def frame_from_direction(direction) -> tuple[np.ndarray, np.ndarray]:
    """In-plane basis ``(u, v)`` with ``(u, v, direction)`` right-handed."""
    d = np.asarray(direction, dtype=np.float64)
    a = np.zeros(3)
    a[int(np.argmin(np.abs(d)))] = 1.0
    u = np.cross(d, a)
    u /= np.linalg.norm(u)
    return u, np.cross(d, u)


def axial_coordinates(points: np.ndarray, centroid: np.ndarray, direction: np.ndarray) -> np.ndarray:
    diff = np.asarray(points, dtype=np.float64).reshape(-1, 3) - centroid
    return diff[:, 0] * direction[0] + diff[:, 1] * direction[1] + diff[:, 2] * direction[2]


def principal_axis(cloud: PointCloud) -> StalkAxis:
    """First principal component of the cloud, oriented towards +z."""
    pts = cloud.points
    if len(pts) < 3:
        raise DegenerateAxisError(f"need at least 3 points, got {len(pts)}")
    centroid, cov = covariance(pts)
    evals, evecs = jacobi_eigh(cov)
    if not evals.max() > 0:
        raise DegenerateAxisError("all points are identical")
    order = np.argsort(-evals, kind="stable")
    top, second = evals[order[0]], evals[order[1]]
    if top - second <= _ISOTROPY_RTOL * top:
        warnings.warn("principal direction is ambiguous (top eigenvalues tie); "
                      "using the lowest-index eigenvector", RuntimeWarning, stacklevel=2)
        best = int(min(order[0], order[1]))
    else:
        best = int(order[0])
    d = evecs[:, best]
    d = _orient(d / np.linalg.norm(d))
    u, v = frame_from_direction(d)
    t = axial_coordinates(pts, centroid, d)
    return StalkAxis(centroid, d, u, v, float(t.min()), float(t.max()))


def axis_segment(axis: StalkAxis) -> tuple[np.ndarray, np.ndarray]:
    return (axis.centroid + axis.t_min * axis.direction,
            axis.centroid + axis.t_max * axis.direction)


def project_to_slice_plane(points, axis: StalkAxis) -> np.ndarray:
    """In-plane coordinates ``((p - c) . u, (p - c) . v)``, shape ``(n, 2)``."""
    return np.column_stack([axial_coordinates(points, axis.centroid, axis.u),
                            axial_coordinates(points, axis.centroid, axis.v)])

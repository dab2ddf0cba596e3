"""Neighbourhood queries, statistical outlier removal and DBSCAN.

All distances are evaluated with one formula, ``sqrt(((dx*dx) + dy*dy) + dz*dz)``,
accumulated left to right, so the brute-force and tree-accelerated paths return
bit-identical values.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .camera_io import PointCloud

# Below this many points kNN is computed exhaustively.
BRUTE_FORCE_LIMIT = 2000
_CHUNK = 256


@dataclass(frozen=True)
class SorParams:
    k_neighbors: int = 6
    std_ratio: float = 4.0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not self.std_ratio > 0:
            raise ValueError("std_ratio must be > 0")


@dataclass(frozen=True)
class DbscanParams:
    eps: float = 0.00025
    min_samples: int = 5

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")


@dataclass
class ClusterLabeling:
    labels: np.ndarray
    n_clusters: int

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.n_clusters)


def _row_distances(points: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Elementwise Euclidean distance between ``points[rows]`` and ``points[cols]``.

    ``rows`` and ``cols`` broadcast against each other.
    """
    sq = None
    for axis in range(points.shape[1]):
        c = points[:, axis]
        d = c[rows] - c[cols]
        sq = d * d if sq is None else sq + d * d
    return np.sqrt(sq)


def _mean_of_sorted(d: np.ndarray) -> np.ndarray:
    # left-to-right sum over ascending columns; numpy's pairwise sum would reorder
    d = np.sort(d, axis=1)
    acc = d[:, 0].copy()
    for j in range(1, d.shape[1]):
        acc += d[:, j]
    return acc / d.shape[1]


def _knn_brute(pts: np.ndarray, k: int) -> np.ndarray:
    n = len(pts)
    out = np.empty(n)
    cols = np.arange(n)[None, :]
    for start in range(0, n, _CHUNK):
        rows = np.arange(start, min(start + _CHUNK, n))[:, None]
        d = _row_distances(pts, rows, cols)
        d[np.arange(len(rows)), rows[:, 0]] = np.inf
        out[start:start + len(rows)] = _mean_of_sorted(np.partition(d, k - 1, axis=1)[:, :k])
    return out


def _knn_tree(pts: np.ndarray, k: int) -> np.ndarray:
    n = len(pts)
    tree = cKDTree(pts)
    out = np.empty(n)
    todo = np.arange(n)
    m = min(n, k + 4)
    while todo.size:
        tree_d, idx = tree.query(pts[todo], k=m)
        tree_d = tree_d.reshape(len(todo), m)
        idx = idx.reshape(len(todo), m)
        d = _row_distances(pts, todo[:, None], idx)
        d[idx == todo[:, None]] = np.inf
        kth = np.partition(d, k - 1, axis=1)[:, :k]
        # a candidate set is complete once the farthest tree hit is safely beyond
        # the exact k-th distance (guards against last-ulp disagreement and ties)
        done = (m == n) | (tree_d[:, -1] > kth.max(axis=1) * (1 + 1e-9) + 1e-300)
        out[todo[done]] = _mean_of_sorted(kth[done])
        todo = todo[~done]
        m = min(n, 2 * m)
    return out


def knn_mean_distances(points, k: int) -> np.ndarray:
    """Mean distance from each point to its ``k`` nearest other points."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    if n < BRUTE_FORCE_LIMIT:
        return _knn_brute(pts, k)
    return _knn_tree(pts, k)


def sor_filter(cloud: PointCloud, params: SorParams = SorParams()) -> PointCloud:
    """Drop points whose mean kNN distance exceeds ``mu + std_ratio * sigma``."""
    m = knn_mean_distances(cloud.points, params.k_neighbors)
    mu = m.mean()
    sigma = m.std()
    return cloud.select(m <= mu + params.std_ratio * sigma)


def eps_pairs(points: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """All index pairs ``i < j`` with distance at most ``eps``."""
    if len(points) < 2:
        empty = np.empty(0, dtype=np.intp)
        return empty, empty
    pairs = cKDTree(points).query_pairs(eps * (1 + 1e-9), output_type="ndarray")
    if len(pairs) == 0:
        empty = np.empty(0, dtype=np.intp)
        return empty, empty
    i, j = pairs[:, 0], pairs[:, 1]
    keep = _row_distances(points, i, j) <= eps
    return i[keep], j[keep]


def _cell_offsets(dim: int) -> list:
    """Non-zero cell offsets in the positive half-space whose cells can hold
    points within ``eps`` of each other, nearest first."""
    reach = math.ceil(math.sqrt(dim))
    out = []
    for off in itertools.product(range(-reach, reach + 1), repeat=dim):
        if off <= (0,) * dim:
            continue
        gap = sum(max(abs(o) - 1, 0) ** 2 for o in off)
        if gap <= dim:
            out.append(off)
    out.sort(key=lambda o: (sum(x * x for x in o), o))
    return out


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        parent = self.parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def dbscan(points, params: DbscanParams = DbscanParams()) -> ClusterLabeling:
    """Deterministic DBSCAN equivalent to the classic index-order scan.

    A point is core when at least ``min_samples`` points (itself included) lie
    within ``eps``.  Clusters are the connected components of the core graph,
    numbered by their lowest core index; a border point takes the lowest
    cluster id among its core neighbours, exactly as the sequential
    expand-on-discovery algorithm assigns it.

    Points are bucketed into cells of side ``eps / sqrt(D)``: cell-mates are
    always neighbours, so crowded cells are core without counting and core
    points sharing a cell are connected without a distance test.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.intp)
    if n == 0:
        return ClusterLabeling(labels, 0)
    pts = pts.reshape(n, -1)
    dim = pts.shape[1]
    eps, min_samples = params.eps, params.min_samples

    side = eps / math.sqrt(dim) * (1 - 1e-9)
    cells = np.floor((pts - pts.min(axis=0)) / side).astype(np.int64)
    keys, inverse, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    core = counts[inverse] >= min_samples

    # exact neighbour lists for points in sparse cells
    sparse = np.flatnonzero(~core)
    nb_src = nb_dst = np.empty(0, dtype=np.intp)
    if sparse.size:
        lists = cKDTree(pts).query_ball_point(pts[sparse], eps * (1 + 1e-9))
        lengths = np.fromiter((len(x) for x in lists), dtype=np.intp, count=len(lists))
        nb_src = np.repeat(sparse, lengths)
        nb_dst = np.fromiter(itertools.chain.from_iterable(lists), dtype=np.intp,
                             count=int(lengths.sum()))
        keep = _row_distances(pts, nb_src, nb_dst) <= eps
        nb_src, nb_dst = nb_src[keep], nb_dst[keep]
        n_nb = np.bincount(nb_src, minlength=n)
        core[sparse[n_nb[sparse] >= min_samples]] = True

    core_idx = np.flatnonzero(core)
    if core_idx.size == 0:
        return ClusterLabeling(labels, 0)

    # union neighbouring cells that share an eps-close pair of core points
    order = np.argsort(inverse[core_idx], kind="stable")
    by_cell = core_idx[order]
    cell_of = inverse[by_cell]
    starts = np.flatnonzero(np.r_[True, cell_of[1:] != cell_of[:-1]])
    core_cells = cell_of[starts]
    groups = np.split(by_cell, starts[1:])
    slot = {tuple(keys[c]): k for k, c in enumerate(core_cells)}
    dsu = _DisjointSet(len(core_cells))
    key_list = [tuple(keys[c]) for c in core_cells]
    for off in _cell_offsets(dim):
        for a, key in enumerate(key_list):
            b = slot.get(tuple(k + o for k, o in zip(key, off)))
            if b is None or dsu.find(a) == dsu.find(b):
                continue
            ga, gb = groups[a], groups[b]
            if (_row_distances(pts, ga[:, None], gb[None, :]) <= eps).any():
                dsu.union(a, b)

    roots = np.array([dsu.find(a) for a in range(len(core_cells))], dtype=np.intp)
    root_of_core = np.empty(n, dtype=np.intp)
    for a, g in enumerate(groups):
        root_of_core[g] = roots[a]
    comp_root = root_of_core[core_idx]
    _, comp = np.unique(comp_root, return_inverse=True)
    comp = comp.reshape(-1)
    n_comp = int(comp.max()) + 1
    first = np.full(n_comp, n, dtype=np.intp)
    np.minimum.at(first, comp, core_idx)
    rank = np.empty(n_comp, dtype=np.intp)
    rank[np.argsort(first, kind="stable")] = np.arange(n_comp)
    labels[core_idx] = rank[comp]

    if nb_src.size:
        # border points take the first-discovered cluster among their core neighbours
        border = ~core[nb_src] & core[nb_dst]
        best = np.full(n, n_comp, dtype=np.intp)
        np.minimum.at(best, nb_src[border], labels[nb_dst[border]])
        reached = ~core & (best < n_comp)
        labels[reached] = best[reached]
    return ClusterLabeling(labels, n_comp)


def largest_cluster(points, labeling: ClusterLabeling) -> np.ndarray:
    """Members of the most populous cluster; ties go to the lowest id."""
    pts = np.asarray(points)
    if len(labeling.labels) != len(pts):
        raise ValueError("labeling does not match points")
    if labeling.n_clusters == 0:
        return pts[:0]
    best = int(np.argmax(labeling.sizes()))
    return pts[labeling.labels == best]

"""
Point cloud primitives: storage, normalization, neighbor queries, normal
estimation and subsampling.

Every cloud is stored as read-only float64 arrays. Neighbor queries run on a
scipy cKDTree and re-score candidates with one distance expression so results
agree bit-for-bit with an exhaustive scan; ties go to the lower index.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from errors import DegenerateExtent, EmptyInput, InsufficientPoints, InvalidCloud
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

NORMAL_TOLERANCE = 1e-6
KNN_SLACK = 8


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points with optional unit normals"""

    points: np.ndarray
    normals: np.ndarray | None = None
    id: str | None = None
    degenerate: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim == 1 and points.size == 0:
            points = points.reshape(0, 3)
        if points.ndim != 2 or points.shape[1] != 3:
            raise InvalidCloud(f"points must have shape (n, 3), got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise InvalidCloud("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(points))

        if self.normals is not None:
            normals = np.asarray(self.normals, dtype=np.float64)
            if normals.shape != points.shape:
                raise InvalidCloud(
                    f"normals shape {normals.shape} does not match points {points.shape}"
                )
            lengths = np.sqrt((normals**2).sum(axis=1))
            if not np.all(np.abs(lengths - 1.0) <= NORMAL_TOLERANCE):
                raise InvalidCloud("normals must have unit length")
            object.__setattr__(self, "normals", _frozen(normals))

        if self.degenerate is not None:
            flags = np.asarray(self.degenerate, dtype=bool).copy()
            flags.setflags(write=False)
            object.__setattr__(self, "degenerate", flags)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, indices: np.ndarray) -> "PointCloud":
        """Select points (and normals) by index, in the given order"""
        indices = np.asarray(indices, dtype=np.int64)
        normals = None if self.normals is None else self.normals[indices]
        return PointCloud(self.points[indices], normals, self.id)

    def without_normals(self) -> "PointCloud":
        return PointCloud(self.points, None, self.id)


def distances_to(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Euclidean distances from every row of points to one query point"""
    diff = points - query
    return np.sqrt((diff * diff).sum(axis=1))


class NeighborIndex:
    """Balanced kd-tree over an immutable PointCloud snapshot"""

    def __init__(self, cloud: PointCloud, leaf_size: int = 16):
        if leaf_size < 1:
            raise ValueError(f"leaf size must be positive, got {leaf_size}")
        self.cloud = cloud
        self.points = cloud.points
        self.leaf_size = leaf_size
        self.tree = cKDTree(self.points, leafsize=leaf_size, balanced_tree=True)

    def __len__(self) -> int:
        return len(self.points)


def _order(dists: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Sort by distance, then by index"""
    return np.lexsort((idx, dists))


def knn(index: NeighborIndex, query, k: int) -> list[tuple[int, float]]:
    """The k nearest stored points, ascending by distance, lower index first on ties"""
    n = len(index)
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if k > n:
        raise InsufficientPoints(f"knn asked for {k} neighbours of a {n}-point cloud")
    query = np.asarray(query, dtype=np.float64)

    tree_dists, _ = index.tree.query(query, k=k)
    kth = float(np.atleast_1d(tree_dists)[-1])
    # every point tied with the k-th must be a candidate
    candidates = np.asarray(
        index.tree.query_ball_point(query, kth * (1 + 1e-9) + 1e-12), dtype=np.int64
    )
    dists = distances_to(index.points[candidates], query)
    order = _order(dists, candidates)[:k]
    return [(int(candidates[i]), float(dists[i])) for i in order]


def knn_batch(index: NeighborIndex, queries: np.ndarray, k: int) -> np.ndarray:
    """(m, k) neighbour indices for many queries, with the same ordering as knn"""
    n = len(index)
    if k > n:
        raise InsufficientPoints(f"knn asked for {k} neighbours of a {n}-point cloud")
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    wide = min(n, k + KNN_SLACK)
    _, candidates = index.tree.query(queries, k=wide)
    candidates = candidates.reshape(len(queries), wide)
    diff = index.points[candidates] - queries[:, None, :]
    dists = np.sqrt((diff * diff).sum(axis=2))
    order = np.lexsort((candidates, dists), axis=-1)
    candidates = np.take_along_axis(candidates, order, axis=1)
    dists = np.take_along_axis(dists, order, axis=1)
    # rows whose tie at the k-th distance may run past the widened query
    unsure = np.zeros(len(queries), dtype=bool)
    if wide < n:
        unsure = dists[:, -1] <= dists[:, k - 1] * (1 + 1e-9) + 1e-12
    for row in np.flatnonzero(unsure):
        candidates[row, :k] = [i for i, _ in knn(index, queries[row], k)]
    return candidates[:, :k]


def radius_neighbors(
    index: NeighborIndex, query, r: float, exclude: int | None = None
) -> list[int]:
    """Indices of all points within distance r of query, ascending.

    Pass ``exclude`` when the query is itself a stored point.
    """
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    query = np.asarray(query, dtype=np.float64)
    candidates = np.asarray(
        index.tree.query_ball_point(query, r * (1 + 1e-9)), dtype=np.int64
    )
    if candidates.size == 0:
        return []
    dists = distances_to(index.points[candidates], query)
    keep = np.sort(candidates[dists <= r])
    return [int(i) for i in keep if i != exclude]


def radius_pairs(index: NeighborIndex, r: float) -> tuple[np.ndarray, np.ndarray]:
    """All ordered pairs (i, j), i != j, with distance <= r, and their distances.

    Pairs are sorted by (i, j).
    """
    pairs = index.tree.query_pairs(r * (1 + 1e-9), output_type="ndarray")
    if pairs.size == 0:
        return np.empty((0, 2), dtype=np.int64), np.empty(0)
    diff = index.points[pairs[:, 1]] - index.points[pairs[:, 0]]
    dists = np.sqrt((diff * diff).sum(axis=1))
    keep = dists <= r
    pairs, dists = pairs[keep], dists[keep]
    both = np.concatenate([pairs, pairs[:, ::-1]])
    both_d = np.concatenate([dists, dists])
    order = np.lexsort((both[:, 1], both[:, 0]))
    return both[order].astype(np.int64), both_d[order]


def normalize_unit(cloud: PointCloud) -> tuple[PointCloud, float, np.ndarray]:
    """Center on the centroid and scale the farthest point to distance 1.

    Returns the normalized cloud, the applied scale and the original centroid,
    so ``original = normalized / scale + centroid``.
    """
    if len(cloud) == 0:
        raise EmptyInput("cannot normalize an empty cloud")
    centroid = cloud.points.mean(axis=0)
    shifted = cloud.points - centroid
    extent = float(np.sqrt((shifted * shifted).sum(axis=1)).max())
    if extent <= 1e-12:
        raise DegenerateExtent("all points coincide; scale is undefined")
    scale = 1.0 / extent
    normalized = PointCloud(shifted * scale, cloud.normals, cloud.id)
    return normalized, scale, centroid


def estimate_normals(cloud: PointCloud, k: int) -> PointCloud:
    """Least-eigenvalue eigenvector of each k-NN covariance, oriented away
    from the cloud centroid.

    Rank-deficient neighbourhoods get +z and are flagged in ``degenerate``.
    """
    n = len(cloud)
    if k < 3:
        raise ValueError(f"k must be at least 3, got {k}")
    if n < k:
        raise InsufficientPoints(f"normal estimation needs {k} points, got {n}")

    index = NeighborIndex(cloud)
    neighbours = knn_batch(index, cloud.points, k)
    local = cloud.points[neighbours]
    centered = local - local.mean(axis=1, keepdims=True)
    covs = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(covs)
    normals = eigvecs[:, :, 0].copy()

    largest = eigvals[:, 2]
    degenerate = (largest <= 1e-15) | (eigvals[:, 1] <= 1e-10 * largest)
    normals[degenerate] = (0.0, 0.0, 1.0)

    outward = cloud.points - cloud.points.mean(axis=0)
    flip = ((normals * outward).sum(axis=1) < 0) & ~degenerate
    normals[flip] *= -1.0
    normals /= np.sqrt((normals * normals).sum(axis=1, keepdims=True))

    if degenerate.any():
        logger.warning(
            f"{int(degenerate.sum())} of {n} neighbourhoods are rank-deficient; "
            "normals set to +z"
        )
    return PointCloud(cloud.points, normals, cloud.id, degenerate)


def subsample_random(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Uniform sample without replacement, deterministic for a given seed"""
    if n < 1:
        raise ValueError(f"sample size must be positive, got {n}")
    if n > len(cloud):
        raise InsufficientPoints(f"cannot draw {n} points from {len(cloud)}")
    rng = np.random.default_rng(seed)
    return cloud.subset(rng.choice(len(cloud), size=n, replace=False))


def farthest_point_indices(points: np.ndarray, n: int, start: int = 0) -> np.ndarray:
    """Greedy max-min selection order starting at ``start``"""
    selected = np.empty(n, dtype=np.int64)
    selected[0] = start
    nearest = distances_to(points, points[start])
    nearest[start] = -1.0
    for i in range(1, n):
        # argmax returns the lowest index among ties
        pick = int(np.argmax(nearest))
        selected[i] = pick
        nearest = np.minimum(nearest, distances_to(points, points[pick]))
        # chosen points stay at -1; their duplicates remain eligible
        nearest[pick] = -1.0
    return selected


def farthest_point_sample(cloud: PointCloud, n: int, start: int = 0) -> PointCloud:
    """Farthest point sampling; output keeps the selection order"""
    if n < 1:
        raise ValueError(f"sample size must be positive, got {n}")
    if n > len(cloud):
        raise InsufficientPoints(f"cannot select {n} points from {len(cloud)}")
    if not 0 <= start < len(cloud):
        raise ValueError(f"start index {start} out of range")
    return cloud.subset(farthest_point_indices(cloud.points, n, start))

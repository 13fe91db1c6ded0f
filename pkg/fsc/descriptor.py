"""
FPFH shape descriptor and the Shannon-entropy information analysis.

A cloud-level histogram is the sum of per-point FPFHs, normalized to one.
Its entropy (natural log) measures how much shape information a cloud
carries; retention curves compare subsampled (or subsampled then completed)
clouds to the full cloud.
"""

import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from errors import DegenerateHistogram, InsufficientPoints, NotNormalized
from geom import NeighborIndex, PointCloud, estimate_normals, radius_pairs, subsample_random

logger = logging.getLogger(__name__)

DEFAULT_RADIUS = 0.05
DEFAULT_BINS = 36
DEFAULT_VOXEL = 0.04
NORMAL_NEIGHBOURS = 10


@dataclass(frozen=True, eq=False)
class FpfhHistogram:
    """Bins laid out as [alpha (B) | phi (B) | theta (B)]"""

    bins: np.ndarray
    B: int
    normalized: bool = True
    empty: bool = False

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.float64)
        if bins.shape != (3 * self.B,):
            raise ValueError(f"expected {3 * self.B} bins, got {bins.shape}")
        if np.any(bins < 0):
            raise ValueError("histogram bins must be non-negative")
        if self.normalized and not self.empty and abs(bins.sum() - 1.0) > 1e-9:
            raise NotNormalized(f"bins sum to {bins.sum()}, expected 1")
        bins.setflags(write=False)
        object.__setattr__(self, "bins", bins)


@dataclass(frozen=True)
class EntropyReport:
    S: float
    n_points: int
    B: int
    radius: float
    voxel: float


@dataclass(frozen=True)
class RetentionCurve:
    sizes: list[int]
    mean_fraction: list[float]
    trials: int
    seed: int
    mean_S: list[float] = field(default_factory=list)
    stddev: list[float] = field(default_factory=list)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the members of each occupied voxel by their centroid.

    The grid is anchored at the origin; output is ordered by voxel key.
    Normals, when present, are averaged per voxel and renormalized.
    """
    if voxel <= 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    if len(cloud) == 0:
        return cloud.without_normals()
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, first, inverse, counts = np.unique(
        keys, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    normals = None
    if cloud.has_normals:
        normals = np.zeros((len(counts), 3))
        np.add.at(normals, inverse, cloud.normals)
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        # opposed normals cancel; keep the first member's
        averaged = normals / np.maximum(lengths, 1e-9)
        normals = np.where(lengths > 1e-9, averaged, cloud.normals[first])
    return PointCloud(sums / counts[:, None], normals, cloud.id)


def pair_features(
    p_s: np.ndarray, n_s: np.ndarray, p_t: np.ndarray, n_t: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Darboux-frame angles (alpha, phi, theta) for rows of point pairs.

    The source is swapped with the target when the target normal makes the
    smaller angle with the connecting line.
    """
    dp = p_t - p_s
    dist = np.sqrt((dp * dp).sum(axis=1))
    unit = dp / dist[:, None]
    a_s = (n_s * unit).sum(axis=1)
    a_t = (n_t * unit).sum(axis=1)

    swap = np.abs(a_s) < np.abs(a_t)
    n1 = np.where(swap[:, None], n_t, n_s)
    n2 = np.where(swap[:, None], n_s, n_t)
    dp = np.where(swap[:, None], -dp, dp)
    phi = np.where(swap, -a_t, a_s)

    v = np.cross(dp, n1)
    v_norm = np.sqrt((v * v).sum(axis=1))
    valid = v_norm > 0
    v = v / np.where(valid, v_norm, 1.0)[:, None]
    w = np.cross(n1, v)
    alpha = (v * n2).sum(axis=1)
    theta = np.arctan2((w * n2).sum(axis=1), (n1 * n2).sum(axis=1))

    zero = np.zeros_like(alpha)
    return (
        np.where(valid, alpha, zero),
        np.where(valid, phi, zero),
        np.where(valid, theta, zero),
    )


def bin_indices(alpha, phi, theta, B: int) -> np.ndarray:
    """Column indices into the 3B histogram for each pair"""
    a = np.floor((alpha + 1.0) * 0.5 * B)
    p = np.floor((phi + 1.0) * 0.5 * B)
    t = np.floor((theta / (2.0 * math.pi) + 0.5) * B)
    a, p, t = (np.clip(x, 0, B - 1).astype(np.int64) for x in (a, p, t))
    return np.stack([a, B + p, 2 * B + t], axis=1)


def compute_fpfh(cloud: PointCloud, radius: float, B: int) -> FpfhHistogram:
    """Cloud-level FPFH: sum of per-point FPFHs, normalized to sum 1.

    FPFH(p) = SPFH(p) + (1/k) * sum_i SPFH(p_i) / w_i with w_i the distance
    to neighbour p_i. Coincident points are not neighbours. A cloud with no
    neighbour pair at all gives an all-zero histogram flagged ``empty``.
    """
    if not cloud.has_normals:
        raise ValueError("compute_fpfh needs a cloud with normals")
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if B < 2:
        raise ValueError(f"need at least 2 bins per feature, got {B}")
    n = len(cloud)
    if n < 2:
        raise InsufficientPoints(f"FPFH needs at least 2 points, got {n}")

    pairs, dists = radius_pairs(NeighborIndex(cloud), radius)
    keep = dists > 0
    pairs, dists = pairs[keep], dists[keep]
    if len(pairs) == 0:
        logger.debug(f"No neighbour pairs within {radius} among {n} points")
        return FpfhHistogram(np.zeros(3 * B), B, normalized=True, empty=True)

    src, dst = pairs[:, 0], pairs[:, 1]
    pts, nrm = cloud.points, cloud.normals
    alpha, phi, theta = pair_features(pts[src], nrm[src], pts[dst], nrm[dst])
    columns = bin_indices(alpha, phi, theta, B)

    k = np.bincount(src, minlength=n).astype(np.float64)
    spfh = np.zeros((n, 3 * B))
    increment = 1.0 / k[src]
    for feature in range(3):
        np.add.at(spfh, (src, columns[:, feature]), increment)

    # sum over p of FPFH(p) regrouped by the neighbour whose SPFH is added
    carried = np.bincount(dst, weights=1.0 / (k[src] * dists), minlength=n)
    total = (spfh * (1.0 + carried)[:, None]).sum(axis=0)
    return FpfhHistogram(total / total.sum(), B)


def fpfh_entropy(hist: FpfhHistogram) -> float:
    """Shannon entropy in nats; empty bins contribute 0"""
    if hist.empty:
        return 0.0
    if not hist.normalized or abs(hist.bins.sum() - 1.0) > 1e-9:
        raise NotNormalized("entropy needs a normalized histogram")
    p = hist.bins[hist.bins > 0]
    return float(-(p * np.log(p)).sum())


def surface_lattice(cloud: PointCloud, voxel: float) -> PointCloud:
    """Normals estimated at full resolution, then one representative per voxel.

    Clouds under four points cannot carry normals and come back without them.
    """
    n = len(cloud)
    if n < 4:
        return voxel_downsample(cloud.without_normals(), voxel)
    with_normals = estimate_normals(cloud, min(NORMAL_NEIGHBOURS, n - 1))
    return voxel_downsample(with_normals, voxel)


def lattice_entropy(
    lattice: PointCloud, radius: float, B: int, voxel: float
) -> EntropyReport:
    """FPFH entropy of a cloud whose normals are already in place"""
    n = len(lattice)
    if n < 2 or not lattice.has_normals:
        logger.debug(f"Only {n} voxel representatives; entropy taken as 0")
        return EntropyReport(0.0, n, B, radius, voxel)
    S = fpfh_entropy(compute_fpfh(lattice, radius, B))
    return EntropyReport(S, n, B, radius, voxel)


def cloud_entropy(
    cloud: PointCloud,
    radius: float = DEFAULT_RADIUS,
    B: int = DEFAULT_BINS,
    voxel: float = DEFAULT_VOXEL,
) -> EntropyReport:
    """Estimate normals, voxel-downsample, and take the FPFH entropy"""
    return lattice_entropy(surface_lattice(cloud, voxel), radius, B, voxel)


def retention_curve(
    cloud: PointCloud,
    sizes: list[int],
    trials: int,
    seed: int,
    radius: float = DEFAULT_RADIUS,
    B: int = DEFAULT_BINS,
    voxel: float = DEFAULT_VOXEL,
    workers: int = 1,
) -> RetentionCurve:
    """Mean entropy fraction S(subsample) / S(cloud) at each size.

    The cloud is reduced once to its voxel lattice, with normals estimated
    on the full cloud and averaged per voxel. Trial t draws ``size`` lattice
    points with seed ``seed + t`` and keeps their normals, so only the
    neighbour structure thins out. Sizes at or above the lattice size use
    the whole lattice and score exactly 1.
    """
    if not sizes or any(b >= a for a, b in zip(sizes, sizes[1:], strict=False)):
        raise ValueError("sizes must be non-empty and strictly descending")
    if sizes[0] > len(cloud):
        raise InsufficientPoints(f"largest size {sizes[0]} exceeds cloud {len(cloud)}")
    if trials < 1:
        raise ValueError(f"need at least one trial, got {trials}")

    lattice = surface_lattice(cloud, voxel)
    reference = lattice_entropy(lattice, radius, B, voxel).S
    if reference <= 0:
        raise DegenerateHistogram(
            f"cloud {cloud.id or ''} has zero FPFH entropy at radius {radius}"
        )
    logger.debug(f"{len(cloud)} points reduce to {len(lattice)} voxel representatives")

    def trial_entropy(size: int, t: int) -> float:
        sub = subsample_random(lattice, size, seed + t)
        return lattice_entropy(sub, radius, B, voxel).S

    mean_fraction, mean_S, stddev = [], [], []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for size in sizes:
            if size >= len(lattice):
                values = [reference] * trials
            else:
                values = list(pool.map(lambda t, s=size: trial_entropy(s, t), range(trials)))
            fractions = np.asarray(values) / reference
            mean_fraction.append(float(fractions.mean()))
            mean_S.append(float(np.mean(values)))
            stddev.append(float(fractions.std()))
            logger.debug(f"size={size} mean fraction={mean_fraction[-1]:.4f}")

    return RetentionCurve(list(sizes), mean_fraction, trials, seed, mean_S, stddev)


def completion_curve(
    cloud: PointCloud,
    sizes: list[int],
    trials: int,
    seed: int,
    complete: Callable[[PointCloud], PointCloud],
    radius: float = DEFAULT_RADIUS,
    B: int = DEFAULT_BINS,
    voxel: float = DEFAULT_VOXEL,
) -> list[float]:
    """Mean entropy fraction S(complete(subsample)) / S(cloud) at each size.

    Trial t draws ``size`` points of the raw cloud with seed ``seed + t`` and
    hands them to ``complete``; the completed cloud gets its own normals.
    """
    if not sizes:
        raise ValueError("sizes must be non-empty")
    if trials < 1:
        raise ValueError(f"need at least one trial, got {trials}")
    reference = cloud_entropy(cloud, radius, B, voxel).S
    if reference <= 0:
        raise DegenerateHistogram(
            f"cloud {cloud.id or ''} has zero FPFH entropy at radius {radius}"
        )
    raw = cloud.without_normals()
    fractions = []
    for size in sizes:
        values = [
            cloud_entropy(complete(subsample_random(raw, size, seed + t)), radius, B, voxel).S
            for t in range(trials)
        ]
        fractions.append(float(np.mean(values)) / reference)
        logger.debug(f"size={size} completed fraction={fractions[-1]:.4f}")
    return fractions


def average_curves(curves: list[RetentionCurve]) -> RetentionCurve:
    """Average retention curves computed on several clouds over the same sizes"""
    if not curves:
        raise ValueError("no curves to average")
    sizes = curves[0].sizes
    if any(c.sizes != sizes for c in curves):
        raise ValueError("curves must share the same sizes")
    fractions = np.asarray([c.mean_fraction for c in curves])
    entropies = np.asarray([c.mean_S for c in curves])
    return RetentionCurve(
        sizes=list(sizes),
        mean_fraction=fractions.mean(axis=0).tolist(),
        trials=curves[0].trials,
        seed=curves[0].seed,
        mean_S=entropies.mean(axis=0).tolist(),
        stddev=fractions.std(axis=0).tolist(),
    )

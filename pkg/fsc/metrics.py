"""
Distances between point clouds: Chamfer (L1 and squared L2), exact and
entropic EMD, and Minimum Matching Distance.

Evaluation metrics work on PointCloud in float64. The torch functions at the
bottom are the differentiable counterparts used by the training loss.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch
from errors import EmptyInput, EmptyReferenceSet, SizeMismatch
from geom import NeighborIndex, PointCloud
from pydantic import BaseModel, Field
from scipy.optimize import linear_sum_assignment

logger = logging.getLogger(__name__)

L1_CANDIDATES = 8
SQRT3 = math.sqrt(3.0)
REPORT_SCALE = 1000.0


@dataclass(frozen=True, eq=False)
class Assignment:
    """Bijection source index -> target index and its mean matched distance"""

    mapping: np.ndarray
    cost: float


@dataclass(frozen=True)
class TransportEstimate:
    cost: float
    converged: bool
    iterations: int
    marginal_error: float


class MetricsReport(BaseModel):
    """Mean metric values multiplied by 1000"""

    category: str = "all"
    resolution: int | None = None
    cd_l1: float | None = Field(None, ge=0)
    cd_l2: float | None = Field(None, ge=0)
    emd: float | None = Field(None, ge=0)
    mmd: float | None = Field(None, ge=0)
    count: int = Field(0, ge=0)


def _check_pair(a: PointCloud, b: PointCloud):
    if len(a) == 0 or len(b) == 0:
        raise EmptyInput("metric needs two non-empty clouds")


def _nearest_l2_squared(src: np.ndarray, target: PointCloud) -> np.ndarray:
    index = NeighborIndex(target)
    _, idx = index.tree.query(src, k=1)
    diff = src - target.points[idx]
    return (diff * diff).sum(axis=1)


def _nearest_l1(src: np.ndarray, target: PointCloud) -> np.ndarray:
    index = NeighborIndex(target)
    k = min(L1_CANDIDATES, len(target))
    l2, idx = index.tree.query(src, k=k)
    l2 = l2.reshape(len(src), k)
    idx = idx.reshape(len(src), k)
    l1 = np.abs(src[:, None, :] - target.points[idx]).sum(axis=2).min(axis=1)

    # the L1 nearest lies within sqrt(3) * (L2 nearest distance); widen when
    # the candidate list does not cover that ball
    radius = SQRT3 * l2[:, 0]
    short = (k < len(target)) & (l2[:, -1] < radius)
    for i in np.flatnonzero(short):
        ball = index.tree.query_ball_point(src[i], radius[i] * (1 + 1e-9) + 1e-12)
        cands = target.points[np.asarray(ball, dtype=np.int64)]
        l1[i] = np.abs(src[i] - cands).sum(axis=1).min()
    return l1


def chamfer_l1(a: PointCloud, b: PointCloud) -> float:
    """Sum of both directional means of nearest L1 point distances"""
    _check_pair(a, b)
    return float(_nearest_l1(a.points, b).mean()) + float(
        _nearest_l1(b.points, a).mean()
    )


def chamfer_l2(a: PointCloud, b: PointCloud) -> float:
    """Sum of both directional means of nearest squared L2 distances"""
    _check_pair(a, b)
    return float(_nearest_l2_squared(a.points, b).mean()) + float(
        _nearest_l2_squared(b.points, a).mean()
    )


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def emd(a: PointCloud, b: PointCloud) -> tuple[float, Assignment]:
    """Exact EMD by shortest-augmenting-path assignment on the distance matrix"""
    if len(a) != len(b):
        raise SizeMismatch(f"EMD needs equal sizes, got {len(a)} and {len(b)}")
    _check_pair(a, b)
    if len(a) > 512:
        logger.debug(f"Exact EMD on {len(a)} points is cubic; this may be slow")
    cost = pairwise_distances(a.points, b.points)
    rows, cols = linear_sum_assignment(cost)
    mapping = np.empty(len(a), dtype=np.int64)
    mapping[rows] = cols
    value = float(cost[rows, cols].mean())
    return value, Assignment(mapping, value)


def sinkhorn_potentials(
    cost: torch.Tensor, eps: float, iters: int, tol: float = 1e-9
) -> tuple[torch.Tensor, torch.Tensor, int, float]:
    """Log-domain Sinkhorn with uniform marginals on a (..., n, m) cost.

    Returns potentials f, g, the iterations run and the final column
    marginal error.
    """
    n, m = cost.shape[-2], cost.shape[-1]
    log_a = -math.log(n)
    log_b = -math.log(m)
    f = torch.zeros(cost.shape[:-1], dtype=cost.dtype)
    g = torch.zeros(cost.shape[:-2] + (m,), dtype=cost.dtype)
    error = float("inf")
    it = 0
    for it in range(1, iters + 1):
        f = -eps * torch.logsumexp((g.unsqueeze(-2) - cost) / eps, dim=-1) + eps * log_a
        g = -eps * torch.logsumexp((f.unsqueeze(-1) - cost) / eps, dim=-2) + eps * log_b
        if it % 10 == 0 or it == iters:
            plan = torch.exp((f.unsqueeze(-1) + g.unsqueeze(-2) - cost) / eps)
            error = float((plan.sum(dim=-1) - math.exp(log_a)).abs().sum())
            if error < tol:
                break
    return f, g, it, error


def transport_plan(cost: torch.Tensor, f: torch.Tensor, g: torch.Tensor, eps: float):
    return torch.exp((f.unsqueeze(-1) + g.unsqueeze(-2) - cost) / eps)


def emd_approx(
    a: PointCloud, b: PointCloud, eps: float = 0.005, iters: int = 200
) -> TransportEstimate:
    """Entropic EMD: transport cost of the Sinkhorn plan between uniform masses"""
    if len(a) != len(b):
        raise SizeMismatch(f"EMD needs equal sizes, got {len(a)} and {len(b)}")
    _check_pair(a, b)
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    cost = torch.from_numpy(pairwise_distances(a.points, b.points))
    f, g, used, error = sinkhorn_potentials(cost, eps, iters)
    plan = transport_plan(cost, f, g, eps)
    value = float((plan * cost).sum())
    converged = error < 1e-6
    if not converged:
        logger.warning(
            f"Sinkhorn did not converge in {iters} iterations "
            f"(eps={eps}, marginal error {error:.2e})"
        )
    return TransportEstimate(value, converged, used, error)


def mmd(output: PointCloud, references: list[PointCloud]) -> tuple[float, int]:
    """Minimum CD-l2 to any reference and the lowest index attaining it"""
    if not references:
        raise EmptyReferenceSet("MMD needs at least one reference cloud")
    best, best_index = math.inf, -1
    for i, reference in enumerate(references):
        value = chamfer_l2(output, reference)
        if value < best:
            best, best_index = value, i
    return best, best_index


def evaluate_pairs(
    pairs: list[tuple[PointCloud, PointCloud]], metric, workers: int = 1
) -> list[float]:
    """Apply a metric to many cloud pairs; results keep the input order"""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda pair: metric(*pair), pairs))


# Differentiable counterparts (batched, shape (B, n, 3))


def chamfer_l2_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batch mean of squared-L2 Chamfer distances"""
    diff = a.unsqueeze(-2) - b.unsqueeze(-3)
    d = (diff * diff).sum(dim=-1)
    forward = d.min(dim=-1).values.mean(dim=-1)
    backward = d.min(dim=-2).values.mean(dim=-1)
    return (forward + backward).mean()


def chamfer_l1_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    diff = (a.unsqueeze(-2) - b.unsqueeze(-3)).abs().sum(dim=-1)
    forward = diff.min(dim=-1).values.mean(dim=-1)
    backward = diff.min(dim=-2).values.mean(dim=-1)
    return (forward + backward).mean()


def emd_approx_torch(
    a: torch.Tensor, b: torch.Tensor, eps: float, iters: int
) -> tuple[torch.Tensor, bool]:
    """Batch mean entropic EMD, differentiable in the coordinates.

    Potentials are solved without gradient tracking; the cost is then
    differentiated with the plan held at that solution.
    """
    if a.shape != b.shape:
        raise SizeMismatch(f"EMD needs equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    diff = a.unsqueeze(-2) - b.unsqueeze(-3)
    cost = torch.sqrt((diff * diff).sum(dim=-1) + 1e-12)
    with torch.no_grad():
        f, g, _, error = sinkhorn_potentials(cost.detach(), eps, iters, tol=1e-6)
        plan = transport_plan(cost.detach(), f, g, eps)
    per_sample = (plan * cost).sum(dim=(-2, -1))
    return per_sample.mean(), error < 1e-6 * max(1, a.shape[0])

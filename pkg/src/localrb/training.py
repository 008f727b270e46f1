"""Training sets: fixed lattices and point sets adapted to a metric field.

Adapted sets are built by farthest-point sampling under the metric
``M(mu) / r(mu)^2`` from a dense uniform pool, followed by a few Lloyd-type
relaxation sweeps. An alternative generator refines a coarse lattice by
splitting the metrically longest Delaunay edges at their midpoints, the way a
mesh adapter refines a triangulation. The box corners are always part of the
set so that its convex hull is the whole parameter domain.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .metric import MetricField, ParameterDomain

log = logging.getLogger(__name__)

__all__ = ["TrainingSet", "lattice_training_set", "generation_metric", "generate_training_set",
           "bisection_training_set", "nearest_neighbor_cv"]

#: relative isotropic floor added to generation tensors (bounds anisotropy at 1e3)
FLOOR = 1e-3
#: Euclidean candidates examined when assigning pool points to their nearest site
ASSIGN_CANDIDATES = 64


@dataclass(frozen=True, eq=False)
class TrainingSet:
    points: np.ndarray
    generation: int = 0

    def __len__(self) -> int:
        return self.points.shape[0]


def lattice_training_set(domain: ParameterDomain, n) -> TrainingSet:
    """Regular ``n^p`` lattice including the box faces."""
    return TrainingSet(domain.lattice(n), 0)


def generation_metric(field: MetricField, X) -> np.ndarray:
    """Tensors ``M / r^2`` at ``X`` with a small isotropic floor.

    The floor is ``FLOOR`` times the mean eigenvalue at each point, plus a
    global guard for points where the metric vanishes altogether.
    """
    M, r = field.evaluate(X)
    p = M.shape[-1]
    if field.isotropic:
        M = np.broadcast_to(np.eye(p), M.shape).copy()
    r = np.where(r > 0, r, np.inf)
    G = M / (r**2)[:, None, None]
    tr = np.trace(G, axis1=1, axis2=2) / p
    guard = 1e-12 * max(tr.max(), 1e-300)
    G = G + ((FLOOR * tr + guard)[:, None, None]) * np.eye(p)
    if not np.all(np.isfinite(G)) or tr.max() <= 0:
        G = np.broadcast_to(np.eye(p), M.shape).copy()
    return G


def _quad(D, G):
    """``d^T G d`` for symmetric ``G``, row by row; loops over the few entries of ``G``."""
    p = D.shape[-1]
    out = G[..., 0, 0] * D[..., 0] ** 2
    for i in range(p):
        if i:
            out += G[..., i, i] * D[..., i] ** 2
        for j in range(i + 1, p):
            out += 2.0 * G[..., i, j] * D[..., i] * D[..., j]
    return out


def _dist_to_one(P, GP, q, Gq):
    D = P - q
    a = _quad(D, GP)
    b = ((D @ Gq) * D).sum(axis=-1)
    return 0.5 * np.sqrt(np.maximum(a, 0.0)) + 0.5 * np.sqrt(np.maximum(b, 0.0))


def _dist_pairs(P, GP, Q, GQ):
    """Distances between matching rows ``P[..., :]`` and ``Q[..., :]``."""
    D = Q - P
    a = _quad(D, GP)
    b = _quad(D, GQ)
    return 0.5 * np.sqrt(np.maximum(a, 0.0)) + 0.5 * np.sqrt(np.maximum(b, 0.0))


def _assign(pool, Gpool, sites, Gsites):
    k = min(ASSIGN_CANDIDATES, sites.shape[0])
    _, cand = cKDTree(sites).query(pool, k=k)
    cand = cand.reshape(pool.shape[0], k)
    d = _dist_pairs(pool[:, None, :], Gpool[:, None], sites[cand], Gsites[cand])
    j = np.argmin(d, axis=1)
    return cand[np.arange(pool.shape[0]), j], d[np.arange(pool.shape[0]), j]


def nearest_neighbor_cv(points, G) -> float:
    """Coefficient of variation of metric nearest-neighbor distances."""
    if points.shape[0] < 3:
        return 0.0
    k = min(ASSIGN_CANDIDATES, points.shape[0])
    _, cand = cKDTree(points).query(points, k=k)
    cand = cand[:, 1:]
    d = _dist_pairs(points[:, None, :], G[:, None], points[cand], G[cand])
    nn = d.min(axis=1)
    return float(nn.std() / nn.mean()) if nn.mean() > 0 else 0.0


def generate_training_set(
    field: MetricField,
    Q: int,
    domain: ParameterDomain,
    rng: np.random.Generator | None = None,
    pool_factor: int = 50,
    pool_cap: int = 20000,
    sweeps: int = 3,
    generation: int = 0,
) -> TrainingSet:
    """``Q`` points spread evenly under the metric ``M(mu) / r(mu)^2``.

    Parameters
    ----------
    field : MetricField
        Source of ``M`` and ``r``; an isotropic field gives uniform points.
    Q : int
        Number of points, at least ``2**p`` (the corners are always included).
    rng : numpy.random.Generator, optional
        Source of the candidate pool; a fixed default seed is used otherwise.
    pool_factor, pool_cap : int
        The candidate pool holds ``min(pool_factor * Q, pool_cap)`` uniform
        points (never fewer than ``2 * Q``).
    sweeps : int
        Lloyd relaxation sweeps after farthest-point sampling.
    """
    p = domain.dim
    corners = domain.corners()
    if Q < corners.shape[0]:
        raise ValueError(f"Q={Q} is below the number of box corners {corners.shape[0]}")
    if Q == corners.shape[0]:
        return TrainingSet(corners, generation)
    rng = np.random.default_rng(0) if rng is None else rng
    n_pool = max(min(pool_factor * Q, pool_cap), 2 * Q)
    pool = np.vstack([corners, domain.sample(rng, n_pool)])
    G = generation_metric(field, pool)

    # farthest-point sampling, seeded with the corners
    n_c = corners.shape[0]
    chosen = np.zeros(pool.shape[0], dtype=bool)
    chosen[:n_c] = True
    mind = np.full(pool.shape[0], np.inf)
    for c in range(n_c):
        mind = np.minimum(mind, _dist_to_one(pool, G, pool[c], G[c]))
    picks = list(range(n_c))
    for _ in range(Q - n_c):
        mind[chosen] = -1.0
        j = int(np.argmax(mind))
        chosen[j] = True
        picks.append(j)
        mind = np.minimum(mind, _dist_to_one(pool, G, pool[j], G[j]))
    sites = pool[picks].copy()
    Gsites = G[picks].copy()

    # Lloyd relaxation: move each free site to the mean of its pool cell
    for _ in range(sweeps):
        owner, _ = _assign(pool, G, sites, Gsites)
        counts = np.bincount(owner, minlength=Q)
        sums = np.zeros_like(sites)
        np.add.at(sums, owner, pool)
        move = counts > 0
        move[:n_c] = False
        sites[move] = sums[move] / counts[move, None]
        sites = np.clip(sites, domain.lower, domain.upper)
        Gsites = generation_metric(field, sites)

    log.debug("training set Q=%d: metric nearest-neighbor CV %.3f", Q, nearest_neighbor_cv(sites, Gsites))
    return TrainingSet(sites, generation)


def bisection_training_set(
    field: MetricField,
    Q: int,
    domain: ParameterDomain,
    start: int = 5,
    batch: int = 8,
    generation: int = 0,
) -> TrainingSet:
    """``Q`` vertices of a mesh refined by metric edge bisection.

    Starting from a ``start^p`` lattice (or the corners when that is already
    too many points), each round triangulates the current points and splits
    the longest edges under ``M(mu) / r(mu)^2`` at their midpoints. Splitting
    midpoints of a lattice keeps every point on a dyadic grid, so lines
    through lattice nodes with rational slopes receive points exactly on
    them. The method needs no random numbers.

    Parameters
    ----------
    field : MetricField
        Source of ``M`` and ``r``.
    Q : int
        Number of points, at least ``2**p``.
    start : int
        Points per direction of the initial lattice.
    batch : int
        Each round splits at most ``1/batch`` of the current edges.
    """
    p = domain.dim
    corners = domain.corners()
    if Q < corners.shape[0]:
        raise ValueError(f"Q={Q} is below the number of box corners {corners.shape[0]}")
    pts = domain.lattice(start) if start**p <= Q else corners
    if pts.shape[0] == Q:
        return TrainingSet(pts, generation)
    G = generation_metric(field, pts)
    pairs = [(i, j) for i in range(p + 1) for j in range(i + 1, p + 1)]
    while pts.shape[0] < Q:
        if p == 1:
            order = np.argsort(pts[:, 0], kind="stable")
            simplices = np.column_stack([order[:-1], order[1:]])
        else:
            simplices = Delaunay(pts).simplices
        edges = np.unique(np.sort(np.vstack([simplices[:, pair] for pair in pairs]), axis=1), axis=0)
        length = _dist_pairs(pts[edges[:, 0]], G[edges[:, 0]], pts[edges[:, 1]], G[edges[:, 1]])
        k = min(Q - pts.shape[0], max(1, edges.shape[0] // batch))
        # a Delaunay edge never passes through another vertex, so the midpoints are new
        split = edges[np.argsort(-length, kind="stable")[:k]]
        mid = 0.5 * (pts[split[:, 0]] + pts[split[:, 1]])
        pts = np.vstack([pts, mid])
        G = np.vstack([G, generation_metric(field, mid)])
    log.debug("bisection training set Q=%d: metric nearest-neighbor CV %.3f", Q, nearest_neighbor_cv(pts, G))
    return TrainingSet(pts, generation)

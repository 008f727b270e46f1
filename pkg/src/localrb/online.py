"""Online stage: nearest snapshots, Gram-only orthonormalization, reduced solve.

The helpers working on stacks (``select_local``, ``local_bases``,
``reduced_blocks``) are shared with the offline sweeps, which evaluate many
training points at once.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .metric import pairwise_distances
from .ortho import DEPENDENCE_TOL, orthonormalize

__all__ = [
    "EXTRA_CANDIDATES",
    "ReducedSystem",
    "ReducedSolution",
    "SnapshotsUnavailable",
    "OnlineModel",
    "select_local",
    "local_bases",
    "reduced_blocks",
    "assemble_reduced",
    "online_solve",
]

#: candidates beyond ``N`` kept in reserve for replacing near-dependent snapshots
EXTRA_CANDIDATES = 4


class SnapshotsUnavailable(RuntimeError):
    pass


def select_local(dist: np.ndarray, N: int, extra: int = EXTRA_CANDIDATES):
    """Nearest-first candidate indices and radii from a ``(B, K)`` distance array.

    Ties are broken by sample index (earlier wins). Returns ``(order, radius)``
    where ``order`` has ``min(N + extra, K)`` columns and ``radius`` is the
    distance to the ``min(N, K)``-th nearest sample.
    """
    dist = np.atleast_2d(dist)
    K = dist.shape[1]
    n = min(N, K)
    m = min(N + extra, K)
    order = np.argsort(dist, axis=1, kind="stable")[:, :m]
    radius = np.take_along_axis(dist, order[:, n - 1: n], axis=1)[:, 0]
    return order, radius


def local_bases(gram: np.ndarray, order: np.ndarray, N: int, tol: float = DEPENDENCE_TOL):
    """``gamma`` (B, m, m) and acceptance mask for ordered candidate sets.

    At most ``N`` candidates are accepted; near-dependent ones are skipped and
    the next candidate takes their place.
    """
    G = gram[order[:, :, None], order[:, None, :]]
    return orthonormalize(G, limit=N, tol=tol)


def reduced_blocks(affine_a, affine_f, order, gamma):
    """Per-query blocks ``gamma A^q_sub gamma^T`` (B, Q, m, m) and ``gamma f^q_sub`` (B, Q, m)."""
    A = affine_a[:, order[:, :, None], order[:, None, :]]  # (Q, B, m, m)
    A = np.moveaxis(A, 0, 1)
    F = np.moveaxis(affine_f[:, order], 0, 1)  # (B, Q, m)
    Ar = gamma[:, None] @ A @ np.swapaxes(gamma, -1, -2)[:, None]
    Fr = np.einsum("bij,bqj->bqi", gamma, F)
    return Ar, Fr


def _solve_reduced(R, F, accepted):
    # skipped snapshots leave zero rows and columns; pin their coefficient to 0
    R = R.copy()
    idx = np.nonzero(~np.broadcast_to(accepted, R.shape[:-1]))
    R[idx + (idx[-1],)] = 1.0
    return np.linalg.solve(R, F[..., None])[..., 0]


@dataclass
class ReducedSystem:
    matrix: np.ndarray
    rhs: np.ndarray
    solution: np.ndarray | None = None

    def solve(self) -> np.ndarray:
        cond = np.linalg.cond(self.matrix)
        if not np.isfinite(cond) or cond > 1e14:
            raise np.linalg.LinAlgError(f"singular reduced matrix (condition estimate {cond:.3g})")
        self.solution = np.linalg.solve(self.matrix, self.rhs)
        return self.solution


def assemble_reduced(bundle, local, gamma, mu) -> ReducedSystem:
    """Reduced Galerkin system in the orthonormal basis of the local snapshots.

    ``bundle`` provides ``affine_a`` (Q_a, K, K), ``affine_f`` (Q_f, K) and
    ``coefficients(mu) -> (g, h)``.
    """
    local = np.asarray(local, dtype=int)
    gamma = np.asarray(gamma, dtype=float)
    g, h = bundle.coefficients(mu)
    sub = np.ix_(local, local)
    A = sum(gq * (gamma @ Aq[sub] @ gamma.T) for gq, Aq in zip(g, bundle.affine_a))
    F = sum(hq * (gamma @ fq[local]) for hq, fq in zip(h, bundle.affine_f))
    return ReducedSystem(np.asarray(A), np.asarray(F))


@dataclass
class ReducedSolution:
    """Result of one online query."""

    mu: np.ndarray
    local: np.ndarray
    radius: float
    gamma: np.ndarray
    coeffs: np.ndarray
    weights: np.ndarray
    error: float | None = None
    timings: dict = field(default_factory=dict)

    @property
    def used(self) -> np.ndarray:
        """Indices of the candidates that entered the local basis."""
        return self.local[np.any(self.gamma != 0.0, axis=0)]

    def reconstruct(self, snapshots: np.ndarray) -> np.ndarray:
        """Reduced approximation from the rows of ``snapshots`` at ``local``."""
        return self.weights @ snapshots[self.local]


class OnlineModel:
    """A loaded bundle prepared for repeated queries.

    Metric tensors at the sample points are interpolated once. The backend
    is only needed for the projection path and for error validation.
    """

    def __init__(self, bundle, backend=None):
        from .backends import from_descriptor

        self.bundle = bundle
        self.backend = backend if backend is not None else from_descriptor(bundle.descriptor)
        self.field = bundle.field
        if len(bundle.sample_mus) and len(self.field):
            self.sample_metrics, _ = self.field.evaluate(bundle.sample_mus)
        else:
            self.sample_metrics = None

    @property
    def K(self) -> int:
        return self.bundle.sample_mus.shape[0]

    def coefficients(self, mu):
        return self.bundle.coefficients(mu)

    def distances(self, mu) -> np.ndarray:
        mu = np.atleast_2d(np.asarray(mu, dtype=float))
        if self.field.isotropic or self.sample_metrics is None:
            return pairwise_distances(mu, None, self.bundle.sample_mus, None)[0]
        M, _ = self.field.evaluate(mu)
        return pairwise_distances(mu, M, self.bundle.sample_mus, self.sample_metrics)[0]

    def solve(self, mu, N: int | None = None, validate: bool = False) -> ReducedSolution:
        b = self.bundle
        N = b.N if N is None else N
        if self.K == 0:
            raise ValueError("bundle holds no samples")
        mu = self.backend.check_point(mu)
        timings = {}

        t0 = time.perf_counter()
        order, radius = select_local(self.distances(mu)[None, :], N)
        timings["search_ms"] = 1e3 * (time.perf_counter() - t0)

        t0 = time.perf_counter()
        gamma, accepted = local_bases(b.gram, order, N)
        gamma, accepted, order = gamma[0], accepted[0], order[0]
        keep = np.flatnonzero(accepted)
        gamma = gamma[np.ix_(keep, np.arange(order.size))]
        timings["ortho_ms"] = 1e3 * (time.perf_counter() - t0)

        t0 = time.perf_counter()
        if self.backend.kind == "galerkin":
            system = assemble_reduced(b, order, gamma, mu)
            coeffs = system.solve()
        else:
            cross = self.backend.gram(mu[None, :], b.sample_mus[order])[0]
            coeffs = gamma @ cross
        weights = gamma.T @ coeffs
        timings["solve_ms"] = 1e3 * (time.perf_counter() - t0)
        timings["total_ms"] = timings["search_ms"] + timings["ortho_ms"] + timings["solve_ms"]

        sol = ReducedSolution(mu, order, float(radius[0]), gamma, coeffs, weights, timings=timings)
        if validate:
            sol.error = self.error(sol)
        return sol

    def error(self, sol: ReducedSolution) -> float:
        """Exact error of the reduced approximation, in the backend's error norm."""
        b = self.bundle
        if self.backend.kind == "galerkin":
            if b.snapshots is None:
                raise SnapshotsUnavailable("snapshots unavailable: bundle was saved without them")
            u0 = self.backend.homogeneous(sol.mu[None, :])[0]
            V = b.snapshots[sol.local] - self.backend.lifting
            return float(self.backend.norm(u0 - sol.weights @ V))
        return float(self.backend.residual_norms(
            sol.mu[None, :], b.sample_mus[sol.local][None], sol.weights[None, :])[0])


def online_solve(bundle, mu, N: int | None = None, validate: bool = False) -> ReducedSolution:
    """One online query against ``bundle`` (an ``OfflineBundle`` or ``OnlineModel``)."""
    model = bundle if isinstance(bundle, OnlineModel) else OnlineModel(bundle)
    return model.solve(mu, N, validate)

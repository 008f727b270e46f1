"""Gram-only orthonormalization of local snapshot sets.

Given the Gram matrix ``G_ij = <v_j, v_i>`` of an ordered snapshot set, the
recursions below produce lower-triangular coefficients ``gamma`` such that
``zeta_n = sum_i gamma_ni v_i`` is orthonormal, without touching the
snapshot vectors themselves. All routines accept stacks of matrices.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DEPENDENCE_TOL",
    "LinearDependenceError",
    "OpCounter",
    "beta_recursion",
    "compute_beta",
    "compute_gamma",
    "orthonormalize",
]

#: relative threshold on ``alpha**2 / G_nn`` below which a snapshot is dependent
DEPENDENCE_TOL = 1e-12


class LinearDependenceError(ArithmeticError):
    def __init__(self, index: int):
        super().__init__(f"snapshot {index} is linearly dependent on its predecessors")
        self.index = index


@dataclass
class OpCounter:
    """Tally of scalar multiply-adds spent in the recursions (per matrix)."""

    madds: int = 0


def beta_recursion(G, limit: int | None = None, tol: float = DEPENDENCE_TOL, counter=None):
    """Run the ``beta`` recursion, skipping near-dependent snapshots.

    Parameters
    ----------
    G : array_like, shape (..., m, m)
        Gram matrices of the ordered candidate snapshots.
    limit : int, optional
        Stop accepting once this many snapshots were accepted; later
        candidates are skipped. Defaults to ``m``.
    tol : float
        Snapshot ``n`` is skipped when ``alpha**2 <= tol * G_nn``.

    Returns
    -------
    beta, beta_tilde : ndarray, shape (..., m, m)
        Skipped snapshots have zero rows in ``beta`` and zero columns in
        ``beta_tilde``.
    accepted : ndarray of bool, shape (..., m)
    """
    G = np.asarray(G, dtype=float)
    m = G.shape[-1]
    lead = G.shape[:-2]
    limit = m if limit is None else limit
    beta = np.zeros(G.shape)
    bt = np.zeros(G.shape)
    accepted = np.zeros(lead + (m,), dtype=bool)
    count = np.zeros(lead, dtype=int)
    madds = 0
    for n in range(m):
        gnn = G[..., n, n]
        a2 = gnn - np.einsum("...j,...j->...", bt[..., n, :n], bt[..., n, :n])
        ok = (a2 > tol * np.abs(gnn)) & (count < limit)
        alpha = np.sqrt(np.where(ok, a2, 1.0))
        scale = np.where(ok, 1.0 / alpha, 0.0)
        beta[..., n, n] = scale
        beta[..., n, :n] = bt[..., n, :n] * scale[..., None]
        if n + 1 < m:
            bt[..., n + 1:, n] = -scale[..., None] * G[..., n, n + 1:] + np.einsum(
                "...kj,...j->...k", bt[..., n + 1:, :n], beta[..., n, :n]
            )
        accepted[..., n] = ok
        count += ok
        madds += 2 * n + 1 + (m - n - 1) * (n + 1)
    if counter is not None:
        counter.madds += madds
    return beta, bt, accepted


def compute_beta(G, tol: float = DEPENDENCE_TOL, counter=None):
    """Coefficients ``(beta, beta_tilde)`` of the Gram-Schmidt recursion.

    Raises
    ------
    LinearDependenceError
        If some ``alpha**2`` falls below ``tol * G_nn``; ``index`` is the
        first offending (0-based) position.
    """
    G = np.asarray(G, dtype=float)
    if G.ndim < 2 or G.shape[-1] != G.shape[-2]:
        raise ValueError("Gram matrix must be square")
    if np.any(np.diagonal(G, axis1=-2, axis2=-1) <= 0):
        raise ValueError("Gram matrix must have a positive diagonal")
    beta, bt, accepted = beta_recursion(G, tol=tol, counter=counter)
    if not np.all(accepted):
        bad = np.nonzero(~accepted.reshape(-1, accepted.shape[-1]).all(axis=0))[0]
        raise LinearDependenceError(int(bad[0]))
    return beta, bt


def compute_gamma(beta, counter=None) -> np.ndarray:
    """Change of basis ``gamma`` from snapshots to the orthonormal ``zeta``."""
    beta = np.asarray(beta, dtype=float)
    m = beta.shape[-1]
    gamma = np.zeros(beta.shape)
    madds = 0
    for n in range(m):
        if n:
            gamma[..., n, :n] = np.einsum("...k,...ki->...i", beta[..., n, :n], gamma[..., :n, :n])
            madds += n * n
        gamma[..., n, n] = beta[..., n, n]
    if counter is not None:
        counter.madds += madds
    return gamma


def orthonormalize(G, limit: int | None = None, tol: float = DEPENDENCE_TOL):
    """``gamma`` and acceptance mask for ordered candidate sets (stackable)."""
    beta, _, accepted = beta_recursion(G, limit=limit, tol=tol)
    return compute_gamma(beta), accepted

"""Explicit Gaussian families approximated by L2 projection.

All four families are products ``g(x1) * h(x2)``; inner products and
projection residuals are evaluated through these one-dimensional factors,
which is exact for the tensor trapezoidal rule on the lattice.
"""
from __future__ import annotations

import numpy as np

from ..metric import ParameterDomain
from ..ortho import orthonormalize
from .base import ProblemBackend, Snapshot
from .grid import SpatialGrid

FAMILIES = ("f1", "f2", "f3", "f3xi")

#: xi-maps shown for the f3-type families: rows give (xi1, xi2) as linear forms in mu
XI_DEFAULT = np.array([[1.0, 3.0], [0.5, -1.0]])


def _centers_widths(family: str, mu: np.ndarray, xi: np.ndarray | None):
    mu1, mu2 = mu[..., 0], mu[..., 1]
    if family == "f1":
        c = np.stack([0.1 * (mu1 - mu2), mu1 + mu2], axis=-1)
        s = np.full(c.shape, 0.01)
    elif family == "f2":
        rho = mu1**2 + mu2**2
        c = np.stack([rho, rho], axis=-1)
        s = np.full(c.shape, 0.01)
    elif family in ("f3", "f3xi"):
        if family == "f3":
            A = np.array([[1.0, 3.0], [3.0, -1.0]])
        else:
            A = XI_DEFAULT if xi is None else np.asarray(xi, dtype=float).reshape(2, 2)
        c = mu @ A.T
        s = 0.1 + 5.0 * np.abs(c)
    else:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    return c, s


def evaluate_family(family: str, x, mu, xi=None) -> float:
    """Closed-form value of ``family`` at spatial point ``x`` and parameter ``mu``."""
    x1, x2 = (float(t) for t in x)
    m1, m2 = (float(t) for t in mu)
    if family == "f1":
        e = (x1 - 0.1 * (m1 - m2)) ** 2 / 0.01 + (x2 - (m1 + m2)) ** 2 / 0.01
    elif family == "f2":
        rho = m1 * m1 + m2 * m2
        e = (x1 - rho) ** 2 / 0.01 + (x2 - rho) ** 2 / 0.01
    elif family in ("f3", "f3xi"):
        if family == "f3":
            xi1, xi2 = m1 + 3 * m2, 3 * m1 - m2
        else:
            A = XI_DEFAULT if xi is None else np.asarray(xi, dtype=float).reshape(2, 2)
            xi1 = A[0, 0] * m1 + A[0, 1] * m2
            xi2 = A[1, 0] * m1 + A[1, 1] * m2
        e = (x1 - xi1) ** 2 / (0.1 + 5 * abs(xi1)) + (x2 - xi2) ** 2 / (0.1 + 5 * abs(xi2))
    else:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    return float(np.exp(-e))


class AnalyticL2(ProblemBackend):
    """Parametrized Gaussian family on a lattice, with trapezoidal L2 product."""

    kind = "projection"

    def __init__(
        self,
        family: str,
        grid: SpatialGrid | None = None,
        domain: ParameterDomain | None = None,
        xi=None,
        error_norm: str = "linf",
        chunk: int = 256,
    ):
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
        if error_norm not in ("linf", "l2"):
            raise ValueError("error_norm must be 'linf' or 'l2'")
        self.family = family
        self.grid = grid or SpatialGrid((-1.0, -1.0), (1.0, 1.0), (75, 75))
        if self.grid.dim != 2:
            raise ValueError("analytic families live on a two-dimensional grid")
        self.domain = domain or ParameterDomain([-0.5, -0.5], [0.5, 0.5])
        self.xi = None if xi is None else np.asarray(xi, dtype=float).reshape(2, 2)
        self.error_norm = error_norm
        self.chunk = chunk

    @property
    def ndof(self) -> int:
        return self.grid.size

    def descriptor(self) -> dict:
        return {
            "backend": "analytic",
            "family": self.family,
            "grid_lower": list(self.grid.lower),
            "grid_upper": list(self.grid.upper),
            "grid_counts": list(self.grid.counts),
            "domain_lower": self.domain.lower.tolist(),
            "domain_upper": self.domain.upper.tolist(),
            "xi": None if self.xi is None else self.xi.ravel().tolist(),
            "error_norm": self.error_norm,
        }

    # -- factors ------------------------------------------------------------

    def factors(self, mus) -> tuple[np.ndarray, np.ndarray]:
        """One-dimensional factors ``(g, h)`` with shapes ``(..., n1)``, ``(..., n2)``."""
        mus = np.asarray(mus, dtype=float)
        c, s = _centers_widths(self.family, mus, self.xi)
        x1, x2 = self.grid.axes
        g = np.exp(-((x1 - c[..., 0:1]) ** 2) / s[..., 0:1])
        h = np.exp(-((x2 - c[..., 1:2]) ** 2) / s[..., 1:2])
        return g, h

    def truth(self, mus) -> np.ndarray:
        mus = np.atleast_2d(np.asarray(mus, dtype=float))
        g, h = self.factors(mus)
        return (h[:, :, None] * g[:, None, :]).reshape(mus.shape[0], -1)

    def inner(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if u.shape[-1] != self.ndof or v.shape[-1] != self.ndof:
            raise ValueError(f"snapshot length must be {self.ndof}")
        w = self.grid.weights
        if u.ndim == 1 and v.ndim == 1:
            return float(np.dot(w * u, v))
        return (np.atleast_2d(u) * w) @ np.atleast_2d(v).T

    def norm(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.error_norm == "linf":
            return np.abs(u).max(axis=-1)
        return np.sqrt(np.maximum((u * u) @ self.grid.weights, 0.0))

    def gram(self, mus_a, mus_b) -> np.ndarray:
        """Inner products ``<v(a_i), v(b_j)>`` computed from the factors."""
        wa, wb = self.grid.axis_weights
        ga, ha = self.factors(np.atleast_2d(mus_a))
        gb, hb = self.factors(np.atleast_2d(mus_b))
        return ((ga * wa) @ gb.T) * ((ha * wb) @ hb.T)

    def cross(self, mus, basis_mus) -> np.ndarray:
        """Batched inner products: ``mus`` (B, S, p), ``basis_mus`` (B, m, p) -> (B, S, m)."""
        wa, wb = self.grid.axis_weights
        ga, ha = self.factors(mus)
        gb, hb = self.factors(basis_mus)
        return np.matmul(ga * wa, np.swapaxes(gb, -1, -2)) * np.matmul(ha * wb, np.swapaxes(hb, -1, -2))

    def residual_norms(self, mus, basis_mus, y) -> np.ndarray:
        """Norms of ``v(mu_b) - sum_i y_bi v(basis_bi)`` for each batch row."""
        mus = np.atleast_2d(np.asarray(mus, dtype=float))
        basis_mus = np.asarray(basis_mus, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.empty(mus.shape[0])
        for lo in range(0, mus.shape[0], self.chunk):
            sl = slice(lo, lo + self.chunk)
            pts = np.concatenate([mus[sl, None, :], basis_mus[sl]], axis=1)
            coef = np.concatenate([np.ones((pts.shape[0], 1)), -y[sl]], axis=1)
            g, h = self.factors(pts)
            R = np.matmul(np.swapaxes(h * coef[..., None], 1, 2), g)
            out[sl] = self.norm(R.reshape(R.shape[0], -1))
        return out

    # -- single-point operations -------------------------------------------------

    def solve(self, mu) -> Snapshot:
        mu = np.asarray(mu, dtype=float)
        return Snapshot(self.truth(mu[None, :])[0], mu)

    def error(self, mu, basis) -> float:
        v = self.solve(mu).coeffs
        if not basis:
            return float(self.norm(v))
        V = np.array([b.coeffs for b in basis])
        return float(self.norm(v - self.project(v, V)))

    def project(self, v, V) -> np.ndarray:
        """Inner-product orthogonal projection of ``v`` onto the rows of ``V``."""
        G = self.inner(V, V)
        gamma, _ = orthonormalize(G)
        Z = gamma @ V
        return (self.inner(Z, v[None, :])[:, 0]) @ Z

"""Steady convection-diffusion on the unit square with a lifted Dirichlet datum.

The truth space is tensor-product Lagrange elements of degree ``k`` on a
uniform quadrilateral mesh. Because mesh and space are tensor products, the
global matrices are Kronecker products of one-dimensional ones.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla

from ..metric import ParameterDomain
from ..ortho import orthonormalize
from .base import ProblemBackend, Snapshot


def boundary_datum(x) -> np.ndarray:
    """Saw tooth through (0, 0), (0.5, 0.5), (0.525, -0.475), (1, 0)."""
    return np.interp(x, [0.0, 0.5, 0.525, 1.0], [0.0, 0.5, -0.475, 0.0])


def coefficients(mu) -> np.ndarray:
    """``(g_1, g_2, g_3)`` at ``mu``; accepts stacks ``(..., 2)``."""
    mu = np.asarray(mu, dtype=float)
    return np.stack([10.0 ** mu[..., 0], np.sin(mu[..., 1]), np.cos(mu[..., 1])], axis=-1)


def lagrange_1d(degree: int, n_elements: int, length: float = 1.0):
    """Global 1D mass, stiffness and advection (``int phi_j' phi_i``) matrices."""
    k = degree
    h = length / n_elements
    ref = np.linspace(0.0, 1.0, k + 1)
    V = np.vander(ref, k + 1, increasing=True)
    C = np.linalg.inv(V)  # column j: monomial coefficients of basis j
    qx, qw = np.polynomial.legendre.leggauss(k + 1)
    qx = 0.5 * (qx + 1.0)
    qw = 0.5 * qw
    P = np.vander(qx, k + 1, increasing=True) @ C
    dV = np.zeros_like(np.vander(qx, k + 1, increasing=True))
    for p in range(1, k + 1):
        dV[:, p] = p * qx ** (p - 1)
    dP = dV @ C
    Me = h * (P.T * qw) @ P
    Se = (dP.T * qw) @ dP / h
    Me, Se = 0.5 * (Me + Me.T), 0.5 * (Se + Se.T)  # exact symmetry despite roundoff in C
    De = (P.T * qw) @ dP  # [i, j] = int phi_i phi_j'
    n = k * n_elements + 1
    rows, cols, m_val, s_val, d_val = [], [], [], [], []
    for e in range(n_elements):
        idx = np.arange(e * k, e * k + k + 1)
        r, c = np.meshgrid(idx, idx, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        m_val.append(Me.ravel())
        s_val.append(Se.ravel())
        d_val.append(De.ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    mk = lambda v: sp.csr_matrix((np.concatenate(v), (rows, cols)), shape=(n, n))
    return mk(m_val), mk(s_val), mk(d_val)


@dataclass(frozen=True, eq=False)
class AffineForms:
    """Operator blocks ``a_q``, right-side blocks ``f_q`` and their coefficients."""

    a_blocks: Sequence[sp.csr_matrix]
    f_blocks: Sequence[np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if not self.a_blocks or not self.f_blocks:
            raise ValueError("need at least one operator and one right-side block")
        n = self.a_blocks[0].shape[0]
        if any(A.shape != (n, n) for A in self.a_blocks) or any(f.shape != (n,) for f in self.f_blocks):
            raise ValueError("inconsistent block dimensions")

    @property
    def q_a(self) -> int:
        return len(self.a_blocks)

    @property
    def q_f(self) -> int:
        return len(self.f_blocks)

    def operator(self, mu) -> sp.csr_matrix:
        g = self.g(mu)
        A = g[0] * self.a_blocks[0]
        for gq, Aq in zip(g[1:], self.a_blocks[1:]):
            A = A + gq * Aq
        return A.tocsr()

    def rhs(self, mu) -> np.ndarray:
        h = self.h(mu)
        return sum(hq * fq for hq, fq in zip(h, self.f_blocks))


class GalerkinCD(ProblemBackend):
    """``-10^mu1 Lap u + beta(mu2) . grad u = 0`` on (0, 1)^2.

    ``u = g`` on the bottom edge and ``u = 0`` on the other three edges.
    Snapshots hold the full nodal vector ``u = u0 + u_g``; reduced spaces are
    built from the homogeneous parts ``u0``.
    """

    kind = "galerkin"

    def __init__(
        self,
        h: float = 0.0125,
        degree: int = 1,
        domain: ParameterDomain | None = None,
        inner_product: str = "h1",
        error_norm: str = "l2",
        max_peclet: float = 20.0,
    ):
        if degree not in (1, 2, 3):
            raise ValueError("element degree must be 1, 2 or 3")
        n_el = int(round(1.0 / h))
        if n_el < 1 or abs(n_el * h - 1.0) > 1e-9:
            raise ValueError(f"mesh size h={h} must divide the unit interval")
        if inner_product not in ("l2", "h1"):
            raise ValueError("inner_product must be 'l2' or 'h1'")
        if error_norm not in ("l2", "h1", "linf"):
            raise ValueError("error_norm must be 'l2', 'h1' or 'linf'")
        self.h = h
        self.degree = degree
        self.domain = domain or ParameterDomain([-2.5, -np.pi / 4], [0.0, np.pi / 4])
        self.inner_product = inner_product
        self.error_norm = error_norm
        self.peclet = (h / degree) / (2.0 * 10.0 ** self.domain.lower[0])
        if self.peclet > max_peclet:
            raise ValueError(
                f"cell Peclet number {self.peclet:.3g} exceeds {max_peclet}; refine h or raise degree"
            )
        M1, S1, D1 = lagrange_1d(degree, n_el)
        n1 = M1.shape[0]
        self.n1 = n1
        self.axis = np.linspace(0.0, 1.0, n1)
        self.mass = sp.kron(M1, M1, format="csr")
        self.a_blocks = (
            (sp.kron(M1, S1) + sp.kron(S1, M1)).tocsr(),
            sp.kron(M1, D1, format="csr"),
            sp.kron(D1, M1, format="csr"),
        )
        X, Y = np.meshgrid(self.axis, self.axis, indexing="xy")
        self.nodes = np.stack([X.ravel(), Y.ravel()], axis=-1)
        on_bnd = (X == 0) | (X == 1) | (Y == 0) | (Y == 1)
        self.boundary = np.flatnonzero(on_bnd.ravel())
        self.interior = np.flatnonzero(~on_bnd.ravel())
        self.lifting = np.where(self.nodes[:, 1] == 0.0, boundary_datum(self.nodes[:, 0]), 0.0)
        self.gram_matrix = self.mass if inner_product == "l2" else (self.mass + self.a_blocks[0]).tocsr()
        self.norm_matrix = {"l2": self.mass, "h1": (self.mass + self.a_blocks[0]).tocsr()}.get(error_norm)
        f_blocks = tuple(-(A @ self.lifting) for A in self.a_blocks)
        self.forms = AffineForms(self.a_blocks, f_blocks, coefficients, coefficients)
        I = self.interior
        self._f_interior = tuple(f[I] for f in f_blocks)
        # interior 1D factors: the interior operator is M (x) B_y + B_x (x) M in Kronecker form
        inner = slice(1, n1 - 1)
        self._m1_inv = np.linalg.inv(M1[inner, inner].toarray())
        self._s1 = S1[inner, inner].toarray()
        self._d1 = D1[inner, inner].toarray()

    @property
    def ndof(self) -> int:
        return self.nodes.shape[0]

    def descriptor(self) -> dict:
        return {
            "backend": "galerkin",
            "h": self.h,
            "degree": self.degree,
            "domain_lower": self.domain.lower.tolist(),
            "domain_upper": self.domain.upper.tolist(),
            "inner_product": self.inner_product,
            "error_norm": self.error_norm,
        }

    def affine_terms(self) -> AffineForms:
        return self.forms

    def homogeneous(self, mus) -> np.ndarray:
        """Truth solutions minus the lifting, one row per parameter."""
        mus = np.atleast_2d(np.asarray(mus, dtype=float))
        I = self.interior
        out = np.zeros((mus.shape[0], self.ndof))
        m = self.n1 - 2
        Minv = self._m1_inv
        for k, mu in enumerate(mus):
            g = coefficients(mu)
            bI = g[0] * self._f_interior[0] + g[1] * self._f_interior[1] + g[2] * self._f_interior[2]
            # nodal values U[iy, ix] solve M U Bx^T + By U M = F, a Sylvester equation
            # after scaling by M^-1 on both sides
            Bx = g[0] * self._s1 + g[1] * self._d1
            By = g[0] * self._s1 + g[2] * self._d1
            F = Minv @ bI.reshape(m, m) @ Minv
            with np.errstate(all="ignore"):
                x = sla.solve_sylvester(Minv @ By, Bx.T @ Minv, F).ravel()
            if not np.all(np.isfinite(x)):
                raise np.linalg.LinAlgError(f"singular truth operator at mu={mu}")
            out[k, I] = x
        return out

    def truth(self, mus) -> np.ndarray:
        return self.homogeneous(mus) + self.lifting

    def solve(self, mu) -> Snapshot:
        mu = np.asarray(mu, dtype=float)
        return Snapshot(self.truth(mu[None, :])[0], mu)

    def inner(self, u, v):
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if u.shape[-1] != self.ndof or v.shape[-1] != self.ndof:
            raise ValueError(f"snapshot length must be {self.ndof}")
        if u.ndim == 1 and v.ndim == 1:
            return float(u @ (self.gram_matrix @ v))
        return np.atleast_2d(u) @ (self.gram_matrix @ np.atleast_2d(v).T)

    def norm(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.norm_matrix is None:
            return np.abs(u).max(axis=-1)
        if u.ndim == 1:
            return float(np.sqrt(max(u @ (self.norm_matrix @ u), 0.0)))
        Mu = (self.norm_matrix @ u.T).T
        return np.sqrt(np.maximum(np.einsum("ij,ij->i", u, Mu), 0.0))

    def galerkin(self, mu, V) -> np.ndarray:
        """Galerkin solution (homogeneous part) on the span of the rows of ``V``."""
        G = self.inner(V, V)
        gamma, accepted = orthonormalize(G)
        Z = (gamma @ V)[accepted]
        A = self.forms.operator(mu)
        R = Z @ (A @ Z.T)
        F = Z @ self.forms.rhs(mu)
        return np.linalg.solve(R, F) @ Z

    def error(self, mu, basis) -> float:
        u0 = self.homogeneous(np.asarray(mu, dtype=float)[None, :])[0]
        if not basis:
            return float(self.norm(u0))
        V = np.array([b.coeffs for b in basis]) - self.lifting
        return float(self.norm(u0 - self.galerkin(mu, V)))

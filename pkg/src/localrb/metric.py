"""Parameter domain, finite-difference Hessians and the anisotropic metric.

Parameter points are plain ``numpy`` vectors of length ``p``. Hessians and
metric tensors are ``(p, p)`` arrays; most functions here also accept
stacks of them with arbitrary leading dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import combinations, product
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

__all__ = [
    "ParameterDomain",
    "MetricField",
    "default_increment",
    "stencil_offsets",
    "stencil_points",
    "hessian_from_stencil",
    "estimate_hessian",
    "metric_from_hessian",
    "psd_floor",
    "distance",
    "pairwise_distances",
    "metric_at",
]


@dataclass(frozen=True, eq=False)
class ParameterDomain:
    """Axis-aligned box ``[lower, upper]`` in R^p."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lower.ndim != 1 or lower.shape != upper.shape or lower.size < 1:
            raise ValueError("lower and upper must be vectors of equal length p >= 1")
        if not np.all(lower < upper):
            raise ValueError(f"empty box: lower={lower}, upper={upper}")
        lower.flags.writeable = False
        upper.flags.writeable = False
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def extent(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def corners(self) -> np.ndarray:
        """The ``2**p`` box corners, lexicographic in (lower, upper)."""
        return np.array(list(product(*zip(self.lower, self.upper))), dtype=float)

    def contains(self, mu, atol: float = 0.0) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        return np.all((mu >= self.lower - atol) & (mu <= self.upper + atol), axis=-1)

    def lattice(self, n: int | Sequence[int]) -> np.ndarray:
        """Regular tensor lattice with ``n`` points per direction (first axis fastest)."""
        counts = np.broadcast_to(np.asarray(n, dtype=int), (self.dim,))
        if np.any(counts < 2):
            raise ValueError("lattice needs at least 2 points per direction")
        axes = [np.linspace(lo, hi, c) for lo, hi, c in zip(self.lower, self.upper, counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel(order="F") for m in mesh], axis=-1)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.lower + rng.random((count, self.dim)) * self.extent


def default_increment(domain: ParameterDomain, fraction: float = 1e-2) -> np.ndarray:
    return fraction * domain.extent


# ---------------------------------------------------------------------------
# Hessian by finite differences
# ---------------------------------------------------------------------------


def stencil_offsets(p: int) -> np.ndarray:
    """Integer offsets ``alpha`` of the Hessian stencil, center first.

    Rows: the center, then ``+e_i, -e_i`` for every direction, then the four
    diagonal neighbours ``(+,+), (-,+), (+,-), (-,-)`` of every pair ``i < j``.
    That is ``1 + 2p + 2p(p-1)`` points of the ``3**p`` grid.
    """
    rows = [np.zeros(p, dtype=int)]
    for i in range(p):
        for s in (1, -1):
            a = np.zeros(p, dtype=int)
            a[i] = s
            rows.append(a)
    for i, j in combinations(range(p), 2):
        for si, sj in ((1, 1), (-1, 1), (1, -1), (-1, -1)):
            a = np.zeros(p, dtype=int)
            a[i], a[j] = si, sj
            rows.append(a)
    return np.array(rows)


def stencil_points(mu, delta, domain: ParameterDomain) -> tuple[np.ndarray, np.ndarray]:
    """Stencil around ``mu`` (shape ``(..., p)``), shifted inward to stay in the box.

    Returns ``(points, center)`` with ``points`` of shape ``(..., S, p)``.
    """
    mu = np.asarray(mu, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (domain.dim,):
        raise ValueError(f"delta must have shape ({domain.dim},)")
    if np.any(delta <= 0):
        raise ValueError("stencil increments must be strictly positive")
    if np.any(2 * delta > domain.extent):
        raise ValueError("stencil increments too large for the parameter box")
    center = np.clip(mu, domain.lower + delta, domain.upper - delta)
    offsets = stencil_offsets(domain.dim) * delta
    return center[..., None, :] + offsets, center


def hessian_from_stencil(values: np.ndarray, delta, weights=None) -> np.ndarray:
    """Weighted Hessian from reduced coefficients sampled on the stencil.

    ``values`` has shape ``(..., S, n_modes)`` with the stencil ordering of
    :func:`stencil_offsets`. Returns ``sum_n w_n * D_ij v_n(center)``,
    symmetrized, with shape ``(..., p, p)``. The weights ``w_n`` default to
    the center coefficients ``v_n(center)``.
    """
    values = np.asarray(values, dtype=float)
    delta = np.asarray(delta, dtype=float)
    p = delta.size
    v0 = values[..., 0, :]
    D = np.empty(values.shape[:-2] + (p, p, values.shape[-1]))
    for i in range(p):
        vp, vm = values[..., 1 + 2 * i, :], values[..., 2 + 2 * i, :]
        D[..., i, i, :] = (vp - 2.0 * v0 + vm) / delta[i] ** 2
    k = 1 + 2 * p
    for i, j in combinations(range(p), 2):
        vpp, vmp, vpm, vmm = (values[..., k + m, :] for m in range(4))
        D[..., i, j, :] = (vpp - vmp - vpm + vmm) / (4.0 * delta[i] * delta[j])
        D[..., j, i, :] = D[..., i, j, :]
        k += 4
    w = v0 if weights is None else np.asarray(weights, dtype=float)
    H = np.einsum("...n,...ijn->...ij", w, D)
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def estimate_hessian(
    evaluate_coeffs: Callable[[np.ndarray], np.ndarray],
    mu,
    delta,
    domain: ParameterDomain,
    weights=None,
) -> np.ndarray:
    """Finite-difference Hessian of the reduced coefficients around ``mu``.

    ``evaluate_coeffs`` maps one parameter point to the vector of local
    reduced coefficients ``v_n``. Near the boundary the stencil is shifted
    inward, so the result approximates the Hessian at the shifted center.
    Evaluation errors at stencil points propagate unchanged.
    """
    points, _ = stencil_points(mu, delta, domain)
    values = np.array([np.atleast_1d(evaluate_coeffs(q)) for q in points], dtype=float)
    return hessian_from_stencil(values, delta, weights)


# ---------------------------------------------------------------------------
# Metric tensors and distance
# ---------------------------------------------------------------------------


def metric_from_hessian(H) -> np.ndarray:
    """``V |Lambda| V^T`` for ``H = V Lambda V^T`` (stackable)."""
    H = np.asarray(H, dtype=float)
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    lam, V = np.linalg.eigh(H)
    M = (V * np.abs(lam)[..., None, :]) @ np.swapaxes(V, -1, -2)
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def psd_floor(M) -> np.ndarray:
    """Clamp negative eigenvalues to zero (stackable)."""
    M = np.asarray(M, dtype=float)
    shape = M.shape
    M = M.reshape((-1,) + shape[-2:])
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    lam, V = np.linalg.eigh(M)
    bad = lam.min(axis=-1) < 0
    if np.any(bad):
        Vb = V[bad]
        F = (Vb * np.maximum(lam[bad], 0.0)[:, None, :]) @ np.swapaxes(Vb, -1, -2)
        M[bad] = 0.5 * (F + np.swapaxes(F, -1, -2))
    return M.reshape(shape)


def _root(q, scale):
    # tiny negative quadratic forms are roundoff on rank-deficient tensors
    if np.any(q < -1e-10 * scale):
        raise ArithmeticError("negative quadratic form: metric tensor is not PSD")
    return np.sqrt(np.maximum(q, 0.0))


def distance(m1, m2) -> float:
    """Trapezoidal metric distance between ``(M1, mu1)`` and ``(M2, mu2)``."""
    M1, mu1 = m1
    M2, mu2 = m2
    M1 = np.asarray(M1, dtype=float)
    M2 = np.asarray(M2, dtype=float)
    d = np.asarray(mu2, dtype=float) - np.asarray(mu1, dtype=float)
    q1 = float(d @ M1 @ d)
    q2 = float(d @ M2 @ d)
    dd = float(d @ d)
    r1 = _root(q1, dd * (np.abs(M1).max() + 1e-300))
    r2 = _root(q2, dd * (np.abs(M2).max() + 1e-300))
    return float(0.5 * r1 + 0.5 * r2)


def pairwise_distances(P, MP, Q, MQ) -> np.ndarray:
    """Distances between every row of ``P`` and every row of ``Q``.

    ``MP`` and ``MQ`` hold the metric tensors at those points, or are ``None``
    for the identity (Euclidean distance).
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    D = Q[None, :, :] - P[:, None, :]
    dd = np.einsum("abi,abi->ab", D, D)
    if MP is None and MQ is None:
        return np.sqrt(dd)
    if MP is None:
        qa = dd
    else:
        qa = np.einsum("abi,aij,abj->ab", D, MP, D)
    if MQ is None:
        qb = dd
    else:
        qb = np.einsum("abi,bij,abj->ab", D, MQ, D)
    scale = dd * (1.0 + max(np.abs(MP).max() if MP is not None else 0.0,
                            np.abs(MQ).max() if MQ is not None else 0.0))
    return 0.5 * _root(qa, scale) + 0.5 * _root(qb, scale)


# ---------------------------------------------------------------------------
# Metric field
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MetricField:
    """Metric tensors and ball radii known at a set of nodes.

    ``mode`` selects the interpolation: ``"auto"`` uses piecewise-linear
    interpolation on a Delaunay triangulation for p == 2 and inverse distance
    weighting otherwise; ``"linear"`` and ``"idw"`` force one of them.
    """

    nodes: np.ndarray
    tensors: np.ndarray
    radii: np.ndarray
    mode: str = "auto"

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        T, p = nodes.shape
        tensors = np.asarray(self.tensors, dtype=float).reshape(T, p, p)
        radii = np.asarray(self.radii, dtype=float).reshape(T)
        if self.mode not in ("auto", "linear", "idw"):
            raise ValueError(f"unknown interpolation mode {self.mode!r}")
        if T and np.any(radii < 0):
            raise ValueError("radii must be nonnegative")
        for name, arr in (("nodes", nodes), ("tensors", tensors), ("radii", radii)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def identity(cls, nodes, radii=None, mode: str = "auto") -> "MetricField":
        nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
        T, p = nodes.shape
        if radii is None:
            radii = np.ones(T)
        return cls(nodes, np.broadcast_to(np.eye(p), (T, p, p)), radii, mode)

    def __len__(self) -> int:
        return self.nodes.shape[0]

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @cached_property
    def isotropic(self) -> bool:
        return bool(np.all(self.tensors == np.eye(self.dim)))

    def with_radii(self, radii) -> "MetricField":
        return MetricField(self.nodes, self.tensors, radii, self.mode)

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.nodes)

    @cached_property
    def _values(self) -> np.ndarray:
        T, p = self.nodes.shape
        return np.concatenate([self.tensors.reshape(T, p * p), self.radii[:, None]], axis=1)

    @cached_property
    def _triangulation(self):
        if self.mode == "idw" or (self.mode == "auto" and self.dim != 2):
            return None
        if len(self) < self.dim + 1:
            return None
        try:
            tri = Delaunay(self.nodes)
        except QhullError:
            return None
        return tri

    def _interp_linear(self, tri, X):
        simplex = tri.find_simplex(X)
        out = np.full((X.shape[0], self._values.shape[1]), np.nan)
        ok = simplex >= 0
        if np.any(ok):
            s = simplex[ok]
            Tm = tri.transform[s]
            b = np.einsum("kij,kj->ki", Tm[:, :-1, :], X[ok] - Tm[:, -1, :])
            bary = np.concatenate([b, 1.0 - b.sum(axis=1, keepdims=True)], axis=1)
            verts = tri.simplices[s]
            out[ok] = np.einsum("kv,kvc->kc", bary, self._values[verts])
        return out

    def _interp_idw(self, X):
        k = min(2 * self.dim, len(self))
        dist, idx = self._tree.query(X, k=k)
        dist = dist.reshape(X.shape[0], k)
        idx = idx.reshape(X.shape[0], k)
        w = 1.0 / np.maximum(dist, 1e-300) ** 2
        w /= w.sum(axis=1, keepdims=True)
        return np.einsum("qk,qkc->qc", w, self._values[idx])

    def evaluate(self, mus) -> tuple[np.ndarray, np.ndarray]:
        """Tensors ``(m, p, p)`` and radii ``(m,)`` at the rows of ``mus``."""
        if len(self) == 0:
            raise ValueError("metric field has no nodes")
        X = np.atleast_2d(np.asarray(mus, dtype=float))
        m, p = X.shape
        if len(self) == 1:
            vals = np.broadcast_to(self._values[0], (m, self._values.shape[1])).copy()
            hit = np.ones(m, dtype=bool)
        else:
            vals = np.full((m, self._values.shape[1]), np.nan)
            dist, idx = self._tree.query(X, k=1)
            hit = dist == 0.0
            vals[hit] = self._values[idx[hit]]
            rest = ~hit
            if np.any(rest):
                tri = self._triangulation
                sub = X[rest]
                part = self._interp_linear(tri, sub) if tri is not None else np.full(
                    (sub.shape[0], vals.shape[1]), np.nan)
                miss = np.isnan(part[:, 0])
                if np.any(miss):
                    part[miss] = self._interp_idw(sub[miss])
                vals[rest] = part
        tensors = vals[:, : p * p].reshape(m, p, p)
        if self.isotropic:
            tensors = np.broadcast_to(np.eye(p), (m, p, p)).copy()
        elif not np.all(hit):
            tensors[~hit] = psd_floor(tensors[~hit])
        radii = vals[:, -1]
        return tensors, radii


def metric_at(field: MetricField, mu) -> tuple[np.ndarray, float]:
    """Interpolated metric tensor and radius at a single point."""
    M, r = field.evaluate(np.asarray(mu, dtype=float)[None, :])
    return M[0], float(r[0])

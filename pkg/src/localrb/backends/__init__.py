"""Truth layer: parametrized solution families and the affine Galerkin problem."""
from __future__ import annotations

from .analytic import FAMILIES, AnalyticL2, evaluate_family
from .base import ProblemBackend, Snapshot
from .galerkin import AffineForms, GalerkinCD, boundary_datum, coefficients
from .grid import SpatialGrid

__all__ = [
    "FAMILIES",
    "AffineForms",
    "AnalyticL2",
    "GalerkinCD",
    "ProblemBackend",
    "Snapshot",
    "SpatialGrid",
    "affine_terms",
    "boundary_datum",
    "coefficients",
    "evaluate_family",
    "exact_error",
    "from_descriptor",
    "inner_product",
    "truth_solve",
]


def truth_solve(backend: ProblemBackend, mu) -> Snapshot:
    return backend.solve(backend.check_point(mu))


def inner_product(backend: ProblemBackend, u: Snapshot, v: Snapshot) -> float:
    return backend.inner(u.coeffs, v.coeffs)


def exact_error(backend: ProblemBackend, mu, basis) -> float:
    """Exact approximation error of ``v(mu)`` on ``span(basis)``.

    Projection backends use the inner-product best approximation, Galerkin
    backends the reduced Galerkin solution; the norm is the backend's
    ``error_norm``. An empty basis gives the norm of ``v(mu)`` itself.
    """
    return backend.error(backend.check_point(mu), list(basis))


def affine_terms(backend: ProblemBackend) -> AffineForms:
    if not isinstance(backend, GalerkinCD):
        raise TypeError("affine terms exist only for the Galerkin backend")
    return backend.affine_terms()


def from_descriptor(desc: dict) -> ProblemBackend:
    """Rebuild a backend from the dictionary produced by ``descriptor()``."""
    from ..metric import ParameterDomain

    domain = ParameterDomain(desc["domain_lower"], desc["domain_upper"])
    if desc["backend"] == "analytic":
        grid = SpatialGrid(desc["grid_lower"], desc["grid_upper"], desc["grid_counts"])
        return AnalyticL2(desc["family"], grid, domain, desc.get("xi"), desc["error_norm"])
    if desc["backend"] == "galerkin":
        return GalerkinCD(
            h=desc["h"],
            degree=desc["degree"],
            domain=domain,
            inner_product=desc["inner_product"],
            error_norm=desc["error_norm"],
        )
    raise ValueError(f"unknown backend {desc['backend']!r}")

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..metric import ParameterDomain


@dataclass(frozen=True, eq=False)
class Snapshot:
    """Truth solution ``coeffs`` computed at parameter ``mu``."""

    coeffs: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=float)
        if not np.all(np.isfinite(coeffs)):
            raise ValueError(f"non-finite snapshot at mu={self.mu}")
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))


class ProblemBackend:
    """Common surface of the truth backends.

    ``kind`` is ``"projection"`` for best-approximation backends and
    ``"galerkin"`` for affine PDE backends.
    """

    kind: str
    domain: ParameterDomain

    @property
    def ndof(self) -> int:
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError

    def truth(self, mus) -> np.ndarray:
        raise NotImplementedError

    def solve(self, mu) -> Snapshot:
        raise NotImplementedError

    def inner(self, u, v):
        raise NotImplementedError

    def norm(self, u) -> np.ndarray:
        raise NotImplementedError

    def error(self, mu, basis) -> float:
        raise NotImplementedError

    def check_point(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if mu.shape[-1] != self.domain.dim or not np.all(self.domain.contains(mu, atol=1e-12)):
            raise ValueError(f"parameter {mu} outside {self.domain.lower}..{self.domain.upper}")
        return mu

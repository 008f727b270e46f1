from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


def trapezoid_weights(a: float, b: float, n: int) -> np.ndarray:
    h = (b - a) / (n - 1)
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


@dataclass(frozen=True, eq=False)
class SpatialGrid:
    """Tensor lattice on a box with trapezoidal quadrature weights.

    Nodes are numbered with the first coordinate running fastest.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        lower = tuple(float(x) for x in self.lower)
        upper = tuple(float(x) for x in self.upper)
        counts = tuple(int(c) for c in self.counts)
        if not (len(lower) == len(upper) == len(counts)):
            raise ValueError("lower, upper and counts must have equal length")
        if any(c < 2 for c in counts):
            raise ValueError("grid needs at least 2 nodes per direction")
        if any(lo >= hi for lo, hi in zip(lower, upper)):
            raise ValueError("empty spatial box")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "counts", counts)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @cached_property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, c) for lo, hi, c in zip(self.lower, self.upper, self.counts)]

    @cached_property
    def axis_weights(self) -> list[np.ndarray]:
        return [trapezoid_weights(lo, hi, c) for lo, hi, c in zip(self.lower, self.upper, self.counts)]

    @cached_property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel(order="F") for m in mesh], axis=-1)

    @cached_property
    def weights(self) -> np.ndarray:
        w = self.axis_weights[0]
        for wk in self.axis_weights[1:]:
            w = np.multiply.outer(wk, w).ravel()
        return w

    @property
    def measure(self) -> float:
        return float(np.prod(np.subtract(self.upper, self.lower)))

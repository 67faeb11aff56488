"""Truncated rectangular grid over the fast variables and nodal fields on it."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


def _symmetric_nodes(r: float, n: int) -> np.ndarray:
    """linspace(-r, r, n) made exactly odd so reflections map nodes onto nodes."""
    y = np.linspace(-r, r, n)
    return 0.5 * (y - y[::-1])


@dataclass(frozen=True)
class Grid2D:
    """Uniform node grid on [-R1, R1] x [-R2, R2].

    Counts must be odd so that the origin is a node.  Nodal arrays are indexed
    ``values[i1, i2]`` with y1 along the first axis.
    """

    half_widths: tuple[float, float]
    counts: tuple[int, int]

    def __post_init__(self):
        r1, r2 = (float(r) for r in self.half_widths)
        n1, n2 = (int(n) for n in self.counts)
        if r1 <= 0 or r2 <= 0:
            raise ValueError("half widths must be positive")
        if n1 < 3 or n2 < 3:
            raise ValueError("need at least 3 nodes per direction")
        if n1 % 2 == 0 or n2 % 2 == 0:
            raise ValueError("node counts must be odd so that the origin is on the grid")
        object.__setattr__(self, "half_widths", (r1, r2))
        object.__setattr__(self, "counts", (n1, n2))

    @classmethod
    def default_for(cls, alpha: float, n: int = 241, width: float = 6.0) -> "Grid2D":
        r = width / np.sqrt(alpha)
        return cls((r, r), (n, n))

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts

    @property
    def size(self) -> int:
        return self.counts[0] * self.counts[1]

    @cached_property
    def spacings(self) -> tuple[float, float]:
        return tuple(2 * r / (n - 1) for r, n in zip(self.half_widths, self.counts))

    @property
    def cell_area(self) -> float:
        h1, h2 = self.spacings
        return h1 * h2

    @cached_property
    def y1(self) -> np.ndarray:
        return _symmetric_nodes(self.half_widths[0], self.counts[0])

    @cached_property
    def y2(self) -> np.ndarray:
        return _symmetric_nodes(self.half_widths[1], self.counts[1])

    @cached_property
    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.y1, self.y2, indexing="ij")

    @property
    def origin_index(self) -> tuple[int, int]:
        return (self.counts[0] // 2, self.counts[1] // 2)

    def inner_mask(self, fraction: float = 0.5) -> np.ndarray:
        """Nodes with |y1| <= fraction*R1 and |y2| <= fraction*R2."""
        Y1, Y2 = self.mesh
        r1, r2 = self.half_widths
        tol = 1e-12
        return (np.abs(Y1) <= fraction * r1 + tol) & (np.abs(Y2) <= fraction * r2 + tol)

    def scaled(self, factor: int) -> "Grid2D":
        """Same spacing, half widths multiplied by an integer factor."""
        n1, n2 = self.counts
        r1, r2 = self.half_widths
        return Grid2D((r1 * factor, r2 * factor),
                      ((n1 - 1) * factor + 1, (n2 - 1) * factor + 1))

    def evaluate(self, fn) -> "Field":
        Y1, Y2 = self.mesh
        vals = np.broadcast_to(np.asarray(fn(Y1, Y2), dtype=float), self.shape).copy()
        return Field(self, vals)


@dataclass
class Field:
    grid: Grid2D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @classmethod
    def constant(cls, grid: Grid2D, c: float) -> "Field":
        return cls(grid, np.full(grid.shape, float(c)))

    def at_origin(self) -> float:
        return float(self.values[self.grid.origin_index])

    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())

    def integrate(self, weights: "Field | np.ndarray | None" = None) -> float:
        """Nodal quadrature sum(values * weights) * cell_area."""
        w = 1.0 if weights is None else np.asarray(getattr(weights, "values", weights))
        return float(np.sum(self.values * w) * self.grid.cell_area)

    def __add__(self, other):
        return Field(self.grid, self.values + getattr(other, "values", other))

    def __sub__(self, other):
        return Field(self.grid, self.values - getattr(other, "values", other))

    def __mul__(self, c):
        return Field(self.grid, self.values * getattr(c, "values", c))

    __rmul__ = __mul__


def restrict(field_: Field, target: Grid2D) -> Field:
    """Sample a field on a grid whose nodes are a subset of its own nodes."""
    src = field_.grid
    h1, h2 = src.spacings
    i1 = np.rint((target.y1 + src.half_widths[0]) / h1).astype(int)
    i2 = np.rint((target.y2 + src.half_widths[1]) / h2).astype(int)
    if (i1.min() < 0 or i2.min() < 0 or i1.max() >= src.counts[0] or i2.max() >= src.counts[1]
            or not np.allclose(src.y1[i1], target.y1, atol=1e-9 * h1)
            or not np.allclose(src.y2[i2], target.y2, atol=1e-9 * h2)):
        raise ValueError("target grid nodes are not a subset of the source grid nodes")
    return Field(target, field_.values[np.ix_(i1, i2)])


def write_field_csv(path, field_: Field, column: str = "density") -> Path:
    """One row per node: y1_center, y2_center, <column>; 17 significant digits."""
    path = Path(path)
    Y1, Y2 = field_.grid.mesh
    lines = [f"y1_center,y2_center,{column}"]
    for a, b, v in zip(Y1.ravel(), Y2.ravel(), field_.values.ravel()):
        lines.append(f"{a:.17g},{b:.17g},{v:.17g}")
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    return path


def read_field_csv(path, grid: Grid2D | None = None) -> Field:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    y1 = np.unique(data[:, 0])
    y2 = np.unique(data[:, 1])
    if grid is None:
        grid = Grid2D((float(y1.max()), float(y2.max())), (y1.size, y2.size))
    if data.shape[0] != grid.size:
        raise ValueError(f"{path}: expected {grid.size} rows, found {data.shape[0]}")
    return Field(grid, data[:, 2].reshape(grid.shape))

"""Uniform node-centred grids on rectangles, with Dirichlet interior indexing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BOUNDARY = -1


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Node-centred grid over (xmin, xmax) x (ymin, ymax) with square cells.

    Node (i, j) sits at (xmin + i*h, ymin + j*h).  Full-grid arrays are
    flattened with i (the x index) as the slow axis, so a field of shape
    ``(nx, ny)`` ravels to ``i*ny + j``.  Interior nodes are numbered the
    same way over the ``(nx-2, ny-2)`` block.
    """

    nx: int
    ny: int
    xmin: float
    xmax: float
    ymin: float
    ymax: float
    h: float = field(init=False)

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise GridError(f"need at least 3 nodes per axis, got {self.nx}x{self.ny}")
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise GridError("empty domain")
        hx = (self.xmax - self.xmin) / (self.nx - 1)
        hy = (self.ymax - self.ymin) / (self.ny - 1)
        if abs(hx - hy) > 1e-12 * max(hx, hy):
            raise GridError(f"cells are not square: hx={hx!r}, hy={hy!r}")
        object.__setattr__(self, "h", hx)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.xmax, self.ymin, self.ymax)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def interior_shape(self) -> tuple[int, int]:
        return (self.nx - 2, self.ny - 2)

    @property
    def n_interior(self) -> int:
        return (self.nx - 2) * (self.ny - 2)

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    @property
    def x(self) -> np.ndarray:
        # last node pinned so corners reproduce the bounds exactly
        xs = self.xmin + self.h * np.arange(self.nx)
        xs[-1] = self.xmax
        return xs

    @property
    def y(self) -> np.ndarray:
        ys = self.ymin + self.h * np.arange(self.ny)
        ys[-1] = self.ymax
        return ys

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates as two ``(nx, ny)`` arrays."""
        return np.meshgrid(self.x, self.y, indexing="ij")

    def interior_mesh(self) -> tuple[np.ndarray, np.ndarray]:
        X, Y = self.mesh()
        return X[1:-1, 1:-1], Y[1:-1, 1:-1]

    def node(self, i: int, j: int) -> tuple[float, float]:
        self._check(i, j)
        return (float(self.x[i]), float(self.y[j]))

    def is_boundary(self, i: int, j: int) -> bool:
        self._check(i, j)
        return i == 0 or j == 0 or i == self.nx - 1 or j == self.ny - 1

    def interior_index(self, i: int, j: int) -> int:
        """Consecutive index of an interior node, or ``BOUNDARY``."""
        if self.is_boundary(i, j):
            return BOUNDARY
        return (i - 1) * (self.ny - 2) + (j - 1)

    def interior_node(self, index: int) -> tuple[int, int]:
        """Inverse of :meth:`interior_index`."""
        if not 0 <= index < self.n_interior:
            raise IndexError(f"interior index {index} out of range")
        i, j = divmod(index, self.ny - 2)
        return i + 1, j + 1

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
        return mask

    def embed(self, interior_values: np.ndarray) -> np.ndarray:
        """Pad an interior vector with zeros on the boundary; returns ``(nx, ny)``."""
        v = np.asarray(interior_values)
        if v.shape[0] != self.n_interior:
            raise GridError(f"expected {self.n_interior} interior values, got {v.shape[0]}")
        out = np.zeros(self.shape, dtype=v.dtype)
        out[1:-1, 1:-1] = v.reshape(self.interior_shape)
        return out

    def restrict(self, values: np.ndarray) -> np.ndarray:
        """Interior part of a full-grid array, flattened."""
        return np.asarray(values).reshape(self.shape)[1:-1, 1:-1].ravel()

    def nearest_node(self, point) -> tuple[int, int]:
        px, py = point
        i = int(np.clip(np.rint((px - self.xmin) / self.h), 0, self.nx - 1))
        j = int(np.clip(np.rint((py - self.ymin) / self.h), 0, self.ny - 1))
        return i, j

    def contains(self, x, y) -> np.ndarray:
        """Open-domain membership test, vectorised."""
        return (x > self.xmin) & (x < self.xmax) & (y > self.ymin) & (y < self.ymax)

    def distance_to_boundary(self, point) -> float:
        px, py = point
        return float(min(px - self.xmin, self.xmax - px, py - self.ymin, self.ymax - py))

    def _check(self, i, j):
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise IndexError(f"node ({i}, {j}) outside {self.nx}x{self.ny} grid")


def build_grid(bounds, n: int, ny: int | None = None) -> Grid:
    """Grid with ``n`` nodes along x; ``ny`` defaults to whatever keeps cells square.

    Raises :class:`GridError` when the aspect ratio does not admit square
    cells with an integer node count.
    """
    xmin, xmax, ymin, ymax = (float(b) for b in bounds)
    if n < 3:
        raise GridError(f"need n >= 3, got {n}")
    if ny is None:
        ny = n
    return Grid(int(n), int(ny), xmin, xmax, ymin, ymax)

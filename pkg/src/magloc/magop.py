"""Gauge-covariant finite-difference magnetic Laplacian with Dirichlet conditions.

Each interior link p -> q carries the Peierls factor exp(-i theta_pq),
theta_pq = A((p+q)/2) . (q - p).  Then

    (H psi)(p) = sum_q (psi(p) - exp(-i theta_pq) psi(q)) / h^2 + V(p) psi(p)

with links to boundary nodes dropped.  The quadratic form is a sum of
squared covariant differences, so H is Hermitian and positive
semidefinite for V >= 0, and A -> A + grad g maps H to D H D* with
D = diag(exp(i g)) whenever the midpoint rule integrates grad g exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.fft
import scipy.io
import scipy.sparse as sp

from .grid import Grid
from .vfield import ScalarField, VectorField2


class OperatorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HermitianOperator:
    grid: Grid
    matrix: sp.csr_matrix
    max_link_phase: float = 0.0
    # node average of theta^2/h^2 over links plus V; the preconditioner shift
    mean_potential: float = 0.0

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.matrix.data)

    def apply(self, vec: np.ndarray) -> np.ndarray:
        vec = np.asarray(vec)
        if vec.shape[0] != self.dim:
            raise OperatorError(f"vector has length {vec.shape[0]}, operator dim is {self.dim}")
        return self.matrix @ vec

    def __matmul__(self, vec):
        return self.apply(vec)

    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal().real

    def write_matrix_market(self, target, comment: str = "") -> None:
        """Coordinate format, lower triangle, ``hermitian`` (or ``symmetric`` when real)."""
        symmetry = "symmetric" if self.is_real else "hermitian"
        scipy.io.mmwrite(target, sp.tril(self.matrix).tocoo(), comment=comment, symmetry=symmetry)


def _links(grid: Grid):
    """Interior-to-interior links as (p, q, midpoint x, midpoint y, dx, dy)."""
    m1, m2 = grid.interior_shape
    idx = np.arange(m1 * m2).reshape(m1, m2)
    X, Y = grid.interior_mesh()
    h = grid.h
    px = idx[:-1, :].ravel()
    qx = idx[1:, :].ravel()
    py = idx[:, :-1].ravel()
    qy = idx[:, 1:].ravel()
    return (
        (px, qx, (X[:-1, :] + 0.5 * h).ravel(), Y[:-1, :].ravel(), h, 0.0),
        (py, qy, X[:, :-1].ravel(), (Y[:, :-1] + 0.5 * h).ravel(), 0.0, h),
    )


def link_phases(grid: Grid, A: VectorField2):
    """theta for every x-link and y-link between interior nodes."""
    out = []
    ax, ay = A.arrays()
    for k, (p, q, mx, my, dx, dy) in enumerate(_links(grid)):
        if A.func is not None:
            fx, fy = A.func(mx, my)
            comp = np.broadcast_to(fx if k == 0 else fy, mx.shape)
        else:
            # average of the two endpoint samples
            a = (ax if k == 0 else ay)[1:-1, 1:-1]
            if k == 0:
                comp = (0.5 * (a[:-1, :] + a[1:, :])).ravel()
            else:
                comp = (0.5 * (a[:, :-1] + a[:, 1:])).ravel()
        out.append((p, q, np.asarray(comp, dtype=float) * (dx + dy)))
    return out


def assemble(grid: Grid, A: Optional[VectorField2] = None, V: Optional[ScalarField] = None) -> HermitianOperator:
    """Sparse H(A) [+ V] on the interior nodes of ``grid``."""
    if A is not None and A.grid != grid:
        raise OperatorError("vector potential sampled on a different grid")
    if V is not None and V.grid != grid:
        raise OperatorError("potential sampled on a different grid")
    n = grid.n_interior
    h2 = grid.h ** 2
    diag = np.full(n, 4.0 / h2)
    if V is not None:
        diag = diag + V.interior()
    rows = [np.arange(n)]
    cols = [np.arange(n)]
    max_phase = 0.0
    a2 = 0.0
    if A is None:
        vals = [diag]
        for p, q, *_ in _links(grid):
            off = np.full(p.shape, -1.0 / h2)
            rows += [p, q]
            cols += [q, p]
            vals += [off, off]
    else:
        vals = [diag.astype(complex)]
        for p, q, theta in link_phases(grid, A):
            off = -np.exp(-1j * theta) / h2
            if theta.size:
                max_phase = max(max_phase, float(np.max(np.abs(theta))))
                a2 += float(np.sum(theta ** 2)) / h2
            rows += [p, q]
            cols += [q, p]
            vals += [off, np.conj(off)]
    matrix = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    matrix.sum_duplicates()
    matrix.sort_indices()
    # each interior link touches two nodes, each node has two links per axis
    mean_pot = a2 / n + (float(np.mean(V.interior())) if V is not None else 0.0)
    return HermitianOperator(grid, matrix, max_phase, mean_pot)


def dirichlet_laplacian(grid: Grid) -> HermitianOperator:
    """Real 5-point -Laplacian (A = 0, V = 0)."""
    return assemble(grid)


# --- closed-form Dirichlet spectrum on the rectangle ------------------------

def dirichlet_eigenvalues_1d(m: int, h: float) -> np.ndarray:
    k = np.arange(1, m + 1)
    return (4.0 / h ** 2) * np.sin(k * np.pi / (2 * (m + 1))) ** 2


def dirichlet_spectrum(grid: Grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All eigenvalues of the 5-point Dirichlet Laplacian with their (p, q) mode numbers, ascending."""
    m1, m2 = grid.interior_shape
    lx = dirichlet_eigenvalues_1d(m1, grid.h)
    ly = dirichlet_eigenvalues_1d(m2, grid.h)
    lam = (lx[:, None] + ly[None, :]).ravel()
    p, q = np.meshgrid(np.arange(1, m1 + 1), np.arange(1, m2 + 1), indexing="ij")
    order = np.argsort(lam, kind="stable")
    return lam[order], p.ravel()[order], q.ravel()[order]


def dirichlet_mode(grid: Grid, p: int, q: int) -> np.ndarray:
    """Interior samples of mode (p, q), unit norm in h^2 * sum |.|^2."""
    m1, m2 = grid.interior_shape
    i = np.arange(1, m1 + 1)
    j = np.arange(1, m2 + 1)
    s = np.outer(np.sin(p * np.pi * i / (m1 + 1)), np.sin(q * np.pi * j / (m2 + 1)))
    s *= 2.0 / (grid.h * np.sqrt((m1 + 1) * (m2 + 1)))
    return s.ravel()


class DirichletSolver:
    """Apply (L + shift)^-1 for the 5-point Dirichlet Laplacian via DST-I.

    Works column-wise on ``(n_interior,)`` or ``(n_interior, b)`` arrays,
    real or complex.
    """

    def __init__(self, grid: Grid, shift: float = 0.0):
        m1, m2 = grid.interior_shape
        self.shape = (m1, m2)
        lam = (dirichlet_eigenvalues_1d(m1, grid.h)[:, None]
               + dirichlet_eigenvalues_1d(m2, grid.h)[None, :])
        self.inv = 1.0 / (lam + shift)

    def __call__(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs)
        vec = rhs.ndim == 1
        b = rhs.reshape(self.shape + ((1,) if vec else (rhs.shape[1],)))
        coef = scipy.fft.dstn(b, type=1, axes=(0, 1), norm="ortho")
        coef *= self.inv[:, :, None]
        out = scipy.fft.idstn(coef, type=1, axes=(0, 1), norm="ortho")
        return out.reshape(rhs.shape)

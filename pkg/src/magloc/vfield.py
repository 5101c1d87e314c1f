"""Scalar and vector fields sampled on grid nodes, and their calculus.

Derivatives are central at interior nodes and one-sided second order at
boundary nodes (``numpy.gradient`` with ``edge_order=2``).  The Helmholtz
split uses the same discrete gradient, so the divergence-free part is
divergence free for exactly the stencil that measures it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .expr import FieldExpression
from .grid import Grid


class FieldError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray  # (nx*ny,)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.shape[0] != self.grid.size:
            raise FieldError(f"expected {self.grid.size} samples, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise FieldError("scalar field has non-finite samples")
        object.__setattr__(self, "values", v)

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def interior(self) -> np.ndarray:
        return self.grid.restrict(self.values)

    def at(self, x, y) -> np.ndarray:
        return bilinear(self.grid, self.as_array(), x, y)


@dataclass(frozen=True, eq=False)
class VectorField2:
    """Two node-sampled components, plus the generating function when known.

    ``func`` maps coordinate arrays to ``(ax, ay)``; link phases and path
    integrals use it in preference to interpolating the samples.
    """

    grid: Grid
    ax: np.ndarray
    ay: np.ndarray
    func: Optional[Callable] = None
    label: str = ""

    def __post_init__(self):
        ax = np.asarray(self.ax, dtype=float).ravel()
        ay = np.asarray(self.ay, dtype=float).ravel()
        for comp in (ax, ay):
            if comp.shape[0] != self.grid.size:
                raise FieldError(f"expected {self.grid.size} samples, got {comp.shape[0]}")
            if not np.all(np.isfinite(comp)):
                raise FieldError("vector field has non-finite samples")
        object.__setattr__(self, "ax", ax)
        object.__setattr__(self, "ay", ay)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.ax.reshape(self.grid.shape), self.ay.reshape(self.grid.shape)

    def at(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate off-grid: analytic when available, else bilinear."""
        if self.func is not None:
            fx, fy = self.func(x, y)
            return np.asarray(fx, dtype=float), np.asarray(fy, dtype=float)
        ax, ay = self.arrays()
        return bilinear(self.grid, ax, x, y), bilinear(self.grid, ay, x, y)

    def __add__(self, other: "VectorField2") -> "VectorField2":
        _same_grid(self, other)
        func = None
        if self.func is not None and other.func is not None:
            f, g = self.func, other.func

            def func(x, y):
                a, b = f(x, y), g(x, y)
                return a[0] + b[0], a[1] + b[1]

        return VectorField2(self.grid, self.ax + other.ax, self.ay + other.ay, func)

    def __sub__(self, other: "VectorField2") -> "VectorField2":
        return self + other.scaled(-1.0)

    def scaled(self, c: float) -> "VectorField2":
        func = None
        if self.func is not None:
            f = self.func

            def func(x, y):
                a = f(x, y)
                return c * np.asarray(a[0]), c * np.asarray(a[1])

        return VectorField2(self.grid, c * self.ax, c * self.ay, func)

    def norm(self) -> np.ndarray:
        return np.hypot(self.ax, self.ay)


def _same_grid(a, b):
    if a.grid != b.grid:
        raise FieldError("fields live on different grids")


def bilinear(grid: Grid, values: np.ndarray, x, y) -> np.ndarray:
    """Bilinear interpolation of an ``(nx, ny)`` node array.

    Points outside the bounding box are clamped to it; callers that care
    check containment first.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    u = np.clip((x - grid.xmin) / grid.h, 0.0, grid.nx - 1)
    v = np.clip((y - grid.ymin) / grid.h, 0.0, grid.ny - 1)
    i = np.minimum(u.astype(np.intp), grid.nx - 2)
    j = np.minimum(v.astype(np.intp), grid.ny - 2)
    fu = u - i
    fv = v - j
    flat = values.reshape(-1)
    ny = grid.ny
    k = i * ny + j
    return ((1 - fu) * ((1 - fv) * flat[k] + fv * flat[k + 1])
            + fu * ((1 - fv) * flat[k + ny] + fv * flat[k + ny + 1]))


def sample_scalar(expr, grid: Grid) -> ScalarField:
    expr = _as_expression(expr)
    X, Y = grid.mesh()
    vals = np.asarray(expr(X, Y), dtype=float)
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))[0]
        raise FieldError(f"{expr.text!r} is not finite at node {tuple(bad)}")
    return ScalarField(grid, vals.ravel())


def sample_field(exprs, grid: Grid, label: str = "") -> VectorField2:
    """Evaluate a pair of expressions at every node."""
    ex, ey = (_as_expression(e) for e in exprs)
    X, Y = grid.mesh()
    ax = np.asarray(ex(X, Y), dtype=float)
    ay = np.asarray(ey(X, Y), dtype=float)
    for name, comp, e in (("x", ax, ex), ("y", ay, ey)):
        if not np.all(np.isfinite(comp)):
            bad = np.argwhere(~np.isfinite(comp))[0]
            raise FieldError(f"{name}-component {e.text!r} is not finite at node {tuple(bad)}")

    def func(x, y):
        return ex(x, y), ey(x, y)

    return VectorField2(grid, ax.ravel(), ay.ravel(), func, label or f"({ex.text}, {ey.text})")


def field_from_function(func: Callable, grid: Grid, label: str = "") -> VectorField2:
    X, Y = grid.mesh()
    ax, ay = func(X, Y)
    return VectorField2(grid, np.broadcast_to(ax, X.shape).ravel(),
                        np.broadcast_to(ay, X.shape).ravel(), func, label)


def _as_expression(e) -> FieldExpression:
    if isinstance(e, FieldExpression):
        return e
    if isinstance(e, (int, float)):
        return FieldExpression(repr(float(e)))
    return FieldExpression(str(e))


# --- builtin fields -------------------------------------------------------

def example1(a: float = 1000.0) -> tuple[str, str]:
    """Polynomial field -a(x^2+y^2, x^2-y^2); curl = -2a(x-y)."""
    return (f"-{a!r}*(x^2+y^2)", f"-{a!r}*(x^2-y^2)")


def constant_modulus(a: float, f: str) -> tuple[str, str]:
    """-a(cos f, sin f); |A| = a everywhere."""
    return (f"-{a!r}*cos({f})", f"-{a!r}*sin({f})")


def example3(a: float = 50.0) -> tuple[str, str]:
    return constant_modulus(a, "5*pi*sin(x^2+y^2)")


def example4(a: float = 50.0) -> tuple[str, str]:
    return constant_modulus(a, "pi*sin(pi*x)*cos(pi*y)")


def uniform(B: float) -> tuple[str, str]:
    """Symmetric gauge of the constant magnetic field B: (B/2)(-y, x)."""
    return (f"-{B / 2!r}*y", f"{B / 2!r}*x")


BUILTIN = {"example1": example1, "example3": example3, "example4": example4, "uniform": uniform}


# --- calculus -------------------------------------------------------------

def gradient(s: ScalarField) -> VectorField2:
    arr = s.as_array()
    gx = np.gradient(arr, s.grid.h, axis=0, edge_order=2)
    gy = np.gradient(arr, s.grid.h, axis=1, edge_order=2)
    return VectorField2(s.grid, gx.ravel(), gy.ravel())


def curl(field: VectorField2) -> ScalarField:
    """dAy/dx - dAx/dy."""
    ax, ay = field.arrays()
    h = field.grid.h
    return ScalarField(field.grid, (np.gradient(ay, h, axis=0, edge_order=2)
                                    - np.gradient(ax, h, axis=1, edge_order=2)).ravel())


def divergence(field: VectorField2) -> ScalarField:
    ax, ay = field.arrays()
    h = field.grid.h
    return ScalarField(field.grid, (np.gradient(ax, h, axis=0, edge_order=2)
                                    + np.gradient(ay, h, axis=1, edge_order=2)).ravel())


def jacobian(field: VectorField2, i: int, j: int) -> np.ndarray:
    """[[dAx/dx, dAx/dy], [dAy/dx, dAy/dy]] by central differences at node (i, j)."""
    ax, ay = field.arrays()
    h = field.grid.h
    return np.array([
        [(ax[i + 1, j] - ax[i - 1, j]) / (2 * h), (ax[i, j + 1] - ax[i, j - 1]) / (2 * h)],
        [(ay[i + 1, j] - ay[i - 1, j]) / (2 * h), (ay[i, j + 1] - ay[i, j - 1]) / (2 * h)],
    ])


def _diff_matrix(n: int, h: float) -> sp.csr_matrix:
    """1-D first derivative matching ``np.gradient(edge_order=2)``."""
    rows, cols, vals = [], [], []
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5 / h, 0.5 / h]
    rows += [0, 0, 0, n - 1, n - 1, n - 1]
    cols += [0, 1, 2, n - 3, n - 2, n - 1]
    vals += [-1.5 / h, 2.0 / h, -0.5 / h, 0.5 / h, -2.0 / h, 1.5 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def gradient_operators(grid: Grid) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Sparse (Gx, Gy) acting on flattened full-grid vectors."""
    Dx = _diff_matrix(grid.nx, grid.h)
    Dy = _diff_matrix(grid.ny, grid.h)
    Gx = sp.kron(Dx, sp.identity(grid.ny), format="csr")
    Gy = sp.kron(sp.identity(grid.nx), Dy, format="csr")
    return Gx, Gy


def outward_normals(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Unit outward normals at boundary nodes (bisector at corners), zero inside."""
    nx = np.zeros(grid.shape)
    ny = np.zeros(grid.shape)
    nx[0, :] -= 1.0
    nx[-1, :] += 1.0
    ny[:, 0] -= 1.0
    ny[:, -1] += 1.0
    norm = np.hypot(nx, ny)
    norm[norm == 0] = 1.0
    return nx / norm, ny / norm


@dataclass(frozen=True, eq=False)
class HelmholtzParts:
    """A = grad(phi) + f with div f = 0 inside and f.n = 0 on the boundary."""

    phi: ScalarField
    f: VectorField2
    div_residual: float  # max |div f| over interior nodes
    normal_residual: float  # max |f.n| over boundary nodes
    div_scale: float  # max |div A|


class HelmholtzError(RuntimeError):
    pass


def helmholtz_decompose(field: VectorField2, tol: float = 1e-10) -> HelmholtzParts:
    """Split ``field`` into a gradient and a divergence-free remainder.

    phi solves div(grad phi) = div A at interior nodes with the discrete
    normal derivative n.grad(phi) = n.A at boundary nodes, phi pinned to
    zero mean.  The operator is the composition of the same stencils used
    by :func:`divergence` and :func:`gradient`, so div f vanishes to solver
    precision rather than to truncation error.  The system has the
    constants as its only null space and is consistent for every A (a
    discrete divergence theorem holds for these stencils), so one equation
    is redundant and is traded for the pin.  Solved by sparse LU with
    iterative refinement.
    """
    grid = field.grid
    Gx, Gy = gradient_operators(grid)
    nxv, nyv = (n.ravel() for n in outward_normals(grid))
    interior = ~grid.boundary_mask().ravel()

    lap = (Gx @ Gx + Gy @ Gy).tocsr()
    nder = (sp.diags(nxv) @ Gx + sp.diags(nyv) @ Gy).tocsr()
    M = sp.vstack([lap, nder]).tocsr()
    rows = np.where(interior, np.arange(grid.size), grid.size + np.arange(grid.size))
    M = M[rows]
    rhs = np.where(interior, Gx @ field.ax + Gy @ field.ay, nxv * field.ax + nyv * field.ay)

    # The consistency weights vanish at corners but never at node (0, 1),
    # so that boundary equation is the redundant one; it becomes phi = 0.
    pin = 1
    M = M.tolil()
    M[pin, :] = 0.0
    M[pin, pin] = 1.0
    rhs = rhs.copy()
    rhs[pin] = 0.0
    M = M.tocsc()
    lu = spla.splu(M)
    phi = lu.solve(rhs)
    for _ in range(3):  # iterative refinement
        r = rhs - M @ phi
        if np.max(np.abs(r)) <= 1e-3 * tol * (1.0 + np.max(np.abs(rhs))):
            break
        phi = phi + lu.solve(r)
    if not np.all(np.isfinite(phi)):
        raise HelmholtzError("Neumann solve produced non-finite values")
    phi -= phi.mean()

    phi_field = ScalarField(grid, phi)
    g = gradient(phi_field)
    f = VectorField2(grid, field.ax - g.ax, field.ay - g.ay, label="divergence-free part")
    div_f = divergence(f).values[interior]
    div_a = divergence(field).values
    bnd = ~interior
    normal = (nxv * f.ax + nyv * f.ay)[bnd]
    parts = HelmholtzParts(
        phi=phi_field,
        f=f,
        div_residual=float(np.max(np.abs(div_f))) if div_f.size else 0.0,
        normal_residual=float(np.max(np.abs(normal))),
        div_scale=float(np.max(np.abs(div_a))),
    )
    if parts.div_residual > tol * (1.0 + parts.div_scale) or \
            parts.normal_residual > tol * (1.0 + np.max(field.norm())):
        raise HelmholtzError(
            f"decomposition residuals too large: div {parts.div_residual:.3e}, "
            f"normal {parts.normal_residual:.3e} (tol {tol:g})")
    return parts


# --- linear splitting -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearSplit:
    A1: VectorField2  # conservative: A(x0) + sym(J)(x - x0)
    A2: VectorField2  # solenoidal: (curl/2) R (x - x0)
    Anonlin: VectorField2
    curl_at_x0: float
    x0: tuple[float, float]
    jacobian: np.ndarray


def linearize_field(field: VectorField2, x0) -> LinearSplit:
    """Split A into A1 + A2 + Anonlin about the node nearest ``x0``."""
    grid = field.grid
    i, j = grid.nearest_node(x0)
    if grid.is_boundary(i, j) or not grid.contains(*x0):
        raise FieldError(f"x0={tuple(x0)} is not strictly inside the domain")
    J = jacobian(field, i, j)
    xc, yc = grid.node(i, j)
    ax, ay = field.arrays()
    a0 = np.array([ax[i, j], ay[i, j]])
    S = 0.5 * (J + J.T)
    c = float(J[1, 0] - J[0, 1])

    def lin1(x, y):
        dx, dy = np.asarray(x) - xc, np.asarray(y) - yc
        return a0[0] + S[0, 0] * dx + S[0, 1] * dy, a0[1] + S[1, 0] * dx + S[1, 1] * dy

    def lin2(x, y):
        dx, dy = np.asarray(x) - xc, np.asarray(y) - yc
        return -0.5 * c * dy, 0.5 * c * dx

    A1 = field_from_function(lin1, grid, "A1")
    A2 = field_from_function(lin2, grid, "A2")
    rest = VectorField2(grid, field.ax - A1.ax - A2.ax, field.ay - A1.ay - A2.ay, label="Anonlin")
    if field.func is not None:
        f = field.func

        def nonlin(x, y):
            a, b, d = f(x, y), lin1(x, y), lin2(x, y)
            return a[0] - b[0] - d[0], a[1] - b[1] - d[1]

        rest = VectorField2(grid, rest.ax, rest.ay, nonlin, "Anonlin")
    return LinearSplit(A1, A2, rest, c, (xc, yc), J)

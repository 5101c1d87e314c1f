"""Smallest eigenpairs of a HermitianOperator by block LOBPCG.

Locally optimal block preconditioned conjugate gradients with a few guard
vectors beyond the k requested, soft locking of converged columns and a
Rayleigh-Ritz step on span[X, W, P] every iteration.

Preconditioners: ``"amg"`` (default) is one smoothed-aggregation V-cycle
on H itself; ``"dirichlet"`` is the exact DST inverse of the 5-point
Laplacian shifted by the node average of |A|^2 + V; ``"jacobi"`` is the
diagonal.  Strong fields make the magnetic operator far from the plain
Laplacian, which is where the multigrid cycle pays off.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pyamg
import scipy.linalg as sla
import scipy.sparse as sp

from .grid import Grid
from .magop import DirichletSolver, HermitianOperator
from .rng import stream

log = logging.getLogger(__name__)

DENSE_LIMIT = 400


@dataclass(eq=False)
class EigenPair:
    """``psi`` lives on interior nodes with h^2 * sum |psi|^2 = 1."""

    lam: float
    psi: np.ndarray
    residual: float

    def on_grid(self, grid: Grid) -> np.ndarray:
        return grid.embed(self.psi)


class EigenSolverError(RuntimeError):
    def __init__(self, message, residuals=None, pairs=None):
        super().__init__(message)
        self.residuals = residuals
        self.pairs = pairs


@dataclass
class SolveInfo:
    iterations: int = 0
    residual_history: list = field(default_factory=list)


def weighted_norm(grid_h: float, v: np.ndarray) -> np.ndarray:
    return grid_h * np.linalg.norm(v, axis=0)


def _ip(X, Z):
    """X^H Z without materialising conj(X)."""
    if np.iscomplexobj(X) or np.iscomplexobj(Z):
        return sla.blas.zgemm(1.0, X, Z, trans_a=2)
    return sla.blas.dgemm(1.0, X, Z, trans_a=1)


def _orthonormalize(Z, HZ, drop=1e-10):
    """Orthonormalise columns of Z (carrying HZ) via the Gram matrix, dropping dependent directions."""
    norms = np.linalg.norm(Z, axis=0)
    keep = norms > 0
    Z = Z[:, keep] / norms[keep]
    HZ = HZ[:, keep] / norms[keep]
    s, U = np.linalg.eigh(_herm(_ip(Z, Z)))
    good = s > drop * s.max() if s.size else s > 0
    C = U[:, good] / np.sqrt(s[good])
    return Z @ C, HZ @ C


def _project_out(X, HX, Z, HZ):
    c = _ip(X, Z)
    return Z - X @ c, HZ - HX @ c


def smallest_eigenpairs(op: HermitianOperator, k: int, tol: float = 1e-8, max_iter: int = 2000,
                        seed: int = 0, guard: int = 3, precond: str = "amg",
                        shift: float | None = None, info: SolveInfo | None = None,
                        start: np.ndarray | None = None) -> list[EigenPair]:
    """The ``k`` smallest eigenpairs, ascending, each with residual <= ``tol``.

    The residual is ||H psi - lam psi|| / max(lam, 1) in the grid-weighted
    norm.  ``start`` (n x j) seeds the first j block columns, e.g. with
    eigenvectors prolonged from a coarser grid; the rest are random.
    Raises :class:`EigenSolverError` (carrying the best residuals) if
    ``max_iter`` is exhausted.
    """
    n = op.dim
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    h = op.h
    info = info if info is not None else SolveInfo()
    b = min(k + guard, n)
    if n <= max(DENSE_LIMIT, 4 * b):
        return _dense(op, k)

    dtype = np.float64 if op.is_real else np.complex128
    rng = stream(seed, "lobpcg", n, b)
    X = rng.standard_normal((n, b))
    if dtype is np.complex128:
        X = X + 1j * rng.standard_normal((n, b))
    if start is not None:
        start = np.asarray(start).reshape(n, -1)[:, :b]
        X[:, :start.shape[1]] = start.real if dtype is np.float64 else start
        near = X[:, :1].copy()
    else:
        near = None
    X, _ = np.linalg.qr(X)
    HX = op.matrix @ X
    theta, C = sla.eigh(_herm(_ip(X, HX)))
    X = X @ C
    HX = op.matrix @ X

    if precond == "dirichlet":
        if shift is None:
            shift = max(op.mean_potential, 0.0)
        solver = DirichletSolver(op.grid, shift)
        apply_t = solver
    elif precond == "jacobi":
        dinv = 1.0 / op.diagonal()
        apply_t = lambda R: R * dinv[:, None]  # noqa: E731
    elif precond == "amg":
        # a prolonged ground state is a far better near-nullspace than the
        # constant vector, which the magnetic phase makes oscillatory
        apply_t = amg_preconditioner(op, shift or 0.0, near_null=near)
    elif precond in (None, "none"):
        apply_t = lambda R: R  # noqa: E731
    else:
        raise ValueError(f"unknown preconditioner {precond!r}")

    P = HP = None
    res = np.full(b, np.inf)
    for it in range(1, max_iter + 1):
        R = HX - X * theta
        res = np.linalg.norm(R, axis=0) / np.maximum(np.abs(theta), 1.0)
        info.iterations = it
        info.residual_history.append(res[:k].max())
        if np.all(res[:k] <= tol):
            break
        active = res > tol
        W = apply_t(R[:, active])
        if dtype is np.float64:
            W = W.real
        HW = op.matrix @ W
        if P is not None:
            Z = np.hstack([W, P[:, active]])
            HZ = np.hstack([HW, HP[:, active]])
        else:
            Z, HZ = W, HW
        # two passes of classical Gram-Schmidt against X keep the basis orthonormal
        Z, HZ = _project_out(X, HX, Z, HZ)
        Z, HZ = _orthonormalize(Z, HZ)
        Z, HZ = _project_out(X, HX, Z, HZ)
        Z, HZ = _orthonormalize(Z, HZ)

        xz = _ip(X, HZ)
        proj = np.block([[np.diag(theta).astype(xz.dtype), xz], [xz.conj().T, _herm(_ip(Z, HZ))]])
        vals, vecs = sla.eigh(_herm(proj), subset_by_index=[0, b - 1])
        cx, cz = vecs[:b], vecs[b:]
        P, HP = Z @ cz, HZ @ cz
        X, HX = X @ cx + P, HX @ cx + HP
        theta = vals
        if it % 20 == 0:
            # refresh against slow loss of orthogonality and drift in HX
            X, _ = np.linalg.qr(X)
            HX = op.matrix @ X
            theta, Cx = sla.eigh(_herm(_ip(X, HX)))
            X, HX, P, HP = X @ Cx, HX @ Cx, P @ Cx, HP @ Cx
        if it % 50 == 0:
            log.debug("lobpcg iter %d: max residual %.3e", it, res[:k].max())
    else:
        pairs = _pairs(op, X[:, :k], theta[:k], h)
        raise EigenSolverError(
            f"LOBPCG did not converge in {max_iter} iterations "
            f"(max residual {res[:k].max():.3e} > {tol:g})", res[:k], pairs)

    return _pairs(op, X[:, :k], theta[:k], h)


def amg_preconditioner(op: HermitianOperator, shift: float = 0.0,
                       near_null: np.ndarray | None = None):
    """One smoothed-aggregation V-cycle for H + shift, applied column by column.

    ``near_null`` (n x j) replaces the constant vector as the candidate
    near-nullspace used to build the aggregates' interpolation.
    """
    n = op.dim
    M = op.matrix if shift == 0.0 else (op.matrix + shift * sp.identity(n, format="csr")).tocsr()
    # pyamg estimates spectral radii from np.random vectors; pin the global
    # state during setup so the hierarchy (and every solve) is reproducible
    saved = np.random.get_state()
    np.random.seed(0)
    try:
        B = np.ones((n, 1)) if near_null is None else np.asarray(near_null).reshape(n, -1)
        ml = pyamg.smoothed_aggregation_solver(M, B=B.astype(M.dtype), max_coarse=500)
    finally:
        np.random.set_state(saved)
    cycle = ml.aspreconditioner(cycle="V")

    def apply(R):
        out = np.empty_like(R, dtype=np.result_type(R, M.dtype))
        for j in range(R.shape[1]):
            out[:, j] = cycle @ R[:, j]
        return out

    return apply


def _herm(M):
    return 0.5 * (M + M.conj().T)


def _pairs(op, X, theta, h):
    psi = X / h
    pairs = []
    for j in np.argsort(theta, kind="stable"):
        v = psi[:, j]
        # phase fixed so the largest-modulus entry is real positive
        m = np.argmax(np.abs(v))
        if np.iscomplexobj(v):
            v = v * (abs(v[m]) / v[m])
        elif v[m] < 0:
            v = -v
        lam = float(theta[j])
        pairs.append(EigenPair(lam, v, residual_of(op, lam, v)))
    return pairs


def residual_of(op: HermitianOperator, lam: float, psi: np.ndarray) -> float:
    """||H psi - lam psi|| / max(lam, 1), grid-weighted, recomputed from scratch."""
    r = op.matrix @ psi - lam * psi
    nrm = op.h * np.linalg.norm(psi)
    return float(op.h * np.linalg.norm(r) / (max(abs(lam), 1.0) * nrm))


def _dense(op, k):
    A = op.matrix.toarray()
    vals, vecs = np.linalg.eigh(A)
    return _pairs(op, vecs[:, :k], vals[:k], op.h)


def localization_point(pair: EigenPair, grid: Grid) -> tuple[float, float]:
    """Node where |psi| is largest; ties go to the smallest interior index."""
    idx = int(np.argmax(np.abs(pair.psi)))
    i, j = grid.interior_node(idx)
    return grid.node(i, j)


def gram_matrix(pairs: list[EigenPair], h: float) -> np.ndarray:
    Psi = np.column_stack([p.psi for p in pairs])
    return h * h * (Psi.conj().T @ Psi)


def prolong(coarse: Grid, fine: Grid, psi: np.ndarray, A=None) -> np.ndarray:
    """Interpolate interior vectors from ``coarse`` onto ``fine`` (2x refinement).

    Each new node m takes the average over its coarse neighbours p of
    exp(i theta_pm) psi(p), theta_pm = A((p+m)/2).(m-p): the eigenfunctions
    of the Peierls operator vary like these link phases, so plain
    interpolation of a rapidly turning phase would be far less accurate.
    ``psi`` may be one vector or an (n, b) block.
    """
    if (fine.nx - 1) != 2 * (coarse.nx - 1) or (fine.ny - 1) != 2 * (coarse.ny - 1) or fine.bounds != coarse.bounds:
        raise ValueError("fine grid must be the 2x refinement of the coarse grid")
    psi = np.asarray(psi)
    vec = psi.ndim == 1
    P = psi.reshape(coarse.n_interior, -1)
    out = np.zeros((fine.n_interior, P.shape[1]), dtype=complex)
    X, Y = fine.mesh()

    def phase(px, py, mx, my):
        if A is None:
            return np.ones(np.broadcast(px, mx).shape, dtype=complex)
        ax, ay = A.at(0.5 * (px + mx), 0.5 * (py + my))
        return np.exp(1j * (ax * (mx - px) + ay * (my - py)))

    for c in range(P.shape[1]):
        C = coarse.embed(P[:, c])
        F = np.zeros(fine.shape, dtype=complex)
        F[::2, ::2] = C
        # odd i, even j: neighbours at i-1 and i+1
        for di in (-1, 1):
            src = F[1 + di::2, ::2][: F[1::2, ::2].shape[0]]
            F[1::2, ::2] += 0.5 * phase(X[1 + di::2, ::2][: src.shape[0]], Y[1 + di::2, ::2][: src.shape[0]],
                                        X[1::2, ::2], Y[1::2, ::2]) * src
        for dj in (-1, 1):
            src = F[::2, 1 + dj::2][:, : F[::2, 1::2].shape[1]]
            F[::2, 1::2] += 0.5 * phase(X[::2, 1 + dj::2][:, : src.shape[1]], Y[::2, 1 + dj::2][:, : src.shape[1]],
                                        X[::2, 1::2], Y[::2, 1::2]) * src
        for di in (-1, 1):
            for dj in (-1, 1):
                sl = (slice(1 + di, None, 2), slice(1 + dj, None, 2))
                tgt = F[1::2, 1::2]
                src = F[::2, ::2][(1 + di) // 2:, (1 + dj) // 2:][: tgt.shape[0], : tgt.shape[1]]
                F[1::2, 1::2] += 0.25 * phase(X[sl][: tgt.shape[0], : tgt.shape[1]], Y[sl][: tgt.shape[0], : tgt.shape[1]],
                                              X[1::2, 1::2], Y[1::2, 1::2]) * src
        out[:, c] = fine.restrict(F)
    if not np.iscomplexobj(psi) and A is None:
        out = out.real
    return out[:, 0] if vec else out

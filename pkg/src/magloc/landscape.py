"""Torsion function, Dirichlet heat kernel and landscape bounds.

Every quantity is discrete: the torsion function solves the 5-point
problem L v = 1, heat kernels are eigen-expansions of the same L, and
inner products carry the grid weight h^2.  On a rectangle the spectrum
of L is known in closed form, which gives exact truncation remainders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla

from .bridge import BridgeSpec, MCParams, gaussian_kernel, phase_expectation
from .eig import EigenPair
from .grid import Grid
from .magop import DirichletSolver, dirichlet_eigenvalues_1d, dirichlet_laplacian, dirichlet_spectrum
from .vfield import HelmholtzParts, ScalarField

RATIO_TOL = 1e-6


class LandscapeError(RuntimeError):
    pass


# --- torsion ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TorsionInfo:
    iterations: int
    relative_residual: float
    error_bound: float  # max-norm bound on the solve error: ||r||_2 / lambda_min


def torsion(grid: Grid, rtol: float = 1e-10, maxiter: int = 1000, info: Optional[dict] = None) -> ScalarField:
    """Discrete torsion function: L v = 1 on interior nodes, v = 0 on the boundary.

    Conjugate gradients preconditioned by the exact DST inverse of L
    (so one or two steps suffice); the relative residual is recomputed
    afterwards and must not exceed ``rtol``.
    """
    op = dirichlet_laplacian(grid)
    n = op.dim
    b = np.ones(n)
    M = spla.LinearOperator((n, n), matvec=DirichletSolver(grid), dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    v, status = spla.cg(op.matrix, b, rtol=rtol * 0.1, atol=0.0, maxiter=maxiter, M=M, callback=cb)
    r = b - op.matrix @ v
    rel = float(np.linalg.norm(r) / np.linalg.norm(b))
    if status != 0 or rel > rtol:
        raise LandscapeError(f"torsion solve did not converge (status {status}, residual {rel:.2e})")
    lam_min = float(dirichlet_spectrum(grid)[0][0])
    if info is not None:
        info["torsion"] = TorsionInfo(count[0], rel, float(np.linalg.norm(r)) / lam_min)
    return ScalarField(grid, grid.embed(v).ravel())


# --- closed-form Dirichlet modes ---------------------------------------------

def _mode_tables(grid: Grid):
    m1, m2 = grid.interior_shape
    lx = dirichlet_eigenvalues_1d(m1, grid.h)
    ly = dirichlet_eigenvalues_1d(m2, grid.h)
    i = np.arange(1, m1 + 1)
    j = np.arange(1, m2 + 1)
    p = np.arange(1, m1 + 1)
    q = np.arange(1, m2 + 1)
    sx = np.sin(np.pi * np.outer(p, i) / (m1 + 1))  # (mode, node)
    sy = np.sin(np.pi * np.outer(q, j) / (m2 + 1))
    amp = 2.0 / (grid.h * math.sqrt((m1 + 1) * (m2 + 1)))
    return lx, ly, sx, sy, amp


def dirichlet_pairs(grid: Grid, K: int) -> list[EigenPair]:
    """The K lowest eigenpairs of the 5-point Dirichlet Laplacian in closed form.

    Inside a degenerate cluster the order follows the mode numbers.
    """
    lam, P, Q = dirichlet_spectrum(grid)
    if not 1 <= K <= lam.size:
        raise LandscapeError(f"K={K} out of range")
    _, _, sx, sy, amp = _mode_tables(grid)
    pairs = []
    for k in range(K):
        psi = amp * np.outer(sx[P[k] - 1], sy[Q[k] - 1]).ravel()
        pairs.append(EigenPair(float(lam[k]), psi, 0.0))
    return pairs


def modal_terms(grid: Grid, x) -> tuple[np.ndarray, np.ndarray]:
    """For every closed-form mode, sorted by eigenvalue: phi(x) <1, phi> / lambda and lambda."""
    lx, ly, sx, sy, amp = _mode_tables(grid)
    i, j = _interior_node(grid, x)
    # <1, phi_pq> = h^2 amp (sum_i sin)(sum_j sin)
    cx = sx.sum(axis=1)
    cy = sy.sum(axis=1)
    phi_x = amp * np.outer(sx[:, i - 1], sy[:, j - 1])
    mass = grid.h ** 2 * amp * np.outer(cx, cy)
    lam = lx[:, None] + ly[None, :]
    terms = (phi_x * mass / lam).ravel()
    lam = lam.ravel()
    order = np.argsort(lam, kind="stable")
    return terms[order], lam[order]


def _interior_node(grid: Grid, x) -> tuple[int, int]:
    i, j = grid.nearest_node(x)
    if grid.is_boundary(i, j):
        raise LandscapeError(f"point {tuple(x)} is not an interior node")
    return i, j


# --- landscape inequality -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ImprovedBound:
    x: tuple
    improved: float
    original: float
    budget: float
    integral: float  # int_0^inf int |E|^2 p_t dy dt
    integral_budget: float
    v: float
    details: dict = field(default_factory=dict, repr=False)

    def __iter__(self):
        return iter((self.improved, self.original))

    @property
    def ordered(self) -> bool:
        return self.improved <= self.original + self.budget

    def to_dict(self) -> dict:
        return {"x": list(self.x), "improved": self.improved, "original": self.original,
                "budget": self.budget, "integral": self.integral,
                "integral_budget": self.integral_budget, "v": self.v, **self.details}


@dataclass(eq=False)
class LandscapeReport:
    v: ScalarField
    ratios: list
    tol: float = RATIO_TOL
    samples: list = field(default_factory=list)  # ImprovedBound

    @property
    def passed(self) -> bool:
        return all(r <= 1.0 + self.tol for r in self.ratios) and all(s.ordered for s in self.samples)

    def to_dict(self) -> dict:
        return {"ratios": list(map(float, self.ratios)), "tol": self.tol, "pass": self.passed,
                "max_ratio": float(max(self.ratios)) if self.ratios else None,
                "v_max": float(self.v.values.max()),
                "samples": [s.to_dict() for s in self.samples]}


def landscape_ratio_field(pair: EigenPair, v: ScalarField) -> np.ndarray:
    """|psi(x)| / (lambda ||psi||_inf v(x)) on interior nodes."""
    a = np.abs(pair.psi)
    return a / (pair.lam * a.max() * v.interior())


def landscape_check(pairs: list[EigenPair], v: ScalarField, tol: float = RATIO_TOL) -> LandscapeReport:
    ratios = [float(landscape_ratio_field(p, v).max()) for p in pairs]
    return LandscapeReport(v, ratios, tol)


# --- heat kernel ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HeatKernelRow:
    p: ScalarField
    t: float
    x: tuple
    K: int
    truncation_bound: float  # max over y of the omitted modes
    clipped: int  # nodes where the truncated sum was negative
    min_before_clip: float


def _tail_exp_sum(grid: Grid, K: int, t: float) -> float:
    lam = dirichlet_spectrum(grid)[0]
    return float(np.sum(np.exp(-lam[K:] * t)))


def mode_sup(grid: Grid) -> float:
    """Upper bound on max |phi| for normalised Dirichlet modes: 2 / sqrt(area)."""
    m1, m2 = grid.interior_shape
    return 2.0 / (grid.h * math.sqrt((m1 + 1) * (m2 + 1)))


def heat_kernel_row(dirichlet_pairs: list[EigenPair], t: float, x, grid: Grid) -> HeatKernelRow:
    """y -> sum_k e^{-lambda_k t} phi_k(x) phi_k(y) for the given pairs.

    The bound on the omitted modes uses |phi_k| <= 2/sqrt(area) and the
    closed-form spectrum, so it holds for whichever K pairs were given
    as long as they are the K lowest.
    """
    if t <= 0:
        raise LandscapeError("t must be positive")
    if not dirichlet_pairs:
        raise LandscapeError("need at least one Dirichlet pair")
    i, j = _interior_node(grid, x)
    idx = grid.interior_index(i, j)
    Phi = np.column_stack([p.psi.real for p in dirichlet_pairs])
    lam = np.array([p.lam for p in dirichlet_pairs])
    row = Phi @ (np.exp(-lam * t) * Phi[idx])
    K = len(dirichlet_pairs)
    bound = mode_sup(grid) ** 2 * _tail_exp_sum(grid, K, t)
    neg = row < 0
    mn = float(row.min())
    row = np.where(neg, 0.0, row)
    return HeatKernelRow(ScalarField(grid, grid.embed(row).ravel()), t, grid.node(i, j), K,
                         bound, int(neg.sum()), mn)


# --- torsion from modes -----------------------------------------------------------

@dataclass(frozen=True)
class IdentityCheck:
    x: tuple
    modal: float  # sum over the given pairs of phi(x) <1,phi> / lambda
    v: float
    remainder: float  # exact contribution of the omitted modes (closed form)
    cluster: float  # contribution of a degenerate cluster cut by K
    solver_budget: float
    budget: float

    @property
    def gap(self) -> float:
        return abs(self.modal - self.v)

    @property
    def ok(self) -> bool:
        return self.gap <= self.budget

    def to_dict(self) -> dict:
        return {"x": list(self.x), "modal": self.modal, "v": self.v, "gap": self.gap,
                "remainder": self.remainder, "cluster": self.cluster,
                "solver_budget": self.solver_budget, "budget": self.budget, "ok": self.ok,
                "relative_budget": self.budget / self.v if self.v else float("inf")}


def torsion_from_modes(dirichlet_pairs: list[EigenPair], grid: Grid, x) -> float:
    i, j = _interior_node(grid, x)
    idx = grid.interior_index(i, j)
    h2 = grid.h ** 2
    return float(sum(p.psi.real[idx] * h2 * p.psi.real.sum() / p.lam for p in dirichlet_pairs))


def torsion_identity(dirichlet_pairs: list[EigenPair], v: ScalarField, points,
                     v_error: float = 0.0) -> list[IdentityCheck]:
    """Compare sum_k phi_k(x) <1,phi_k> / lambda_k with v(x) at each point.

    The budget is the closed-form remainder of the modes beyond K, the
    absolute size of a degenerate cluster that K cuts through (its basis
    inside the computed pairs is arbitrary), the eigen-residual effect of
    the given pairs and the torsion solve error ``v_error``.
    """
    grid = v.grid
    K = len(dirichlet_pairs)
    lam_all = dirichlet_spectrum(grid)[0]
    out = []
    for x in points:
        terms, lam = modal_terms(grid, x)
        remainder = float(np.sum(terms[K:]))
        cut = lam[K - 1]
        tol = 1e-9 * cut
        cluster = 0.0
        if K < lam_all.size and abs(lam_all[K] - cut) <= tol:
            cluster = float(np.sum(np.abs(terms[np.abs(lam - cut) <= tol])))
        modal = torsion_from_modes(dirichlet_pairs, grid, x)
        i, j = _interior_node(grid, x)
        idx = grid.interior_index(i, j)
        # a pair with relative residual rho moves its term by about rho * max(lam,1)/lam * |term|
        eig_b = sum(abs(p.psi.real[idx] * grid.h ** 2 * p.psi.real.sum() / p.lam)
                    * p.residual * max(p.lam, 1.0) / p.lam * 10.0 for p in dirichlet_pairs)
        solver = v_error + eig_b + 1e-12 * abs(float(v.values.reshape(grid.shape)[i, j]))
        budget = abs(remainder) + cluster + solver
        out.append(IdentityCheck(grid.node(i, j), modal, float(v.values.reshape(grid.shape)[i, j]),
                                 remainder, cluster, solver, budget))
    return out


def probe_points(grid: Grid, n: int = 3) -> list[tuple[float, float]]:
    """n x n interior nodes spread evenly, including the centre when n is odd."""
    pts = []
    for a in range(1, n + 1):
        for b in range(1, n + 1):
            i = round(a * (grid.nx - 1) / (n + 1))
            j = round(b * (grid.ny - 1) / (n + 1))
            pts.append(grid.node(i, j))
    return pts


# --- improved landscape bound -------------------------------------------------------

N_T = 24


def improved_landscape_bound(x, magnetic_pair: EigenPair, parts: HelmholtzParts,
                             dirichlet_pairs: list[EigenPair], mc: MCParams,
                             v: Optional[ScalarField] = None, n_t: int = N_T,
                             targets: int = 11) -> ImprovedBound:
    """lambda ||psi||_inf sqrt(I(x) v(x)) with I(x) = int_0^inf int |E_{x,y}(t)|^2 p_t(x,y) dy dt.

    t runs over ``n_t`` log-spaced nodes in [h^2, 8/lambda_1] (trapezoid
    in log t).  At each t the y integral is a midpoint sum over about
    ``targets`` nodes per diameter of the disc of radius 6 sqrt(t) (or
    the whole domain).  p_t comes from the eigen-expansion when its
    truncation bound is negligible and from G * survival otherwise;
    |E|^2 is the squared modulus of the survivor-conditioned Monte Carlo
    mean.  The budget collects the Monte Carlo error, the difference to
    the rule on every other t node and every other y node, the tail
    beyond T_max (eigen-expansion with |E| <= 1), the mass below t_min
    and the Gaussian mass outside the disc.  ``details`` also carries the
    first moment int int |E| p_t dy dt and |psi(x)| / (lambda ||psi||_inf),
    the unsquared inequality that precedes the Cauchy-Schwarz step.
    """
    grid = parts.f.grid
    if v is None:
        v = torsion(grid)
    i0, j0 = _interior_node(grid, x)
    x = grid.node(i0, j0)
    h = grid.h
    lam1 = float(dirichlet_spectrum(grid)[0][0])
    t_min, t_max = h * h, 8.0 / lam1
    ts = np.geomspace(t_min, t_max, n_t)
    K = len(dirichlet_pairs)
    Phi = np.column_stack([p.psi.real for p in dirichlet_pairs])
    lam_d = np.array([p.lam for p in dirichlet_pairs])
    idx0 = grid.interior_index(i0, j0)
    psup2 = mode_sup(grid) ** 2
    X, Y = grid.mesh()

    J = np.zeros(n_t)
    J1 = np.zeros(n_t)  # first moment, int |E| p_t dy
    J_coarse = np.zeros(n_t)
    J_var = np.zeros(n_t)
    extra = np.zeros(n_t)  # per-t additive errors (disc tail, truncation)
    sources = []
    for a, t in enumerate(ts):
        radius = 6.0 * math.sqrt(t)
        stride = max(1, int(round(2.0 * radius / (targets * h))))
        ii = np.arange(i0 % stride, grid.nx, stride)
        jj = np.arange(j0 % stride, grid.ny, stride)
        I, Jn = np.meshgrid(ii, jj, indexing="ij")
        px, py = X[I, Jn], Y[I, Jn]
        r2 = (px - x[0]) ** 2 + (py - x[1]) ** 2
        sel = (r2 <= radius ** 2) & ~((I == 0) | (I == grid.nx - 1) | (Jn == 0) | (Jn == grid.ny - 1))
        # every other node in each direction for the quadrature estimate
        sel_c = sel & ((I - i0) % (2 * stride) == 0) & ((Jn - j0) % (2 * stride) == 0)
        cell = (stride * h) ** 2
        trunc = psup2 * _tail_exp_sum(grid, K, t)
        use_modes = trunc <= 1e-6 / (4.0 * math.pi * t)
        sources.append("modes" if use_modes else "survival")
        vals = np.zeros(I.shape)
        vals1 = np.zeros(I.shape)
        var = np.zeros(I.shape)
        for a2, b2 in zip(*np.nonzero(sel)):
            y = (float(px[a2, b2]), float(py[a2, b2]))
            spec = BridgeSpec(x, y, float(t), mc.n_steps, mc.n_paths, mc.seed,
                              key=("landscape", a, int(I[a2, b2]), int(Jn[a2, b2])))
            s = phase_expectation(spec, parts.f, grid, workers=mc.workers)
            if use_modes:
                k_idx = grid.interior_index(int(I[a2, b2]), int(Jn[a2, b2]))
                pt = max(float(Phi[k_idx] @ (np.exp(-lam_d * t) * Phi[idx0])), 0.0) + trunc
                pt_se = 0.0
            else:
                G = float(gaussian_kernel(t, r2[a2, b2]))
                pt = G * s.survival
                pt_se = G * math.sqrt(max(s.survival * (1 - s.survival), 1.0 / mc.n_paths) / mc.n_paths)
            if s.ok:
                e2 = s.modulus ** 2
                e2_se = 2.0 * s.modulus * s.stderr + s.stderr ** 2
            else:
                e2, e2_se = 1.0, 1.0  # unknown: bounded by 1
            vals[a2, b2] = e2 * pt
            vals1[a2, b2] = (s.modulus if s.ok else 1.0) * pt
            var[a2, b2] = (e2_se * pt) ** 2 + (e2 * pt_se) ** 2
        J[a] = float(np.sum(vals[sel])) * cell
        J1[a] = float(np.sum(vals1[sel])) * cell
        J_coarse[a] = float(np.sum(vals[sel_c])) * 4.0 * cell
        J_var[a] = float(np.sum(var[sel])) * cell ** 2
        extra[a] = math.exp(-radius ** 2 / (4.0 * t)) + (trunc * grid.area if use_modes else 0.0)

    lt = np.log(ts)
    integral = float(np.trapezoid(J * ts, lt))
    # every other t node, and the coarse y rule on all t nodes
    quad_t = abs(integral - float(np.trapezoid((J * ts)[::2], lt[::2]))) if n_t > 2 else 0.0
    quad_y = abs(integral - float(np.trapezoid(J_coarse * ts, lt)))
    w = _trapezoid_weights(lt) * ts
    mc_b = 3.0 * math.sqrt(float(np.sum(w ** 2 * J_var)))
    extra_b = float(np.sum(w * extra))
    terms, lam_sorted = modal_terms(grid, x)
    tail = float(np.sum(np.exp(-lam_sorted * t_max) * np.abs(terms)))
    below = t_min  # int_0^{t_min} int p_t dy dt <= t_min
    ib = quad_t + quad_y + mc_b + extra_b + tail + below
    lam = float(magnetic_pair.lam)
    sup = float(np.abs(magnetic_pair.psi).max())
    vx = float(v.values.reshape(grid.shape)[i0, j0])
    original = lam * sup * vx
    improved = lam * sup * math.sqrt(max(integral, 0.0) * vx)
    budget = lam * sup * math.sqrt(vx) * (math.sqrt(max(integral, 0.0) + ib) - math.sqrt(max(integral, 0.0)))
    # the unsquared inequality the Cauchy-Schwarz step starts from:
    # |psi(x)| / (lambda ||psi||_inf) <= int_0^inf int |E| p_t dy dt
    first = float(np.trapezoid(J1 * ts, lt))
    psi_ratio = float(abs(magnetic_pair.psi[idx0])) / (lam * sup)
    details = {"t_nodes": ts.tolist(), "J": J.tolist(), "p_t_source": sources,
               "first_moment": first, "psi_ratio": psi_ratio,
               "first_moment_holds": bool(psi_ratio <= first + ib),
               "budget_parts": {"quad_t": quad_t, "quad_y": quad_y, "mc": mc_b, "disc_and_truncation": extra_b,
                                "tail": tail, "below_t_min": below}}
    return ImprovedBound(tuple(x), improved, original, budget, integral, ib, vx, details)


def _trapezoid_weights(u: np.ndarray) -> np.ndarray:
    w = np.zeros_like(u)
    d = np.diff(u)
    w[:-1] += 0.5 * d
    w[1:] += 0.5 * d
    return w

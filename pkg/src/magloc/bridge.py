"""Brownian bridges, Ito path integrals and Monte Carlo phase averages.

Diffusion convention: the generator is the Laplacian, so each coordinate
of a free path has variance 2s at time s and the transition density is
(4 pi t)^-1 exp(-|x - y|^2 / 4t).  Paths are produced in fixed blocks of
``BLOCK`` from counter-based streams keyed by (seed, key, block index);
a block never depends on which thread draws it, and every reduction runs
over blocks in index order, so results do not depend on ``workers``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .eig import EigenPair, localization_point
from .grid import Grid
from .rng import stream
from .vfield import HelmholtzParts, ScalarField, VectorField2, bilinear

BLOCK = 512
N_Z = 1000  # grid of window centres on the circle
WINDOW = 0.01  # half width of a concentration window
MASS = 0.99


class BridgeError(ValueError):
    pass


@dataclass(frozen=True)
class MCParams:
    n_paths: int = 10_000
    n_steps: int = 256
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_paths < 1:
            raise BridgeError("n_paths must be positive")
        if self.n_steps < 2:
            raise BridgeError("n_steps must be at least 2")
        if self.workers < 1:
            raise BridgeError("workers must be positive")


@dataclass(frozen=True)
class BridgeSpec:
    x0: tuple
    y: tuple
    t: float
    n_steps: int = 256
    n_paths: int = 10_000
    seed: int = 0
    key: tuple = ()  # extra stream labels, e.g. a target index

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "y", tuple(float(v) for v in self.y))
        if not (self.t > 0 and math.isfinite(self.t)):
            raise BridgeError(f"t must be positive, got {self.t}")
        if self.n_steps < 2:
            raise BridgeError("n_steps must be at least 2")
        if self.n_paths < 1:
            raise BridgeError("n_paths must be positive")

    @property
    def ds(self) -> float:
        return self.t / self.n_steps

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t, self.n_steps + 1)


# --- sampling ---------------------------------------------------------------

def _blocks(n_paths: int):
    return [(b, b * BLOCK, min(BLOCK, n_paths - b * BLOCK)) for b in range(-(-n_paths // BLOCK))]


def _increments(seed, key, block, count, n_steps, ds):
    rng = stream(seed, "bridge", *key, block)
    return rng.standard_normal((count, n_steps, 2)) * math.sqrt(2.0 * ds)


def _integrate(start, d):
    """Partial sums of the increments d (count, n, 2) from ``start``: shape (count, n+1, 2)."""
    P = np.empty((d.shape[0], d.shape[1] + 1, 2))
    P[:, 0, :] = start
    np.cumsum(d, axis=1, out=P[:, 1:, :])
    P[:, 1:, :] += np.asarray(start, dtype=float)
    return P


def _free_paths(start, dW):
    return _integrate(start, dW)


def _bridge_increments(x0, y, dW):
    """Bridge steps: dW + ((y - x0) - W_t) / n, i.e. W - (s/t) W_t plus the straight line."""
    n = dW.shape[1]
    shift = (np.asarray(y, dtype=float) - np.asarray(x0, dtype=float) - dW.sum(axis=1)) / n
    dW += shift[:, None, :]
    return dW


def _bridge_block(spec: BridgeSpec, block: int):
    start = block * BLOCK
    if not 0 <= start < spec.n_paths:
        raise BridgeError(f"block {block} out of range")
    count = min(BLOCK, spec.n_paths - start)
    d = _bridge_increments(spec.x0, spec.y, _increments(spec.seed, spec.key, block, count, spec.n_steps, spec.ds))
    P = _integrate(spec.x0, d)
    P[:, -1, :] = spec.y  # exact endpoint; the last increment absorbs the rounding
    d[:, -1, :] = P[:, -1, :] - P[:, -2, :]
    return P, d


def bridge_block(spec: BridgeSpec, block: int) -> np.ndarray:
    """Paths ``block*BLOCK ...`` of ``spec`` as an array (count, n_steps+1, 2)."""
    return _bridge_block(spec, block)[0]


def sample_bridge(spec: BridgeSpec, path_index: int) -> np.ndarray:
    """Path number ``path_index`` of ``spec``: n_steps+1 points from x0 to y."""
    if not 0 <= path_index < spec.n_paths:
        raise BridgeError(f"path_index {path_index} outside [0, {spec.n_paths})")
    b, r = divmod(path_index, BLOCK)
    return bridge_block(spec, b)[r]


# --- path integrals ---------------------------------------------------------

def field_evaluator(F, check: bool = True) -> Callable:
    """Vectorised ``(x, y) -> (fx, fy)`` for a VectorField2, an expression pair or a callable.

    Grid-sampled fields are interpolated bilinearly; with ``check`` a point
    outside the sampling box raises, otherwise it is clamped to the box.
    """
    if isinstance(F, VectorField2):
        if F.func is not None:
            return F.func
        grid = F.grid
        ax, ay = F.arrays()

        def interp(x, y):
            if check:
                _check_box(grid, x, y)
            return bilinear(grid, ax, x, y), bilinear(grid, ay, x, y)

        return interp
    if isinstance(F, (tuple, list)) and len(F) == 2:
        from .vfield import _as_expression

        ex, ey = (_as_expression(e) for e in F)
        return lambda x, y: (ex(x, y), ey(x, y))
    if callable(F):
        return F
    raise BridgeError(f"cannot evaluate a field of type {type(F).__name__}")


def _check_box(grid: Grid, x, y):
    tol = 1e-12 * max(1.0, grid.xmax - grid.xmin)
    if (np.min(x) < grid.xmin - tol or np.max(x) > grid.xmax + tol
            or np.min(y) < grid.ymin - tol or np.max(y) > grid.ymax + tol):
        raise BridgeError("path leaves the bounding box of the sampled field")


def _ito(evalf, P, d=None):
    """Left-endpoint sums over the last-but-one axis of P (..., n+1, 2)."""
    left = P[..., :-1, :]
    if d is None:
        d = np.diff(P, axis=-2)
    fx, fy = evalf(left[..., 0], left[..., 1])
    fx = np.broadcast_to(fx, d[..., 0].shape)
    fy = np.broadcast_to(fy, d[..., 1].shape)
    return np.sum(fx * d[..., 0] + fy * d[..., 1], axis=-1)


def ito_integral(F, path: np.ndarray) -> float:
    """Sum_k F(p_k) . (p_{k+1} - p_k) along one path."""
    path = np.asarray(path, dtype=float)
    if path.ndim != 2 or path.shape[1] != 2 or path.shape[0] < 2:
        raise BridgeError("path must have shape (m, 2) with m >= 2")
    _check_path(F, path)
    return float(_ito(field_evaluator(F), path))


def ito_integrals(F, paths: np.ndarray) -> np.ndarray:
    paths = np.asarray(paths, dtype=float)
    _check_path(F, paths)
    return _ito(field_evaluator(F), paths)


def _check_path(F, P):
    # the final point is never evaluated, but it must still lie where F is known
    if isinstance(F, VectorField2) and F.func is None:
        _check_box(F.grid, P[..., 0], P[..., 1])


# --- circular statistics ----------------------------------------------------

def window_mass(X: np.ndarray, half_width: float = WINDOW, n_z: int = N_Z) -> float:
    """max over z in {2 pi j / n_z} of the fraction of X (mod 2 pi) within half_width of z."""
    X = np.asarray(X, dtype=float).ravel()
    if X.size == 0:
        return float("nan")
    two_pi = 2.0 * np.pi
    a = np.sort(np.mod(X, two_pi))
    ext = np.concatenate([a - two_pi, a, a + two_pi])
    z = two_pi * np.arange(n_z) / n_z
    counts = np.searchsorted(ext, z + half_width, side="right") - np.searchsorted(ext, z - half_width, side="left")
    return float(counts.max() / X.size)


def circular_histogram(X: np.ndarray, bins: int = N_Z) -> np.ndarray:
    counts, _ = np.histogram(np.mod(np.asarray(X, dtype=float), 2 * np.pi), bins=bins, range=(0.0, 2 * np.pi))
    return counts


def sample_modulus(X: np.ndarray) -> float:
    X = np.asarray(X, dtype=float)
    return float(abs(np.mean(np.exp(1j * X))))


def is_concentrated(X: np.ndarray, half_width: float = WINDOW, mass: float = MASS) -> bool:
    return window_mass(X, half_width) >= mass


@dataclass(frozen=True, eq=False)
class PathIntegralStats:
    mean_phase: complex  # over surviving paths
    modulus: float
    survival: float
    stderr: float  # of mean_phase, components in quadrature
    n_effective: int
    circular_histogram: np.ndarray
    window_mass: float  # best +-WINDOW mass over the z grid
    n_paths: int
    # |mean over all paths of chi * e^{iX}| = modulus * survival, and its stderr
    joint_modulus: float = 0.0
    joint_stderr: float = 0.0
    # same estimator with killing checked only at every other step
    joint_modulus_coarse: float = 0.0
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.n_effective > 0


def _complex_stderr(values: np.ndarray) -> float:
    n = values.size
    if n < 2:
        return float("inf")
    return float(math.sqrt((np.var(values.real, ddof=1) + np.var(values.imag, ddof=1)) / n))


def _inside(domain: Optional[Grid], P: np.ndarray) -> np.ndarray:
    """Per path: every point strictly inside the domain; also the same test on even steps only."""
    if domain is None:
        ones = np.ones(P.shape[0], dtype=bool)
        return ones, ones
    x, y = P[..., 0], P[..., 1]
    ok = (x > domain.xmin) & (x < domain.xmax) & (y > domain.ymin) & (y < domain.ymax)
    return ok.all(axis=1), ok[:, ::2].all(axis=1)


def _map_blocks(fn, blocks, workers):
    if workers <= 1 or len(blocks) <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, blocks))


def phase_expectation(spec: BridgeSpec, F, domain: Optional[Grid] = None, workers: int = 1,
                      keep_samples: bool = False) -> PathIntegralStats:
    """Monte Carlo E[e^{iX}], X = Ito integral of F, over bridges that stay in ``domain``.

    Paths with any discrete point outside the (open) domain are killed.
    ``domain=None`` disables killing.  With no survivors the statistics
    carry NaN moduli and ``ok`` is False.
    """
    # killed paths never contribute, so clamping outside the box is harmless
    evalf = field_evaluator(F, check=domain is None)

    def run(blk):
        b, _, _ = blk
        P, d = _bridge_block(spec, b)
        alive, alive_coarse = _inside(domain, P)
        # integrals are needed on every path that survives the coarse check
        need = alive_coarse
        if need.all():
            return alive, alive_coarse, _ito(evalf, P, d)
        X = np.zeros(P.shape[0])
        if np.any(need):
            X[need] = _ito(evalf, P[need], d[need])
        return alive, alive_coarse, X

    parts = _map_blocks(run, _blocks(spec.n_paths), workers)
    alive = np.concatenate([p[0] for p in parts])
    alive_c = np.concatenate([p[1] for p in parts])
    X = np.concatenate([p[2] for p in parts])
    return _stats(X, alive, alive_c, spec.n_paths, keep_samples)


def _stats(X, alive, alive_c, n_paths, keep_samples=False):
    Xs = X[alive]
    n_eff = int(Xs.size)
    phases = np.exp(1j * X)
    joint = np.where(alive, phases, 0.0)
    joint_c = np.where(alive_c, phases, 0.0)
    if n_eff:
        e = np.exp(1j * Xs)
        mean = complex(np.mean(e))
        se = _complex_stderr(e)
        wm = window_mass(Xs)
    else:
        mean, se, wm = complex(np.nan, np.nan), float("inf"), float("nan")
    return PathIntegralStats(
        mean_phase=mean,
        modulus=abs(mean),
        survival=n_eff / n_paths,
        stderr=se,
        n_effective=n_eff,
        circular_histogram=circular_histogram(Xs),
        window_mass=wm,
        n_paths=n_paths,
        joint_modulus=float(abs(np.mean(joint))),
        joint_stderr=_complex_stderr(joint),
        joint_modulus_coarse=float(abs(np.mean(joint_c))),
        samples=Xs if keep_samples else None,
    )


# --- oracles ----------------------------------------------------------------

def levy_characteristic(B: float, t: float) -> float:
    """|E e^{iX}| for X = int (B/2)(-y, x).dw on a loop bridge of duration t."""
    bt = B * t
    return 1.0 if bt == 0 else bt / math.sinh(bt)


def levy_spread(B: float, t: float) -> float:
    """Standard deviation of the same X: |B| t / sqrt(3)."""
    return abs(B) * t / math.sqrt(3.0)


def gaussian_kernel(t: float, r2) -> np.ndarray:
    return np.exp(-np.asarray(r2) / (4.0 * t)) / (4.0 * np.pi * t)


# --- the path-integral inequality -------------------------------------------

@dataclass(frozen=True, eq=False)
class TargetRow:
    y: tuple
    weight: float  # G(x0 - y) * cell area
    modulus: float
    survival: float
    joint_modulus: float
    joint_stderr: float
    stderr: float
    n_effective: int


@dataclass(frozen=True, eq=False)
class TheoremReport:
    t: float
    x0: tuple
    lam: float
    lhs: float  # sum of modulus * survival * G * dA
    lhs_error_budget: float
    rhs: float
    pass_: bool
    lhs_gaussian: float  # survival replaced by 1
    gaussian_error_budget: float
    pass_gaussian: bool
    mc_budget: float
    tail_budget: float
    quadrature_budget: float
    exit_bias: float
    radius: float
    n_steps: int
    n_paths: int
    truncated: bool  # 6 sqrt(t) disc reaches outside the domain
    rows: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.pass_

    def to_dict(self) -> dict:
        return {
            "t": self.t, "x0": list(self.x0), "lambda": self.lam,
            "lhs": self.lhs, "lhs_error_budget": self.lhs_error_budget, "rhs": self.rhs,
            "pass": self.pass_,
            "lhs_gaussian": self.lhs_gaussian, "gaussian_error_budget": self.gaussian_error_budget,
            "pass_gaussian": self.pass_gaussian,
            "budget": {"mc": self.mc_budget, "tail": self.tail_budget,
                       "quadrature": self.quadrature_budget, "exit_bias": self.exit_bias},
            "radius": self.radius, "n_steps": self.n_steps, "n_paths": self.n_paths,
            "truncated": self.truncated,
        }


def target_subgrid(x0, radius: float, m: int = 15):
    """Cell centres of an m x m partition of the square of half side ``radius`` about x0, kept inside the disc."""
    w = 2.0 * radius / m
    offs = -radius + w * (np.arange(m) + 0.5)
    DX, DY = np.meshgrid(offs, offs, indexing="ij")
    inside = DX ** 2 + DY ** 2 <= radius ** 2
    return x0[0] + DX, x0[1] + DY, inside, w


def min_steps_for_exit(t: float, dist: float) -> int:
    """Steps needed so that the discrete killing bias stays controlled: 64 t / dist^2."""
    if dist <= 0:
        raise BridgeError("x0 lies on the boundary")
    return int(math.ceil(64.0 * t / dist ** 2))


def verify_theorem(eigpair: EigenPair, parts: HelmholtzParts, t: float, mc: MCParams,
                   m: int = 15, grid: Optional[Grid] = None) -> TheoremReport:
    """Check e^{-lam t} <= int |E_{x0,y} e^{iX}| p_t(x0, y) dy at the maximum x0 of |psi|.

    p_t is estimated by survival * G; the integral by the midpoint rule on
    an m x m subgrid of the disc of radius 6 sqrt(t).  The budget adds a
    3 sigma Monte Carlo term, the Gaussian mass beyond the disc and the
    difference between the m x m rule and the nested (m/3) x (m/3) rule.
    The killing bias of discrete monitoring is estimated from the change
    in survival when only every other step is checked and subtracted.
    """
    if t <= 0:
        raise BridgeError("t must be positive")
    if eigpair.residual > 1e-6:
        raise BridgeError(f"eigenpair residual {eigpair.residual:.2e} exceeds 1e-6")
    grid = grid or parts.f.grid
    x0 = localization_point(eigpair, grid)
    lam = float(eigpair.lam)
    radius = 6.0 * math.sqrt(t)
    n_steps = max(mc.n_steps, min_steps_for_exit(t, grid.distance_to_boundary(x0)))
    if n_steps % 2:
        n_steps += 1
    X, Y, disc, w = target_subgrid(x0, radius, m)
    truncated = bool(np.any(disc & ~grid.contains(X, Y)))
    G = gaussian_kernel(t, (X - x0[0]) ** 2 + (Y - x0[1]) ** 2) * w * w

    est = np.zeros((m, m))
    est_c = np.zeros((m, m))
    gauss = np.zeros((m, m))
    var = np.zeros((m, m))
    var_g = np.zeros((m, m))
    rows = []
    for a in range(m):
        for b in range(m):
            if not disc[a, b]:
                continue
            y = (float(X[a, b]), float(Y[a, b]))
            if not grid.contains(*y):
                continue  # p_t vanishes outside the domain
            spec = BridgeSpec(x0, y, t, n_steps, mc.n_paths, mc.seed, key=("theorem", a, b))
            s = phase_expectation(spec, parts.f, grid, workers=mc.workers)
            est[a, b] = s.joint_modulus
            est_c[a, b] = s.joint_modulus_coarse
            var[a, b] = s.joint_stderr ** 2
            if s.ok:
                gauss[a, b] = s.modulus
                var_g[a, b] = s.stderr ** 2 if np.isfinite(s.stderr) else 1.0
            else:
                var_g[a, b] = 1.0  # unknown modulus: full error
            rows.append(TargetRow(y, float(G[a, b]), s.modulus, s.survival, s.joint_modulus,
                                  s.joint_stderr, s.stderr, s.n_effective))

    lhs = float(np.sum(est * G))
    lhs_g = float(np.sum(gauss * G))
    mc_b = 3.0 * float(math.sqrt(np.sum(var * G ** 2)))
    mc_g = 3.0 * float(math.sqrt(np.sum(var_g * G ** 2)))
    tail = math.exp(-radius ** 2 / (4.0 * t))
    quad = _nested_midpoint_gap(est, G) if m % 3 == 0 else 0.0
    quad_g = _nested_midpoint_gap(gauss, G) if m % 3 == 0 else 0.0
    # survival error of discrete monitoring is O(sqrt(ds)): halving the
    # steps multiplies it by sqrt 2, so the full-resolution bias is about
    # (coarse - fine) / (sqrt 2 - 1)
    exit_bias = float(np.sum(np.maximum(est_c - est, 0.0) * G)) / (math.sqrt(2.0) - 1.0)
    budget = mc_b + tail + quad
    budget_g = mc_g + tail + quad_g
    rhs = math.exp(-lam * t)
    return TheoremReport(
        t=t, x0=tuple(x0), lam=lam, lhs=lhs, lhs_error_budget=budget, rhs=rhs,
        pass_=bool(lhs - exit_bias + budget >= rhs),
        lhs_gaussian=lhs_g, gaussian_error_budget=budget_g, pass_gaussian=bool(lhs_g + budget_g >= rhs),
        mc_budget=mc_b, tail_budget=tail, quadrature_budget=quad, exit_bias=exit_bias,
        radius=radius, n_steps=n_steps, n_paths=mc.n_paths, truncated=truncated, rows=rows,
    )


def _nested_midpoint_gap(values, G):
    """|fine midpoint sum - coarse one on 3x3 blocks|, using the fine centre of each block."""
    f = values * G
    fine = float(np.sum(f))
    c = f[1::3, 1::3] * 9.0
    return abs(fine - float(np.sum(c)))


# --- near-deterministic targets ----------------------------------------------

@dataclass(frozen=True)
class ConcentrationRow:
    y: tuple
    window_mass: float
    modulus: float
    survival: float
    n_effective: int
    near_deterministic: Optional[bool]  # None when no path survived


def near_deterministic_fraction(x0, t: float, F, mc: MCParams, radius: Optional[float] = None,
                                domain: Optional[Grid] = None, m: int = 11):
    """Fraction of targets y in the disc B_radius(x0) whose path integrals concentrate.

    Targets are the cell centres of an m x m partition of the enclosing
    square that fall in the disc and the domain.  A target counts when a
    window of half width 1/100 holds at least 99/100 of its surviving
    paths.  Targets without survivors are reported and left out.
    """
    if radius is None:
        radius = math.sqrt(t)
    x0 = (float(x0[0]), float(x0[1]))
    X, Y, disc, _ = target_subgrid(x0, radius, m)
    if domain is None and isinstance(F, VectorField2):
        domain = F.grid
    rows = []
    for a in range(m):
        for b in range(m):
            if not disc[a, b]:
                continue
            y = (float(X[a, b]), float(Y[a, b]))
            if domain is not None and not domain.contains(*y):
                continue
            spec = BridgeSpec(x0, y, t, mc.n_steps, mc.n_paths, mc.seed, key=("corollary1", a, b))
            s = phase_expectation(spec, F, domain, workers=mc.workers)
            nd = bool(s.window_mass >= MASS) if s.ok else None
            rows.append(ConcentrationRow(y, s.window_mass, s.modulus, s.survival, s.n_effective, nd))
    known = [r for r in rows if r.near_deterministic is not None]
    frac = sum(r.near_deterministic for r in known) / len(known) if known else float("nan")
    return frac, rows


# --- rotation scaling ---------------------------------------------------------

def rotational_scaling_probe(B: float, t: float, mc: MCParams):
    """Spread of int (B/2)(-y, x).dw over loop bridges at the origin, at t and 2t."""
    F = (lambda x, y: (-0.5 * B * y, 0.5 * B * x))
    out = []
    for tt, tag in ((t, "t"), (2.0 * t, "2t")):
        spec = BridgeSpec((0.0, 0.0), (0.0, 0.0), tt, mc.n_steps, mc.n_paths, mc.seed, key=("rotation", tag))
        X = _collect_integrals(spec, F, mc.workers)
        out.append(float(np.std(X, ddof=1)))
    s1, s2 = out
    ratio = s2 / s1 if s1 > 0 else float("nan")
    return s1, s2, ratio


def _collect_integrals(spec: BridgeSpec, F, workers: int = 1) -> np.ndarray:
    evalf = field_evaluator(F)
    parts = _map_blocks(lambda blk: _ito(evalf, *_bridge_block(spec, blk[0])), _blocks(spec.n_paths), workers)
    return np.concatenate(parts)


def path_integral_samples(spec: BridgeSpec, F, workers: int = 1) -> np.ndarray:
    """Ito integrals of F along every path of ``spec`` (no killing)."""
    return _collect_integrals(spec, F, workers)


# --- Feynman-Kac ---------------------------------------------------------------

@dataclass(frozen=True)
class FKEstimate:
    value: complex
    stderr: float
    survival: float

    def __complex__(self):
        return complex(self.value)


def feynman_kac_apply(grid: Grid, A: Optional[VectorField2], psi: np.ndarray, t: float, x,
                      mc: MCParams, V: Optional[ScalarField] = None,
                      divA: Optional[ScalarField] = None) -> FKEstimate:
    """Monte Carlo [e^{-tH} psi](x) over free paths from x killed on leaving the domain.

    Weight exp(-i int A.dw - i int div A ds - int V ds) psi(w(t)), Ito
    sums with the div A and V terms sampled at step midpoints.  For the
    generator-Laplacian convention the divergence term enters with
    coefficient one.  ``psi`` is an interior node vector (zero boundary).
    """
    if t <= 0:
        raise BridgeError("t must be positive")
    values = grid.embed(np.asarray(psi)) if np.asarray(psi).size == grid.n_interior else np.asarray(psi)
    values = values.reshape(grid.shape)
    evalf = field_evaluator(A, check=False) if A is not None else None
    if A is not None and divA is None:
        from .vfield import divergence

        divA = divergence(A)
    x = (float(x[0]), float(x[1]))
    ds = t / mc.n_steps

    def run(blk):
        b, _, count = blk
        dW = _increments(mc.seed, ("feynman-kac",), b, count, mc.n_steps, ds)
        P = _free_paths(x, dW)
        alive, _ = _inside(grid, P)
        out = np.zeros(count, dtype=complex)
        if not np.any(alive):
            return out, 0
        Q = P[alive]
        expo = np.zeros(Q.shape[0], dtype=complex)
        mid = 0.5 * (Q[:, :-1, :] + Q[:, 1:, :])
        if evalf is not None:
            expo -= 1j * _ito(evalf, Q)
            expo -= 1j * ds * np.sum(divA.at(mid[..., 0], mid[..., 1]), axis=1)
        if V is not None:
            expo -= ds * np.sum(V.at(mid[..., 0], mid[..., 1]), axis=1)
        end = Q[:, -1, :]
        pr = bilinear(grid, values.real, end[:, 0], end[:, 1])
        if np.iscomplexobj(values):
            pr = pr + 1j * bilinear(grid, values.imag, end[:, 0], end[:, 1])
        out[alive] = np.exp(expo) * pr
        return out, int(np.count_nonzero(alive))

    parts = _map_blocks(run, _blocks(mc.n_paths), mc.workers)
    Z = np.concatenate([p[0] for p in parts])
    surv = sum(p[1] for p in parts) / mc.n_paths
    return FKEstimate(complex(np.mean(Z)), _complex_stderr(Z), surv)

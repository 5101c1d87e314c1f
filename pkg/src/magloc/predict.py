"""Curl-based localisation prediction.

Low eigenfunctions of H(A) sit where |curl A| is small compared with
lambda^2.  The report places each eigenfunction maximum x0 within the
distribution of |curl A| and measures how far A is from its linear part
in the 1/sqrt(lambda) neighbourhood that the path integrals explore.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .eig import EigenPair, localization_point
from .vfield import ScalarField, VectorField2, curl, linearize_field


@dataclass(frozen=True, eq=False)
class SublevelMask:
    mask: np.ndarray  # (nx, ny) bool, False on the boundary
    threshold: float
    quantile: float
    degenerate: bool  # |curl| constant over the interior


def curl_sublevel_mask(curlfield: ScalarField, quantile: float) -> SublevelMask:
    """Interior nodes where |curl| is at most its ``quantile`` over interior nodes."""
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {quantile}")
    grid = curlfield.grid
    a = np.abs(curlfield.as_array())
    inner = a[1:-1, 1:-1]
    lo, hi = float(inner.min()), float(inner.max())
    mask = np.zeros(grid.shape, dtype=bool)
    if hi - lo <= 1e-12 * max(1.0, hi):
        mask[1:-1, 1:-1] = True
        return SublevelMask(mask, hi, quantile, True)
    thr = float(np.quantile(inner, quantile))
    mask[1:-1, 1:-1] = inner <= thr
    return SublevelMask(mask, thr, quantile, False)


@dataclass(frozen=True)
class PredictionRow:
    lam: float
    x0: tuple
    curl_abs: float
    lam2: float
    ratio: float  # |curl A(x0)| / lambda^2
    percentile: float  # share of interior nodes with |curl| <= |curl A(x0)|, in percent
    nonlinearity: float  # sup ||A_nonlin|| over B(x0, 1/sqrt(lam)) * sqrt(lam) / |curl A(x0)|
    in_sublevel: bool
    near_boundary: bool

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "x0": list(self.x0), "curl_abs": self.curl_abs,
                "lambda_sq": self.lam2, "ratio": self.ratio, "percentile": self.percentile,
                "nonlinearity": self.nonlinearity, "in_sublevel": self.in_sublevel,
                "near_boundary": self.near_boundary}


@dataclass(eq=False)
class PredictionReport:
    rows: list
    quantile: float
    threshold: float
    degenerate: bool
    mask: np.ndarray = field(repr=False, default=None)

    @property
    def hit_rate(self) -> float:
        return sum(r.in_sublevel for r in self.rows) / len(self.rows) if self.rows else float("nan")

    @property
    def max_ratio(self) -> float:
        """Empirical value of the constant in |curl A(x0)| <= c lambda^2."""
        return max((r.ratio for r in self.rows), default=float("nan"))

    def to_dict(self) -> dict:
        return {"quantile": self.quantile, "threshold": self.threshold, "degenerate": self.degenerate,
                "hit_rate": self.hit_rate, "max_ratio": self.max_ratio,
                "pairs": [r.to_dict() for r in self.rows]}


def nonlinearity_measure(A: VectorField2, x0, lam: float, curl_abs: float) -> float:
    """sup of ||A_nonlin|| over the 1/sqrt(lam) ball, scaled by sqrt(lam) / |curl A(x0)|.

    Along paths of duration 1/lam the nonlinear part contributes about
    ||A_nonlin|| / sqrt(lam) to the phase while the rotation contributes
    |curl| / lam; the measure is their ratio.
    """
    split = linearize_field(A, x0)
    grid = A.grid
    X, Y = grid.mesh()
    r = 1.0 / math.sqrt(lam)
    ball = (X - split.x0[0]) ** 2 + (Y - split.x0[1]) ** 2 <= r * r
    ax, ay = split.Anonlin.arrays()
    sup = float(np.max(np.hypot(ax, ay)[ball]))
    if curl_abs == 0.0:
        return 0.0 if sup == 0.0 else float("inf")
    return sup * math.sqrt(lam) / curl_abs


def corollary2_report(pairs: list[EigenPair], A: VectorField2, quantile: float = 0.1) -> PredictionReport:
    grid = A.grid
    c = curl(A)
    sub = curl_sublevel_mask(c, quantile)
    cabs = np.abs(c.as_array())
    inner = cabs[1:-1, 1:-1].ravel()
    rows = []
    for p in pairs:
        x0 = localization_point(p, grid)
        i, j = grid.nearest_node(x0)
        ca = float(cabs[i, j])
        lam2 = float(p.lam) ** 2
        near = min(i, j, grid.nx - 1 - i, grid.ny - 1 - j) <= 1
        rows.append(PredictionRow(
            lam=float(p.lam), x0=tuple(x0), curl_abs=ca, lam2=lam2,
            ratio=ca / lam2 if lam2 > 0 else float("inf"),
            percentile=100.0 * float(np.mean(inner <= ca)),
            nonlinearity=nonlinearity_measure(A, x0, float(p.lam), ca) if not near else float("nan"),
            in_sublevel=bool(sub.mask[i, j]), near_boundary=bool(near)))
    return PredictionReport(rows, quantile, sub.threshold, sub.degenerate, sub.mask)

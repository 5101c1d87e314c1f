"""Command line: ``magloc <solve|decompose|verify-theorem|landscape|predict|report>``.

Settings come from an INI file (sections domain, field, solver, mc,
output) and from flags, flags winning.  Exit codes: 0 success, 1 bad
configuration or expression, 2 numerical failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bridge import BridgeError, MCParams, near_deterministic_fraction, verify_theorem
from .eig import EigenPair, EigenSolverError, localization_point, smallest_eigenpairs
from .export import dumps, write_field_csv, write_json, write_manifest, write_pgm
from .expr import ExpressionError, FieldExpression
from .grid import Grid, GridError, build_grid
from .landscape import LandscapeError, improved_landscape_bound, dirichlet_pairs, landscape_check, torsion
from .magop import assemble
from .predict import corollary2_report
from .vfield import (BUILTIN, FieldError, HelmholtzError, HelmholtzParts, ScalarField, VectorField2, curl,
                     divergence, helmholtz_decompose, sample_field, sample_scalar)

log = logging.getLogger("magloc")

OUT_ENV = "MAGLOC_OUT"
PHASE_WARN = 0.5

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    bounds: tuple = (-1.0, 1.0, -1.0, 1.0)
    n: int = 129
    field: str = ""  # builtin name, empty when ax/ay are given
    a: float | None = None
    B: float | None = None
    ax: str = ""
    ay: str = ""
    V: str = ""
    k: int = 4
    tol: float = 1e-8
    max_iter: int = 2000
    seed: int = 0
    n_paths: int = 10_000
    n_steps: int = 256
    t_factors: tuple = (0.25, 1.0)
    workers: int = 1
    quantile: float = 0.1
    out: str = ""
    matrix_market: bool = False
    targets: int = 15
    improved_pairs: int = 1

    def validate(self) -> "RunConfig":
        if self.n < 3:
            raise ConfigError(f"n must be at least 3, got {self.n}")
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if len(self.bounds) != 4 or not (self.bounds[0] < self.bounds[1] and self.bounds[2] < self.bounds[3]):
            raise ConfigError(f"bad bounds {self.bounds}")
        if self.field and self.field not in BUILTIN:
            raise ConfigError(f"unknown builtin field {self.field!r}; choose from {', '.join(BUILTIN)}")
        if self.field and (self.ax or self.ay):
            raise ConfigError("give either a builtin field or ax/ay expressions, not both")
        if not self.field and bool(self.ax) != bool(self.ay):
            raise ConfigError("ax and ay must be given together")
        if not 0 < self.quantile < 1:
            raise ConfigError("quantile must lie in (0, 1)")
        if self.tol <= 0 or self.max_iter < 1:
            raise ConfigError("tol must be positive and max_iter at least 1")
        if any(c <= 0 for c in self.t_factors):
            raise ConfigError("t_factors must be positive")
        # every expression must parse
        for e in self.expressions() + ((self.V,) if self.V else ()):
            FieldExpression(e)
        return self

    def expressions(self) -> tuple:
        if self.field:
            fn = BUILTIN[self.field]
            if self.field == "uniform":
                return fn(self.B if self.B is not None else 1.0)
            return fn(self.a) if self.a is not None else fn()
        if self.ax:
            return (self.ax, self.ay)
        return ("0", "0")

    def label(self) -> str:
        if self.field:
            p = self.B if self.field == "uniform" else self.a
            return f"{self.field}({p})" if p is not None else self.field
        return f"({self.expressions()[0]}, {self.expressions()[1]})"

    def out_dir(self) -> Path:
        return Path(self.out or os.environ.get(OUT_ENV) or "magloc-out")

    def mc(self) -> MCParams:
        return MCParams(self.n_paths, self.n_steps, self.seed, self.workers)

    def echo(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        d["t_factors"] = list(self.t_factors)
        d["expressions"] = list(self.expressions())
        return d


# --- configuration ------------------------------------------------------------------

_KEYS = {
    "domain": {"bounds": "bounds", "n": "n"},
    "field": {"name": "field", "field": "field", "a": "a", "b": "B", "ax": "ax", "ay": "ay", "v": "V",
              "quantile": "quantile"},
    "solver": {"k": "k", "tol": "tol", "max_iter": "max_iter", "seed": "seed"},
    "mc": {"n_paths": "n_paths", "n_steps": "n_steps", "t_factors": "t_factors", "workers": "workers",
           "seed": "seed", "targets": "targets", "improved_pairs": "improved_pairs"},
    "output": {"dir": "out", "out": "out", "matrix_market": "matrix_market"},
}


def _convert(name: str, raw):
    proto = RunConfig.__dataclass_fields__[name]
    if name in ("bounds", "t_factors"):
        if isinstance(raw, str):
            raw = [s for s in raw.replace(",", " ").split() if s]
        return tuple(float(v) for v in raw)
    if name in ("a", "B"):
        return None if raw in (None, "") else float(raw)
    if name == "matrix_market":
        if isinstance(raw, str):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return bool(raw)
    kind = type(proto.default)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return str(raw)


def load_config(path) -> dict:
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for section in cp.sections():
        known = _KEYS.get(section.lower())
        if known is None:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            target = known.get(key.lower())
            if target is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values[target] = _convert(target, raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r} in [{section}]: {raw!r}") from exc
    return values


def build_config(args: argparse.Namespace) -> RunConfig:
    values = load_config(args.config) if args.config else {}
    for name in RunConfig.__dataclass_fields__:
        flag = getattr(args, name, None)
        if flag is not None:
            try:
                values[name] = _convert(name, flag)
            except ValueError as exc:
                raise ConfigError(f"bad value for --{name}: {flag!r}") from exc
    try:
        return RunConfig(**values).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# --- shared stages --------------------------------------------------------------------

@dataclass
class Context:
    cfg: RunConfig
    out: Path
    grid: Grid
    A: VectorField2
    V: ScalarField | None
    warnings: list = field(default_factory=list)
    times: dict = field(default_factory=dict)
    files: list = field(default_factory=list)


def make_context(cfg: RunConfig) -> Context:
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    grid = build_grid(cfg.bounds, cfg.n)
    A = sample_field(cfg.expressions(), grid, cfg.label())
    V = sample_scalar(cfg.V, grid) if cfg.V else None
    ctx = Context(cfg, out, grid, A, V)
    amax = float(A.norm().max())
    if amax * grid.h > PHASE_WARN:
        msg = f"max|A|*h = {amax * grid.h:.3g} exceeds {PHASE_WARN}: link phases are under-resolved"
        ctx.warnings.append(msg)
        print(f"warning: {msg}", file=sys.stderr)
    return ctx


def _signature(cfg: RunConfig, *extra) -> str:
    key = json.dumps([list(cfg.bounds), cfg.n, list(cfg.expressions()), cfg.V, *extra])
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def solve_pairs(ctx: Context) -> list[EigenPair]:
    """Eigenpairs, reused from ``pairs.npz`` when it was written for the same problem."""
    cfg = ctx.cfg
    sig = _signature(cfg, cfg.k, cfg.tol, cfg.seed)
    cache = ctx.out / "pairs.npz"
    if cache.exists():
        with np.load(cache) as z:
            if str(z["signature"]) == sig:
                return [EigenPair(float(l), p, float(r)) for l, p, r in zip(z["lam"], z["psi"].T, z["residual"])]
    t0 = time.perf_counter()
    op = assemble(ctx.grid, ctx.A, ctx.V)
    if cfg.matrix_market:
        path = ctx.out / "operator.mtx"
        op.write_matrix_market(str(path), comment=f"H(A) for {cfg.label()} on n={cfg.n}")
        ctx.files.append(path)
    try:
        pairs = smallest_eigenpairs(op, cfg.k, tol=cfg.tol, max_iter=cfg.max_iter, seed=cfg.seed)
    except EigenSolverError as exc:
        diag = {"error": str(exc), "residuals": exc.residuals,
                "lambda": [p.lam for p in exc.pairs] if exc.pairs else None}
        _write(ctx, "diagnostics.json", diag)
        finish(ctx, "solve-failed")
        raise
    ctx.times["solve"] = time.perf_counter() - t0
    np.savez(cache, signature=sig, lam=[p.lam for p in pairs], psi=np.column_stack([p.psi for p in pairs]),
             residual=[p.residual for p in pairs])
    ctx.files.append(cache)
    return pairs


def decompose(ctx: Context) -> HelmholtzParts:
    t0 = time.perf_counter()
    parts = helmholtz_decompose(ctx.A)
    ctx.times["decompose"] = time.perf_counter() - t0
    return parts


def _write(ctx: Context, name: str, obj) -> Path:
    path = write_json(ctx.out / name, obj)
    ctx.files.append(path)
    return path


def finish(ctx: Context, stage: str) -> None:
    """Rewrite the manifest over every file in the output directory."""
    mpath = ctx.out / "manifest.json"
    stages = {}
    if mpath.exists():
        try:
            stages = json.loads(mpath.read_text()).get("stages", {})
        except (ValueError, OSError):
            stages = {}
    stages[stage] = {"config": ctx.cfg.echo(), "wall_times": ctx.times, "warnings": ctx.warnings}
    files = [p.name for p in ctx.out.iterdir() if p.is_file() and p.name != "manifest.json"]
    write_manifest(ctx.out, files, {"version": __version__, "stages": stages,
                                    "pgm_scaling": "linear, minimum to 0 and maximum to 255"})


# --- commands ---------------------------------------------------------------------------

def cmd_solve(cfg: RunConfig) -> int:
    ctx = make_context(cfg)
    pairs = solve_pairs(ctx)
    rows = []
    for k, p in enumerate(pairs, 1):
        psi = p.on_grid(ctx.grid)
        write_field_csv(ctx.out / f"psi_{k}.csv", ctx.grid, abs=np.abs(psi), re=psi.real, im=psi.imag)
        for part, arr in (("abs", np.abs(psi)), ("re", psi.real), ("im", psi.imag)):
            write_pgm(ctx.out / f"psi_{k}_{part}.pgm", arr)
        rows.append({"k": k, "lambda": p.lam, "residual": p.residual,
                     "x0": list(localization_point(p, ctx.grid))})
    _write(ctx, "eigenvalues.json", {"field": cfg.label(), "n": cfg.n, "h": ctx.grid.h,
                                     "lambda": [p.lam for p in pairs], "pairs": rows, "warnings": ctx.warnings})
    for k, p in enumerate(pairs, 1):
        print(f"lambda_{k} = {p.lam:.10g}  (residual {p.residual:.2e})")
    finish(ctx, "solve")
    return EXIT_OK


def cmd_decompose(cfg: RunConfig) -> int:
    ctx = make_context(cfg)
    parts = decompose(ctx)
    fx, fy = parts.f.arrays()
    write_field_csv(ctx.out / "helmholtz.csv", ctx.grid, phi=parts.phi.as_array(), fx=fx, fy=fy,
                    curl_f=curl(parts.f).as_array(), div_f=divergence(parts.f).as_array())
    write_pgm(ctx.out / "phi.pgm", parts.phi.as_array())
    write_pgm(ctx.out / "curl_f.pgm", np.abs(curl(parts.f).as_array()))
    summary = {"field": cfg.label(), "div_residual": parts.div_residual, "normal_residual": parts.normal_residual,
               "div_scale": parts.div_scale, "max_abs_f": float(parts.f.norm().max()),
               "max_abs_grad_phi": float(np.hypot(*(ctx.A.arrays()[0] - fx, ctx.A.arrays()[1] - fy)).max())}
    _write(ctx, "helmholtz.json", summary)
    print(f"div residual {parts.div_residual:.3e}, normal residual {parts.normal_residual:.3e}, "
          f"max|F| {summary['max_abs_f']:.6g}")
    finish(ctx, "decompose")
    return EXIT_OK


def cmd_verify_theorem(cfg: RunConfig) -> int:
    ctx = make_context(cfg)
    pairs = solve_pairs(ctx)
    parts = decompose(ctx)
    ground = pairs[0]
    x0 = localization_point(ground, ctx.grid)
    mc = cfg.mc()
    reports, tables = [], []
    ok = True
    t0 = time.perf_counter()
    for c in cfg.t_factors:
        t = c / ground.lam
        rep = verify_theorem(ground, parts, t, mc, m=cfg.targets, grid=ctx.grid)
        reports.append({"c": c, **rep.to_dict()})
        ok &= rep.pass_
        frac, rows = near_deterministic_fraction(x0, t, parts.f, mc, domain=ctx.grid)
        tables.append({"c": c, "t": t, "fraction": frac,
                       "unknown": sum(r.near_deterministic is None for r in rows),
                       "targets": [{"y": list(r.y), "window_mass": r.window_mass, "modulus": r.modulus,
                                    "survival": r.survival, "near_deterministic": r.near_deterministic}
                                   for r in rows]})
        print(f"c={c:g}: lhs={rep.lhs:.6f} budget={rep.lhs_error_budget:.2e} rhs={rep.rhs:.6f} "
              f"pass={rep.pass_}; near-deterministic fraction {frac:.3f}")
    ctx.times["verify"] = time.perf_counter() - t0
    _write(ctx, "theorem.json", {"field": cfg.label(), "lambda": ground.lam, "x0": list(x0), "reports": reports})
    _write(ctx, "corollary1.json", {"field": cfg.label(), "x0": list(x0), "tables": tables})
    finish(ctx, "verify-theorem")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_landscape(cfg: RunConfig) -> int:
    ctx = make_context(cfg)
    pairs = solve_pairs(ctx)
    t0 = time.perf_counter()
    v = torsion(ctx.grid)
    rep = landscape_check(pairs, v)
    write_field_csv(ctx.out / "torsion.csv", ctx.grid, v=v.as_array())
    write_pgm(ctx.out / "torsion.pgm", v.as_array())
    if cfg.improved_pairs > 0:
        parts = decompose(ctx)
        dp = dirichlet_pairs(ctx.grid, 100)
        probes = [localization_point(p, ctx.grid) for p in pairs[: cfg.improved_pairs]]
        centre = ((cfg.bounds[0] + cfg.bounds[1]) / 2, (cfg.bounds[2] + cfg.bounds[3]) / 2)
        probes.append(centre)
        for j, x in enumerate(probes):
            pair = pairs[min(j, cfg.improved_pairs - 1)]
            rep.samples.append(improved_landscape_bound(x, pair, parts, dp, cfg.mc(), v=v))
    ctx.times["landscape"] = time.perf_counter() - t0
    _write(ctx, "landscape.json", {"field": cfg.label(), "lambda": [p.lam for p in pairs], **rep.to_dict()})
    for k, r in enumerate(rep.ratios, 1):
        print(f"pair {k}: max |psi| / (lambda ||psi|| v) = {r:.6f}")
    finish(ctx, "landscape")
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_predict(cfg: RunConfig) -> int:
    ctx = make_context(cfg)
    pairs = solve_pairs(ctx)
    rep = corollary2_report(pairs, ctx.A, cfg.quantile)
    c = curl(ctx.A)
    write_field_csv(ctx.out / "curl.csv", ctx.grid, curl=c.as_array(), sublevel=rep.mask.astype(int))
    write_pgm(ctx.out / "sublevel_mask.pgm", rep.mask.astype(float))
    _write(ctx, "predict.json", {"field": cfg.label(), **rep.to_dict()})
    if rep.degenerate:
        print("warning: |curl A| is constant; the sublevel mask is every interior node", file=sys.stderr)
    print(f"{sum(r.in_sublevel for r in rep.rows)}/{len(rep.rows)} maxima in the "
          f"{cfg.quantile:g}-quantile sublevel set; max |curl A(x0)|/lambda^2 = {rep.max_ratio:.4g}")
    finish(ctx, "predict")
    return EXIT_OK


REPORT_PARTS = ("eigenvalues", "helmholtz", "theorem", "corollary1", "landscape", "predict")


def cmd_report(cfg: RunConfig) -> int:
    out = cfg.out_dir()
    if not out.is_dir():
        raise ConfigError(f"output directory {out} does not exist")
    body = {}
    for name in REPORT_PARTS:
        p = out / f"{name}.json"
        if p.exists():
            body[name] = json.loads(p.read_text())
    (out / "report.json").write_text(dumps({"version": __version__, **body}))
    print(f"report.json aggregates {', '.join(body) or 'nothing'}")
    ctx = Context(cfg, out, build_grid(cfg.bounds, 3), None, None)
    finish(ctx, "report")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "decompose": cmd_decompose, "verify-theorem": cmd_verify_theorem,
            "landscape": cmd_landscape, "predict": cmd_predict, "report": cmd_report}


def parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("settings (override the config file)")
    g.add_argument("--config", help="INI file with [domain] [field] [solver] [mc] [output]")
    g.add_argument("--bounds", help="xmin,xmax,ymin,ymax")
    g.add_argument("--n", help="grid nodes per side")
    g.add_argument("--field", choices=sorted(BUILTIN), help="builtin vector potential")
    g.add_argument("--a", help="amplitude of example fields")
    g.add_argument("--B", help="field strength of the uniform field")
    g.add_argument("--ax", help="x component expression")
    g.add_argument("--ay", help="y component expression")
    g.add_argument("--V", help="potential expression")
    g.add_argument("--k", help="number of eigenpairs")
    g.add_argument("--tol", help="eigen residual tolerance")
    g.add_argument("--max-iter", dest="max_iter")
    g.add_argument("--seed")
    g.add_argument("--n-paths", dest="n_paths")
    g.add_argument("--n-steps", dest="n_steps")
    g.add_argument("--t-factors", dest="t_factors", help="comma separated c in t = c/lambda")
    g.add_argument("--workers")
    g.add_argument("--quantile")
    g.add_argument("--targets", help="target subgrid size per side")
    g.add_argument("--improved-pairs", dest="improved_pairs")
    g.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./magloc-out)")
    g.add_argument("--matrix-market", dest="matrix_market", action="store_const", const="true",
                   help="also write the operator in Matrix Market format")
    g.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="magloc", description="Eigenfunction localisation for magnetic Laplacians.")
    p.add_argument("--version", action="version", version=f"magloc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None) -> int:
    try:
        args = parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ExpressionError, GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EigenSolverError, HelmholtzError, LandscapeError, BridgeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

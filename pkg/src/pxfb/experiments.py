"""Experiment configuration, orchestration and persistence.

A configuration names an experiment kind, a grid, a parameter block and a
seed.  :func:`run_experiment` evaluates it and writes one directory per
configuration, named by a hash of its canonical JSON form.  All JSON and CSV
outputs are deterministic functions of the configuration; the wall time goes
to ``run.log`` only.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .barriers import (
    EPS_GRID,
    Barrier,
    barrier_constants,
    certify_barrier_v,
    certify_barrier_w,
    gamma_exponent,
    radial_p_laplacian,
    synthetic_exponent,
)
from .errors import ConfigError, DomainError
from .exponent import ExponentField
from .flatness import DirectionSearch, FlatnessCertificate, _fit_alpha, flatness_iteration, harnack_ratio
from .grid import GridFunction, box_grid
from .norms import luxemburg_norm, modular, norm_bracket
from .solver import (
    EnergyProblem,
    SolveConfig,
    interface_position_1d,
    interface_slope_1d,
    minimize_energy,
    quadratic_remainder,
    solve_dirichlet,
    solve_neumann_linearized,
    solve_shifted,
)
from .viscosity import viscosity_battery

__all__ = [
    "KINDS",
    "ExperimentConfig",
    "RunRecord",
    "ExperimentResult",
    "load_config",
    "parse_config",
    "config_hash",
    "compute",
    "run_experiment",
    "verify_run",
    "CSV_SCHEMA",
]

log = logging.getLogger(__name__)

KINDS = (
    "dirichlet_benchmark",
    "energy_benchmark",
    "barrier_certification",
    "viscosity_battery",
    "harnack_study",
    "flatness_iteration",
    "neumann_check",
    "norm_suite",
)

SOLVER_DEFAULTS = {"delta": 1e-8, "tol": 1e-9, "max_iter": 60}

DEFAULTS: dict[str, dict] = {
    "dirichlet_benchmark": {"case": "one_d", "p0": 3.0, "levels": 1, "r_inner": 0.1, **SOLVER_DEFAULTS},
    "energy_benchmark": {"p0": 2.0, "cases": [[0.5, 1.0]], **SOLVER_DEFAULTS},
    "barrier_certification": {
        "n": 2,
        "p_min": 2.0,
        "p_max": 2.0,
        "c0": 1.0,
        "c1": 1.0,
        "theta": 1.0,
        "r1": 0.1,
        "r2": 1.0,
        "samples": 64,
        "eps_count": 8,
    },
    "viscosity_battery": {"p0": 2.5, "p_slope": [0.3, 0.2], "f": 1.0, "count": 1000, "c_tol": 10.0, **SOLVER_DEFAULTS},
    "harnack_study": {"p0": 2.5, "p_slope": [0.1, 0.05], "eps": [0.1, 0.01], "levels": 2, "R": 0.25, **SOLVER_DEFAULTS},
    "flatness_iteration": {
        "field": "cone",
        "nu0": [0.6, 0.8],
        "offset": 0.0,
        "curvature": 0.1,
        "rbar": 0.5,
        "K": 5,
        "radius": 1.0,
        "step_deg": 0.25,
        "span_deg": 10.0,
        "refinements": 2,
    },
    "neumann_check": {"p0": [1.5, 2.0, 3.0], "rho": 0.5, "n": 2, "radii": [0.0625, 0.125, 0.25]},
    "norm_suite": {"samples": 1000, "p_min": 1.2, "p_max": 4.0, "scales": [0.5, 2.0, 3.0]},
}

GRID_DEFAULTS: dict[str, dict] = {
    "dirichlet_benchmark": {"lower": [0.0], "upper": [1.0], "h": 1 / 512},
    "energy_benchmark": {"lower": [0.0], "upper": [1.0], "h": 1 / 512},
    "barrier_certification": {"lower": [-1.0, -1.0], "upper": [1.0, 1.0], "h": 1 / 64},
    "viscosity_battery": {"lower": [-1.0, -1.0], "upper": [1.0, 1.0], "h": 1 / 32},
    "harnack_study": {"lower": [-1.0, -1.0], "upper": [1.0, 1.0], "h": 1 / 64},
    "flatness_iteration": {"lower": [-1.0, -1.0], "upper": [1.0, 1.0], "h": 1 / 256},
    "neumann_check": {"lower": [-0.5, 0.0], "upper": [0.5, 0.5], "h": 1 / 64},
    "norm_suite": {"lower": [0.0, 0.0], "upper": [1.0, 1.0], "h": 1 / 16},
}

CSV_SCHEMA: dict[str, dict[str, str]] = {
    "dirichlet_benchmark": {
        "h": "grid spacing",
        "error": "sup-norm error against the exact solution on free nodes",
        "iterations": "Newton iterations",
    },
    "energy_benchmark": {
        "a": "boundary value at x = 0",
        "Q": "free boundary datum",
        "x_star": "interpolated free boundary position",
        "target": "exact position a / Q",
        "error_cells": "(x_star - target) / h",
        "slope": "one-sided interface slope",
    },
    "barrier_certification": {
        "eps": "barrier parameter",
        "w_margin": "min of the p(x)-Laplacian of w minus c_bar",
        "v_margin": "min over the gradient pinch and the strict subsolution slack of v",
        "passed": "1 if both certificates pass",
    },
    "viscosity_battery": {
        "index": "test number",
        "side": "touching side",
        "status": "pass, fail or exempt",
        "value": "p(x)-Laplacian of the quadratic minus f at the contact node",
    },
    "harnack_study": {
        "eps": "forcing f = eps^2",
        "h": "grid spacing",
        "R": "ball radius",
        "C_emp": "empirical constant",
        "sup": "sup of v on the ball",
        "inf": "inf of v on the ball",
    },
    "flatness_iteration": {
        "k": "scale index",
        "rho": "rbar^k",
        "eps": "flatness (b - a) / r",
        "a": "lower slab offset",
        "b": "upper slab offset",
        "nu_i": "components of the best direction",
        "alpha_running": "slope of log eps against log rho over scales 0..k",
    },
    "neumann_check": {
        "p0": "frozen exponent",
        "poly_error": "sup error on the polynomial x_1^2 - x_n^2 / (p0 - 1)",
        "r": "radius of the quadratic remainder fit",
        "C_bar": "max |u - u(0) - grad u(0).x| / r^2 for generic even data",
    },
    "norm_suite": {
        "sample": "sample number",
        "modular": "value of the modular",
        "norm": "Luxemburg norm",
        "lower": "lower bracket bound",
        "upper": "upper bracket bound",
        "bracket_ok": "1 if lower <= norm <= upper",
        "homogeneity_error": "max relative error of |t u| = |t| |u| over the scales",
    },
}


@dataclass
class ExperimentConfig:
    """Validated experiment description with defaults filled in."""

    kind: str
    params: dict
    grid: dict
    seed: int = 0
    out: str = "runs"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "grid": self.grid, "seed": self.seed, "out": self.out}

    def identity(self) -> dict:
        """Everything that determines the results (the output location does not)."""
        d = self.to_dict()
        d.pop("out")
        return d


@dataclass
class ExperimentResult:
    summary: dict
    header: list
    rows: list
    extra: dict = field(default_factory=dict)


@dataclass
class RunRecord:
    """Outcome of a run; ``artifacts`` are relative to ``directory``."""

    config: dict
    version: str
    wall_time: float
    directory: str
    artifacts: list
    summary: dict
    notes: list = field(default_factory=list)

    def persistent(self) -> dict:
        """Deterministic part of the record (no wall time, no absolute paths)."""
        return {
            "config": self.config,
            "version": self.version,
            "artifacts": self.artifacts,
            "summary": self.summary,
            "notes": self.notes,
        }


# -- configuration -------------------------------------------------------------


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(_canonical(config.identity()).encode()).hexdigest()[:12]


def _check_p(name: str, value) -> None:
    vals = value if isinstance(value, list) else [value]
    for v in vals:
        if not isinstance(v, (int, float)) or not v > 1:
            raise ConfigError(f"params.{name} = {v} violates the bound 1 < {name}")


def _validate(kind: str, params: dict, grid: dict) -> None:
    for key in ("p_min", "p0"):
        if key in params:
            _check_p(key, params[key])
    if "p_max" in params:
        if not params["p_max"] < math.inf or params["p_max"] < params.get("p_min", params["p_max"]):
            raise ConfigError(f"params.p_max = {params['p_max']} violates p_min <= p_max < inf")
    h = grid.get("h")
    if not isinstance(h, (int, float)) or not h > 0:
        raise ConfigError(f"grid.h = {h} must be positive")
    lo, up = grid.get("lower"), grid.get("upper")
    if not (isinstance(lo, list) and isinstance(up, list) and len(lo) == len(up) and len(lo) >= 1):
        raise ConfigError("grid.lower and grid.upper must be lists of equal length")
    if any(not u > l for l, u in zip(lo, up)):
        raise ConfigError("grid.upper must exceed grid.lower in every coordinate")
    if kind == "dirichlet_benchmark" and params["case"] not in ("one_d", "radial"):
        raise ConfigError(f"params.case = {params['case']!r} must be 'one_d' or 'radial'")
    if kind == "flatness_iteration":
        if params["field"] not in ("cone", "parabola"):
            raise ConfigError(f"params.field = {params['field']!r} must be 'cone' or 'parabola'")
        if not 0 < params["rbar"] < 1:
            raise ConfigError("params.rbar must lie in (0, 1)")
        if int(params["K"]) < 1:
            raise ConfigError("params.K must be at least 1")
    if kind == "barrier_certification" and not 0 < params["r1"] < params["r2"] <= 1:
        raise ConfigError("params need 0 < r1 < r2 <= 1")
    for key in ("count", "samples", "levels"):
        if key in params and (not isinstance(params[key], int) or params[key] < 1):
            raise ConfigError(f"params.{key} must be a positive integer")


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a configuration mapping and fill in defaults."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    missing = [k for k in ("kind",) if k not in data]
    if missing:
        raise ConfigError(f"missing required field(s): {', '.join(missing)}")
    kind = data["kind"]
    if kind not in KINDS:
        raise ConfigError(f"unknown kind {kind!r}; expected one of {', '.join(KINDS)}")
    unknown = sorted(set(data) - {"kind", "params", "grid", "seed", "out"})
    if unknown:
        raise ConfigError(f"unknown top-level field(s): {', '.join(unknown)}")
    params = copy.deepcopy(DEFAULTS[kind])
    extra = sorted(set(data.get("params", {})) - set(params))
    if extra:
        raise ConfigError(f"unknown params for {kind}: {', '.join(extra)}")
    params.update(copy.deepcopy(data.get("params", {})))
    grid = copy.deepcopy(GRID_DEFAULTS[kind])
    grid.update(copy.deepcopy(data.get("grid", {})))
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    _validate(kind, params, grid)
    return ExperimentConfig(kind, params, grid, seed, str(data.get("out", "runs")))


def load_config(path) -> ExperimentConfig:
    """Read a TOML (``.toml``) or JSON (``.json``) configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such file")
    text = path.read_text()
    suffix = path.suffix.lower()
    if suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    elif suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    else:
        raise ConfigError(f"{path}: unsupported extension {suffix!r} (use .toml or .json)")
    return parse_config(data)


# -- experiment kinds ------------------------------------------------------------


def _solver_config(p: dict) -> SolveConfig:
    return SolveConfig(max_iter=int(p["max_iter"]), tol=float(p["tol"]), delta=float(p["delta"]))


def _grid(cfg: ExperimentConfig, h=None) -> GridFunction:
    g = cfg.grid
    return box_grid(g["lower"], g["upper"], g["h"] if h is None else h)


def _observed_order(hs, errs):
    if len(hs) < 2:
        return math.nan
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


def _dirichlet(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    sc = _solver_config(p)
    rows, hs, errs = [], [], []
    for level in range(p["levels"]):
        h = cfg.grid["h"] / 2**level
        g = _grid(cfg, h)
        if p["case"] == "one_d":
            # |u'| u'' ... closed form for p = 3, f = 1 on [0, 1] with zero data
            P = ExponentField.constant(3.0)
            x = g.axes()[0]
            exact = (2 / 3) * np.abs(x - 0.5) ** 1.5 - (2 / 3) * 0.5**1.5
            u = solve_dirichlet(P, g.with_values(np.ones(g.shape)), g.with_values(np.zeros(g.shape)), sc)
            free = g.interior_mask()
        else:
            p0 = float(p["p0"])
            n = g.dim
            gam = gamma_exponent(n, p0, p0)
            r = np.linalg.norm(g.points(), axis=-1)
            rr = np.where(r > 0, r, 1.0)
            exact = np.where(r > 0, rr ** (-gam), 0.0)
            f = g.with_values(np.where(r > 0, radial_p_laplacian(rr, gam, p0, n), 0.0))
            free = (r > p["r_inner"]) & (r < 1) & g.interior_mask()
            u = solve_dirichlet(ExponentField.constant(p0), f, g.with_values(exact), sc, free=free)
        err = float(np.max(np.abs(u.values - exact)[free]))
        hs.append(h)
        errs.append(err)
        rows.append([h, err, int(u.meta["iterations"])])
    summary = {"errors": errs, "h": hs, "order": _observed_order(hs, errs), "sup_error_finest": errs[-1]}
    return ExperimentResult(summary, ["h", "error", "iterations"], rows)


def _energy(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    g = _grid(cfg)
    h = g.h
    P = ExponentField.constant(float(p["p0"]))
    rows, worst_pos, worst_slope = [], 0.0, 0.0
    histories = {}
    for a, Q in p["cases"]:
        bv = np.zeros(g.shape)
        bv[(0,) * g.dim] = a
        prob = EnergyProblem(P, g.with_values(np.zeros(g.shape)), g.with_values(np.full(g.shape, float(Q))), g.with_values(bv))
        u = minimize_energy(prob, _solver_config(p))
        xs = interface_position_1d(u)
        sl = interface_slope_1d(u)
        err = (xs - a / Q) / h
        worst_pos = max(worst_pos, abs(err))
        worst_slope = max(worst_slope, abs(sl - Q) / Q)
        rows.append([a, Q, xs, a / Q, err, sl])
        histories[f"{a}_{Q}"] = [list(map(float, r)) for r in u.meta["history"]]
    summary = {"max_position_error_cells": worst_pos, "max_relative_slope_error": worst_slope, "cases": len(rows)}
    return ExperimentResult(summary, ["a", "Q", "x_star", "target", "error_cells", "slope"], rows, {"histories.json": histories})


def _barrier(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    n, pmin, pmax = int(p["n"]), float(p["p_min"]), float(p["p_max"])
    gam = gamma_exponent(n, pmin, pmax)
    consts = barrier_constants(n, pmin, pmax, p["c0"], p["c1"], p["theta"], r1=p["r1"], r2=p["r2"], samples=p["samples"])
    center = np.zeros(n)
    pc = 0.5 * (pmin + pmax)
    w = Barrier(center, p["c0"], p["c1"], 0.0, 0.0, gam, 0.0, p["r1"], p["r2"], "radial_w")
    flat = ExponentField.constant(pc) if pmin == pmax else synthetic_exponent(pc, 0.0, center)
    rep_w = certify_barrier_w(w, flat, p["samples"], threshold=consts.c_bar)
    start = consts.eps1_empirical or EPS_GRID[0]
    grid = [e for e in EPS_GRID if e <= start][: p["eps_count"]]
    rows, certs = [], {"w_flat": rep_w.to_dict(), "v": []}
    all_ok = rep_w.passed
    for eps in grid:
        P = synthetic_exponent(pc, eps ** (1 + p["theta"]), center, theta=p["theta"])
        b = Barrier(center, p["c0"], p["c1"], 0.0, 0.0, gam, eps, p["r1"], p["r2"], "perturbed_v")
        rw = certify_barrier_w(b, P, p["samples"], threshold=consts.c_bar)
        rv = certify_barrier_v(b, P, p["samples"])
        ok = rv.passed
        all_ok &= ok
        rows.append([eps, rw.min_margin, rv.min_margin, int(ok)])
        certs["v"].append(rv.to_dict())
    summary = {
        "gamma": gam,
        "c_bar": consts.c_bar,
        "w_margin": rep_w.min_margin,
        "w_passed": rep_w.passed,
        "eps0_empirical": consts.eps0_empirical,
        "eps1_empirical": consts.eps1_empirical,
        "passed": bool(all_ok),
    }
    return ExperimentResult(summary, ["eps", "w_margin", "v_margin", "passed"], rows, {"certificates.json": certs})


def _battery_problem(cfg: ExperimentConfig, h=None):
    p = cfg.params
    g = _grid(cfg, h)
    n = g.dim
    slope = (list(p["p_slope"]) + [0.0] * n)[:n]
    radius = float(np.max(np.linalg.norm(np.array([g.lower, g.upper]), axis=1)))
    P = ExponentField.linear(float(p["p0"]), slope, radius)
    if P.p_min <= 1:
        raise DomainError("the exponent leaves (1, inf) on the grid box")
    return g, P


def _battery(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    g, P = _battery_problem(cfg)
    coef = np.array([1.0, 0.5, 0.25][: g.dim] + [0.0] * max(0, g.dim - 3))
    b = g.evaluate(lambda x: 2 + x @ coef)
    f = g.with_values(np.full(g.shape, float(p["f"])))
    u = solve_dirichlet(P, f, b, _solver_config(p))
    rep = viscosity_battery(u, P, float(p["f"]), count=p["count"], seed=cfg.seed, c_tol=p["c_tol"])
    rows = [[i, v["side"], v["status"], v.get("value", math.nan)] for i, v in enumerate(rep.verdicts)]
    summary = rep.summary() | {"passed_battery": rep.failed == 0, "passed": rep.failed == 0}
    return ExperimentResult(summary, ["index", "side", "status", "value"], rows)


def _harnack(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    rows, table = [], {}
    for eps in p["eps"]:
        for level in range(p["levels"]):
            h = cfg.grid["h"] / 2**level
            g, P = _battery_problem(cfg, h)
            n = g.dim
            b = g.evaluate(lambda x: 1 + 0.5 * x[..., 0] + 0.25 * np.cos(3 * x[..., -1]))
            f = g.with_values(np.full(g.shape, eps**2))
            e = np.zeros(n)
            e[-1] = 1.0
            v = solve_shifted(P, f, e, b, _solver_config(p))
            res = harnack_ratio(v, np.zeros(n), p["R"], eps**2, P.p_max)
            rows.append([eps, h, p["R"], res.constant, res.sup, res.inf])
            table.setdefault(str(eps), []).append(res.constant)
    stability = {k: max(v) / min(v) if min(v) > 0 else math.inf for k, v in table.items()}
    summary = {"C_emp": table, "stability": stability, "passed": all(s <= 2 for s in stability.values())}
    return ExperimentResult(summary, ["eps", "h", "R", "C_emp", "sup", "inf"], rows)


def flatness_field(params: dict, dim: int):
    """Analytic field of a flatness_iteration configuration."""
    if params["field"] == "cone":
        nu0 = np.asarray(params["nu0"], dtype=float)
        off = float(params["offset"])
        return lambda x: np.maximum(x @ nu0 + off, 0.0)
    kappa = float(params["curvature"])
    return lambda x: np.maximum(x[..., -1] + kappa * np.sum(x[..., :-1] ** 2, axis=-1), 0.0)


def _flatness(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    g = _grid(cfg)
    n = g.dim
    seed = np.asarray(p["nu0"], dtype=float) if p["field"] == "cone" else np.eye(n)[-1]
    search = DirectionSearch(p["step_deg"], p["span_deg"], p["refinements"])
    tr = flatness_iteration(flatness_field(p, n), p["rbar"], int(p["K"]), seed, radius=p["radius"], search=search, grid=g)
    rows = []
    for k, (c, rho) in enumerate(zip(tr.certificates, tr.rho)):
        run = _fit_alpha(tr.rho[: k + 1], tr.eps[: k + 1])[0]
        rows.append([k, rho, c.eps, c.a, c.b] + list(c.nu) + [run])
    steps = tr.direction_steps()
    summary = {
        "alpha": tr.alpha,
        "alpha_residual": tr.alpha_residual,
        "eps": tr.eps,
        "direction_chain": float(sum(steps)),
        "max_eps": max(tr.eps),
    }
    header = ["k", "rho", "eps", "a", "b"] + [f"nu{i}" for i in range(n)] + ["alpha_running"]
    return ExperimentResult(summary, header, rows, {"trace.json": tr.to_dict()})


def _neumann(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    h, n, rho = cfg.grid["h"], int(p["n"]), float(p["rho"])
    rows, errs, stab = [], {}, {}
    for p0 in p["p0"]:
        poly = lambda x, p0=p0: x[..., 0] ** 2 - x[..., -1] ** 2 / (p0 - 1)  # noqa: E731
        u = solve_neumann_linearized(p0, rho, poly, h, n=n)
        err = float(np.max(np.abs(u.values - poly(u.points()))))
        generic = solve_neumann_linearized(
            p0, rho, lambda x: np.cos(2 * x[..., 0]) * np.cosh(x[..., -1]) + 0.3 * x[..., 0], h, n=n
        )
        rem = quadratic_remainder(generic, tuple(p["radii"]))
        for r, C in rem.items():
            rows.append([p0, err, r, C])
        errs[str(p0)] = err
        vals = list(rem.values())
        stab[str(p0)] = max(vals) / min(vals) if min(vals) > 0 else math.inf
    summary = {"poly_error": errs, "remainder_stability": stab, "passed": all(s <= 2 for s in stab.values())}
    return ExperimentResult(summary, ["p0", "poly_error", "r", "C_bar"], rows)


def _norms(cfg: ExperimentConfig) -> ExperimentResult:
    p = cfg.params
    rng = np.random.default_rng(cfg.seed)
    g = _grid(cfg)
    n = g.dim
    rows, ok_count, worst_h = [], 0, 0.0
    for i in range(p["samples"]):
        lo = float(rng.uniform(p["p_min"], p["p_max"]))
        hi = float(rng.uniform(lo, p["p_max"]))
        c = 0.5 * (np.array(g.lower) + np.array(g.upper))
        radius = float(np.linalg.norm(np.array(g.upper) - c))
        direction = rng.normal(size=n)
        slope = direction / np.linalg.norm(direction) * (hi - lo) / (2 * radius)
        P = ExponentField.linear(0.5 * (lo + hi), slope, radius, base_point=c)
        amp = float(np.exp(rng.uniform(-3, 3)))
        coef = rng.normal(size=(3, n))
        u = g.evaluate(lambda x, a=amp, k=coef: a * np.sin(x @ k[0] + k[1, 0]) * np.cos(x @ k[2]))
        m = modular(u, P)
        nrm = luxemburg_norm(u, P)
        blo, bhi = norm_bracket(m, P.p_min, P.p_max)
        ok = blo * (1 - 1e-9) <= nrm <= bhi * (1 + 1e-9)
        ok_count += ok
        herr = 0.0
        for t in p["scales"]:
            nt = luxemburg_norm(u * t, P)
            herr = max(herr, abs(nt - abs(t) * nrm) / max(abs(t) * nrm, 1e-300))
        worst_h = max(worst_h, herr)
        rows.append([i, m, nrm, blo, bhi, int(ok), herr])
    summary = {"bracket_passes": ok_count, "samples": p["samples"], "homogeneity_error": worst_h}
    summary["passed"] = ok_count == p["samples"] and worst_h <= 1e-9
    return ExperimentResult(summary, ["sample", "modular", "norm", "lower", "upper", "bracket_ok", "homogeneity_error"], rows)


_RUNNERS = {
    "dirichlet_benchmark": _dirichlet,
    "energy_benchmark": _energy,
    "barrier_certification": _barrier,
    "viscosity_battery": _battery,
    "harnack_study": _harnack,
    "flatness_iteration": _flatness,
    "neumann_check": _neumann,
    "norm_suite": _norms,
}


def compute(cfg: ExperimentConfig) -> ExperimentResult:
    """Evaluate an experiment without writing anything."""
    return _RUNNERS[cfg.kind](cfg)


# -- persistence -----------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def table_csv(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=1, allow_nan=True) + "\n"


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, plots: bool = True) -> RunRecord:
    """Run ``cfg`` and write its artifacts to ``<out>/<kind>-<hash>``.

    Module errors propagate with the run directory noted in ``run.log``;
    artifacts written before the failure are listed there as partial.
    """
    base = Path(out if out is not None else cfg.out)
    run_dir = base / f"{cfg.kind}-{config_hash(cfg)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    logfile = run_dir / "run.log"
    t0 = time.perf_counter()
    written: list[str] = []

    def write(name: str, text: str):
        (run_dir / name).write_text(text)
        written.append(name)

    write("config.json", dump_json(cfg.to_dict() | {"out": "."}))
    write("schema.json", dump_json({cfg.kind: CSV_SCHEMA[cfg.kind]}))
    try:
        res = compute(cfg)
    except Exception as exc:
        logfile.write_text(
            f"kind={cfg.kind}\nstatus=failed\nerror={type(exc).__name__}: {exc}\npartial={','.join(written)}\n"
        )
        raise
    write("table.csv", table_csv(res.header, res.rows))
    write("summary.json", dump_json(res.summary))
    for name, obj in sorted(res.extra.items()):
        write(name, dump_json(obj))
    record = RunRecord(cfg.to_dict(), __version__, 0.0, str(run_dir), list(written), _jsonable(res.summary))
    if plots:
        from .plotting import emit_plots

        paths, notes = emit_plots(run_dir, cfg.kind)
        record.artifacts += paths
        record.notes += notes
    record.wall_time = time.perf_counter() - t0
    record.artifacts.append("record.json")
    (run_dir / "record.json").write_text(dump_json(record.persistent()))
    logfile.write_text(f"kind={cfg.kind}\nstatus=ok\nwall_time={record.wall_time:.3f}s\nversion={__version__}\n")
    missing = [a for a in record.artifacts if not (run_dir / a).exists()]
    if missing:
        raise RuntimeError(f"artifacts missing after run: {missing}")
    log.info("run %s finished in %.2fs", run_dir, record.wall_time)
    return record


def verify_run(run_dir) -> tuple[bool, list[str]]:
    """Replay a run from its config snapshot and re-check its certificates.

    Returns ``(ok, messages)``; ``ok`` requires the replayed summary to equal
    the stored one exactly and every certificate to hold.
    """
    run_dir = Path(run_dir)
    cfg = parse_config(json.loads((run_dir / "config.json").read_text()))
    stored = json.loads((run_dir / "summary.json").read_text())
    res = compute(cfg)
    msgs = []
    replay = json.loads(dump_json(res.summary))
    ok = replay == stored
    msgs.append("summary reproduced" if ok else "summary differs from the stored run")
    if "passed" in stored and not stored["passed"]:
        ok = False
        msgs.append("stored run did not pass")
    trace = run_dir / "trace.json"
    if cfg.kind == "flatness_iteration" and trace.exists():
        data = json.loads(trace.read_text())
        base = _grid(cfg)
        fn = flatness_field(cfg.params, base.dim)
        for c in data["certificates"]:
            rho = cfg.params["rbar"] ** c["k"]
            lat = base.rescale(rho)
            uk = lat.with_values(fn(rho * lat.points()) / rho)
            cert = FlatnessCertificate(c["center"], c["radius"], c["nu"], c["a"], c["b"], c["k"])
            good = cert.verify(uk)
            ok &= good
            msgs.append(f"certificate k={c['k']}: {'ok' if good else 'FAILED'}")
    certs = run_dir / "certificates.json"
    if certs.exists():
        data = json.loads(certs.read_text())
        reps = [data["w_flat"]] + data["v"]
        good = all(r["passed"] == (r["min_margin"] > 0) and r["passed"] for r in reps)
        ok &= good
        msgs.append(f"barrier certificates: {'ok' if good else 'FAILED'}")
    return bool(ok), msgs

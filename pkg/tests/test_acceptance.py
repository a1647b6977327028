"""Acceptance suite: one test per headline criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the "acceptance criteria" section of the terminal summary.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from benchmarks import smooth_benchmarks
from pxfb.barriers import (
    EPS_GRID,
    Barrier,
    barrier_constants,
    certify_barrier_v,
    certify_barrier_w,
    eval_barrier,
    gamma_conditions,
    gamma_exponent,
    radial_p_laplacian,
    synthetic_exponent,
)
from pxfb.experiments import compute, parse_config, run_experiment
from pxfb.exponent import ExponentField
from pxfb.flatness import flatness_iteration
from pxfb.grid import GridFunction, box_grid, extract_positive_phase
from pxfb.operators import eval_p_laplacian_div, eval_p_laplacian_nondiv
from pxfb.solver import (
    EnergyProblem,
    interface_position_1d,
    interface_slope_1d,
    minimize_energy,
    quadratic_remainder,
    solve_dirichlet,
    solve_neumann_linearized,
    solve_shifted,
)
from pxfb.viscosity import viscosity_battery

pytestmark = pytest.mark.acceptance


def order(hs, errs):
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


def test_gamma_formula(criterion):
    t0 = time.perf_counter()
    hand = {(2, 2.0, 2.0): 1.0, (3, 2.0, 2.0): 2.0, (2, 1.5, 3.0): 4.0}
    exact = all(gamma_exponent(*k) == v for k, v in hand.items())
    rng = np.random.default_rng(2024)
    worst = math.inf
    for _ in range(100):
        n = int(rng.integers(1, 7))
        pmin = float(rng.uniform(1.01, 6.0))
        pmax = pmin + float(rng.uniform(0.0, 6.0))
        g = gamma_exponent(n, pmin, pmax)
        worst = min(worst, float(min(gamma_conditions(g, n, pmin, pmax))), g - 1)
    dt = time.perf_counter() - t0
    ok = exact and worst >= 0 and dt < 1.0
    criterion("gamma formula", ok, f"hand values exact={exact}, min slack={worst:.3g}, {dt:.2f}s")


def test_radial_identity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for p0 in (1.5, 2.0, 3.0):
        for n in (2, 3):
            gam = gamma_exponent(n, p0, p0)
            b = Barrier(np.zeros(n), 1.0, 1.0, 0.0, 0.0, gam, 0.0, 0.1, 1.0)
            d = rng.normal(size=(10_000, n))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            r = rng.uniform(0.1, 1.0, 10_000)
            _, _, lap = eval_barrier(b, d * r[:, None], ExponentField.constant(p0))
            exact = radial_p_laplacian(r, gam, p0, n)
            worst = max(worst, float(np.max(np.abs(lap - exact) / np.abs(exact))))
    dt = time.perf_counter() - t0
    criterion("radial identity", worst <= 1e-10 and dt < 5.0, f"max rel error={worst:.2e}, {dt:.2f}s")


def test_barrier_certification(criterion):
    t0 = time.perf_counter()
    n, p, samples = 2, 2.0, 64
    center = np.zeros(n)
    gam = gamma_exponent(n, p, p)
    consts = barrier_constants(n, p, p, 1.0, 1.0, theta=1.0, r1=0.1, r2=1.0, samples=samples)
    w = Barrier(center, 1.0, 1.0, 0.0, 0.0, gam, 0.0, 0.1, 1.0)
    rep_w = certify_barrier_w(w, ExponentField.constant(p), samples)
    # Delta w = 1 exactly on |x| = 1; the float evaluation may round a few ulps below
    w_ok = rep_w.passed and rep_w.min_margin >= consts.c_bar - 1e-12 and consts.c_bar == 0.5
    eps1 = consts.eps1_empirical
    v_ok, checked, worst = eps1 is not None, 0, math.inf
    for eps in (e for e in EPS_GRID if eps1 is not None and e <= eps1):
        P = synthetic_exponent(p, eps**2, center, theta=1.0)
        v = Barrier(center, 1.0, 1.0, 0.0, 0.0, gam, eps, 0.1, 1.0, "perturbed_v")
        rep = certify_barrier_v(v, P, samples)
        v_ok &= rep.passed
        worst = min(worst, rep.min_margin / eps**2)
        checked += 1
    dt = time.perf_counter() - t0
    criterion(
        "barrier certification",
        w_ok and v_ok and dt < 30.0,
        f"w margin={rep_w.min_margin:.15g}, eps1={eps1}, v passes on {checked} eps, {dt:.1f}s",
    )


def test_div_nondiv_consistency(criterion):
    t0 = time.perf_counter()
    hs = [1 / 64, 1 / 128, 1 / 256]
    orders = {}
    for name, phi, P, lo, up in smooth_benchmarks():
        errs = []
        for h in hs:
            g = box_grid(lo, up, h)
            res = eval_p_laplacian_div(g.evaluate(phi.value), P, g)
            exact = eval_p_laplacian_nondiv(phi, g.points(), P)
            errs.append(float(np.max(np.abs(res.values - exact)[g.interior_mask()])))
        orders[name] = order(hs, errs)
    dt = time.perf_counter() - t0
    ok = len(orders) == 5 and min(orders.values()) >= 1 and dt < 60
    detail = ", ".join(f"{k}={v:.2f}" for k, v in orders.items())
    criterion("div/nondiv consistency", ok, f"orders {detail}, {dt:.1f}s")


def test_solver_oracles(criterion):
    t0 = time.perf_counter()
    g = box_grid([0], [1], 1 / 512)
    u = solve_dirichlet(ExponentField.constant(3.0), g.with_values(np.ones(g.shape)), g.with_values(np.zeros(g.shape)))
    x = g.axes()[0]
    err_1d = float(np.max(np.abs(u.values - ((2 / 3) * np.abs(x - 0.5) ** 1.5 - (2 / 3) * 0.5**1.5))))

    radial_orders = {}
    hs = [1 / 32, 1 / 64, 1 / 128]
    for p0 in (1.5, 2.0, 3.0):
        errs = []
        for h in hs:
            gg = box_grid([-1, -1], [1, 1], h)
            gam = gamma_exponent(2, p0, p0)
            r = np.linalg.norm(gg.points(), axis=-1)
            rr = np.where(r > 0, r, 1.0)
            exact = np.where(r > 0, rr**-gam, 0.0)
            f = gg.with_values(np.where(r > 0, radial_p_laplacian(rr, gam, p0, 2), 0.0))
            free = (r > 0.1) & (r < 1)
            uu = solve_dirichlet(ExponentField.constant(p0), f, gg.with_values(exact), free=free)
            errs.append(float(np.max(np.abs(uu.values - exact)[free & gg.interior_mask()])))
        radial_orders[p0] = (order(hs, errs), errs[0] > errs[1] > errs[2])

    h = 1 / 512
    energy_ok, worst_pos, worst_slope = True, 0.0, 0.0
    for a in (0.25, 0.5, 0.75):
        for Q in (1.0, 2.0):
            ge = box_grid([0], [1], h)
            bv = np.zeros(ge.shape)
            bv[0] = a
            prob = EnergyProblem(
                ExponentField.constant(2.0), ge.with_values(0 * bv), ge.with_values(np.full(ge.shape, Q)), ge.with_values(bv)
            )
            ue = minimize_energy(prob)
            pos = abs(interface_position_1d(ue) - a / Q)
            slope = abs(interface_slope_1d(ue) - Q) / Q
            worst_pos, worst_slope = max(worst_pos, pos / h), max(worst_slope, slope)
            energy_ok &= pos <= 2 * h and slope <= 0.05
    dt = time.perf_counter() - t0
    radial_ok = all(o >= 1 and dec for o, dec in radial_orders.values())
    ok = err_1d <= 1e-3 and radial_ok and energy_ok and dt < 300
    rad = ", ".join(f"p0={k}: {v[0]:.2f}" for k, v in radial_orders.items())
    criterion(
        "solver oracles",
        ok,
        f"1D error={err_1d:.2e}; radial orders {rad}; interface {worst_pos:.2f} cells, slope {worst_slope:.1e}; {dt:.0f}s",
    )


def test_linearized_neumann(criterion):
    t0 = time.perf_counter()
    poly_err, stab = {}, {}
    for p0 in (1.5, 2.0, 3.0):
        poly = lambda x, p0=p0: x[..., 0] ** 2 - x[..., -1] ** 2 / (p0 - 1)  # noqa: E731
        u = solve_neumann_linearized(p0, 0.5, poly, 1 / 64)
        poly_err[p0] = float(np.max(np.abs(u.values - poly(u.points()))))
        raw = lambda x: np.cos(2 * x[..., 0]) * np.cosh(x[..., -1]) + 0.3 * x[..., 0]  # noqa: E731
        peak = float(np.max(np.abs(raw(u.points()))))
        generic = solve_neumann_linearized(p0, 0.5, lambda x: raw(x) / peak, 1 / 64)
        rem = list(quadratic_remainder(generic, (1 / 16, 1 / 8, 1 / 4)).values())
        stab[p0] = max(rem) / min(rem) if min(rem) > 0 and all(map(math.isfinite, rem)) else math.inf
    dt = time.perf_counter() - t0
    ok = max(poly_err.values()) <= 1e-9 and max(stab.values()) <= 2 and dt < 120
    criterion(
        "linearized Neumann",
        ok,
        f"poly error={max(poly_err.values()):.1e}, remainder stability={max(stab.values()):.3f}, {dt:.1f}s",
    )


def _battery_benchmarks():
    """Solver outputs paired with their exponent, right-hand side and admissible region."""
    out = []
    g = box_grid([-1, -1], [1, 1], 1 / 32)
    P = ExponentField.linear(2.5, [0.3, 0.2], 1.5)
    b = g.evaluate(lambda x: 2 + x[..., 0] + 0.5 * x[..., 1])
    out.append(("dirichlet_2d", solve_dirichlet(P, g.with_values(np.ones(g.shape)), b), P, 1.0, None))

    q = g.evaluate(lambda x: x[..., -1])
    bs = g.evaluate(lambda x: 1 + 0.5 * x[..., 0] + 0.25 * np.cos(3 * x[..., -1]))
    v = solve_shifted(P, g.with_values(np.full(g.shape, 0.01)), [0.0, 1.0], bs)
    # v + x_n solves the unshifted equation with the same right-hand side
    out.append(("shifted_2d", v + q + 1.0, P, 0.01, None))

    g1 = box_grid([0], [1], 1 / 256)
    P3 = ExponentField.constant(3.0)
    u1 = solve_dirichlet(P3, g1.with_values(np.ones(g1.shape)), g1.evaluate(lambda x: 1 + x[..., 0]))
    out.append(("one_d_p3", u1, P3, 1.0, None))

    gr = box_grid([-1, -1], [1, 1], 1 / 64)
    r = np.linalg.norm(gr.points(), axis=-1)
    rr = np.where(r > 0, r, 1.0)
    P2 = ExponentField.constant(2.5)
    gam = gamma_exponent(2, 2.5, 2.5)
    exact = np.where(r > 0, rr**-gam, 0.0)
    fr = np.where(r > 0, radial_p_laplacian(rr, gam, 2.5, 2), 0.0)
    free = (r > 0.3) & (r < 1)
    ur = solve_dirichlet(P2, gr.with_values(fr), gr.with_values(exact), free=free)
    region = (r > 0.3 + 4 / 64) & (r < 1 - 4 / 64)
    f_radial = lambda x: radial_p_laplacian(np.linalg.norm(x, axis=-1), gam, 2.5, 2)  # noqa: E731
    out.append(("radial_annulus", ur, P2, f_radial, region))
    return out


def test_viscosity_battery(criterion):
    t0 = time.perf_counter()
    lines, ok = [], True
    for name, u, P, f, region in _battery_benchmarks():
        rep = viscosity_battery(u, P, f, count=1000, seed=11, c_tol=10.0, region=region)
        ok &= rep.failed == 0 and rep.total == 1000 and rep.max_violation <= rep.tolerance
        lines.append(f"{name}: {rep.passed}/{rep.exempt}/{rep.failed} max viol {rep.max_violation:.2f}")
    dt = time.perf_counter() - t0
    criterion("viscosity battery", ok and dt < 180, "; ".join(lines) + f" (pass/exempt/fail), {dt:.0f}s")


def test_harnack_study(criterion):
    t0 = time.perf_counter()
    cfg = parse_config({"kind": "harnack_study", "params": {"levels": 2, "eps": [0.1, 0.01]}, "grid": {"h": 1 / 64}})
    res = compute(cfg)
    C = res.summary["C_emp"]
    finite = all(math.isfinite(c) and c > 0 for vals in C.values() for c in vals)
    stab = res.summary["stability"]
    dt = time.perf_counter() - t0
    ok = finite and all(s <= 2 for s in stab.values()) and len(res.rows) == 4 and dt < 300
    detail = ", ".join(f"eps={k}: C={[round(c, 5) for c in v]}" for k, v in C.items())
    criterion("Harnack study", ok, f"{detail}, {dt:.0f}s")


def test_flatness_iteration(criterion):
    t0 = time.perf_counter()
    grid = box_grid([-1, -1], [1, 1], 1 / 512)
    nu0 = np.array([0.6, 0.8])
    cone = flatness_iteration(lambda x: np.maximum(x @ nu0, 0.0), 0.5, 6, nu0, grid=grid)
    cone_ok = all(e == 0.0 for e in cone.eps) and all(np.array_equal(nu, nu0) for nu in cone.directions)

    para = flatness_iteration(lambda x: np.maximum(x[..., -1] + 0.1 * x[..., 0] ** 2, 0.0), 0.5, 7, [0.0, 1.0], grid=grid)
    para_ok = 0.8 <= para.alpha <= 1.2 and len(para.eps) >= 6

    # near-flat minimizer: flat boundary data bent by a small parabola, f small
    h = 1 / 128
    b = GridFunction.sample(lambda x: np.maximum(x[..., 1] + 0.2 * (x[..., 0] ** 2 - 1 / 3), 0.0), [-1, -1], [1, 1], h)
    prob = EnergyProblem(ExponentField.constant(2.0), b.with_values(np.full(b.shape, 0.01)), b.with_values(np.ones(b.shape)), b)
    u = minimize_energy(prob)
    fb = extract_positive_phase(u).points
    center = fb[np.argmin(np.linalg.norm(fb, axis=1))]
    radius = 0.5
    K = int(math.floor(math.log(4 * h / radius) / math.log(0.5)))
    tr = flatness_iteration(u, 0.5, K, [0.0, 1.0], center=center, radius=radius)
    ratios = [r for r in tr.ratios() if math.isfinite(r)]
    mean_ratio = float(np.mean(ratios)) if ratios else math.inf
    dt = time.perf_counter() - t0
    ok = cone_ok and para_ok and mean_ratio <= 0.95 and dt < 600
    criterion(
        "flatness iteration",
        ok,
        f"cone exact={cone_ok}, parabola alpha={para.alpha:.4f}, minimizer K={K} ratios="
        f"{[round(r, 3) for r in ratios]} mean={mean_ratio:.3f}, {dt:.0f}s",
    )


def test_norm_suite(criterion):
    t0 = time.perf_counter()
    res = compute(parse_config({"kind": "norm_suite", "params": {"samples": 1000}, "seed": 5}))
    s = res.summary
    dt = time.perf_counter() - t0
    ok = s["bracket_passes"] == 1000 and s["homogeneity_error"] <= 1e-9 and dt < 30
    criterion(
        "norm suite",
        ok,
        f"bracket {s['bracket_passes']}/1000, homogeneity error={s['homogeneity_error']:.1e}, {dt:.1f}s",
    )


DETERMINISM_CONFIGS = [
    {"kind": "dirichlet_benchmark", "params": {"levels": 2}, "grid": {"h": 1 / 64}},
    {"kind": "energy_benchmark", "params": {"cases": [[0.5, 1.0], [0.25, 2.0]]}, "grid": {"h": 1 / 128}},
    {"kind": "barrier_certification", "params": {"samples": 32, "eps_count": 4}},
    {"kind": "viscosity_battery", "params": {"count": 200}, "grid": {"h": 1 / 16}, "seed": 3},
    {"kind": "harnack_study", "params": {"levels": 2}, "grid": {"h": 1 / 16}},
    {"kind": "flatness_iteration", "params": {"field": "parabola", "K": 4}, "grid": {"h": 1 / 128}},
    {"kind": "neumann_check", "grid": {"h": 1 / 32}},
    {"kind": "norm_suite", "params": {"samples": 100}, "seed": 9},
]


def test_determinism(criterion, tmp_path):
    t0 = time.perf_counter()
    compared, mismatched = 0, []
    for data in DETERMINISM_CONFIGS:
        cfg = parse_config(data)
        d1 = Path(run_experiment(cfg, out=tmp_path / "first", plots=False).directory)
        d2 = Path(run_experiment(cfg, out=tmp_path / "second", plots=False).directory)
        for f1 in sorted(d1.iterdir()):
            if f1.suffix not in (".csv", ".json"):
                continue
            compared += 1
            if f1.read_bytes() != (d2 / f1.name).read_bytes():
                mismatched.append(f"{d1.name}/{f1.name}")
    dt = time.perf_counter() - t0
    criterion(
        "determinism",
        not mismatched and compared > 0,
        f"{compared} CSV/JSON files over {len(DETERMINISM_CONFIGS)} kinds, mismatches={mismatched}, {dt:.0f}s",
    )

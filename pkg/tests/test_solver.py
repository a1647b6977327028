import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pxfb.barriers import gamma_exponent, radial_p_laplacian
from pxfb.errors import DomainError, NonConvergenceError
from pxfb.exponent import ExponentField
from pxfb.grid import GridFunction, box_grid
from pxfb.operators import eval_p_laplacian_div
from pxfb.solver import (
    EnergyProblem,
    SolveConfig,
    discrete_energy,
    history_csv,
    interface_position_1d,
    interface_slope_1d,
    minimize_energy,
    quadratic_remainder,
    solve_dirichlet,
    solve_linearized_box,
    solve_neumann_linearized,
    solve_shifted,
)


def zeros(g):
    return g.with_values(np.zeros(g.shape))


def one_d_p3_exact(x):
    # |u'| u' = x - 1/2 integrates to a kink-free profile symmetric about 1/2
    return (2 / 3) * np.abs(x - 0.5) ** 1.5 - (2 / 3) * 0.5**1.5


def test_config_validation():
    with pytest.raises(DomainError):
        SolveConfig(tol=0)
    with pytest.raises(DomainError):
        SolveConfig(max_iter=0)
    with pytest.raises(DomainError):
        SolveConfig(step_rule="wild")


def test_dirichlet_linear_data_is_reproduced():
    g = box_grid([-1, -1], [1, 1], 1 / 16)
    b = g.evaluate(lambda x: x[..., -1])
    u = solve_dirichlet(ExponentField.constant(2.0), zeros(g), b)
    assert np.max(np.abs(u.values - b.values)) < 1e-9
    assert u.meta["delta"] == 1e-8


def test_dirichlet_residual_below_tolerance():
    g = box_grid([0, 0], [1, 1], 1 / 16)
    P = ExponentField.linear(2.4, [0.3, -0.2], 1.5)
    b = g.evaluate(lambda x: 1 + x[..., 0] + 0.5 * x[..., 1] ** 2)
    f = g.with_values(np.full(g.shape, 0.5))
    u = solve_dirichlet(P, f, b)
    res = eval_p_laplacian_div(u, P, f)
    assert np.max(np.abs(res.values[g.interior_mask()])) / 1.5 <= 1e-9
    assert u.meta["residual"] <= 1e-9


def test_one_d_p3_closed_form_converges():
    errs, hs = [], [1 / 32, 1 / 64, 1 / 128]
    for h in hs:
        g = box_grid([0], [1], h)
        u = solve_dirichlet(ExponentField.constant(3.0), g.with_values(np.ones(g.shape)), zeros(g))
        errs.append(np.max(np.abs(u.values - one_d_p3_exact(g.axes()[0]))))
    assert errs[0] > errs[1] > errs[2]
    assert np.polyfit(np.log(hs), np.log(errs), 1)[0] >= 1


@pytest.mark.parametrize("p0", [1.5, 2.0, 3.0])
def test_radial_manufactured_solution(p0):
    errs, hs = [], [1 / 16, 1 / 32]
    for h in hs:
        g = box_grid([-1, -1], [1, 1], h)
        gam = gamma_exponent(2, p0, p0)
        r = np.linalg.norm(g.points(), axis=-1)
        rr = np.where(r > 0, r, 1.0)
        exact = np.where(r > 0, rr**-gam, 0.0)
        f = g.with_values(np.where(r > 0, radial_p_laplacian(rr, gam, p0, 2), 0.0))
        free = (r > 0.3) & (r < 1)
        u = solve_dirichlet(ExponentField.constant(p0), f, g.with_values(exact), free=free)
        errs.append(np.max(np.abs(u.values - exact)[free & g.interior_mask()]))
    assert errs[1] < errs[0]
    assert math.log(errs[0] / errs[1], 2) >= 1


def test_nonconvergence_carries_partial():
    g = box_grid([0], [1], 1 / 64)
    cfg = SolveConfig(max_iter=1, tol=1e-14)
    with pytest.raises(NonConvergenceError) as info:
        solve_dirichlet(ExponentField.constant(3.0), g.with_values(np.ones(g.shape)), zeros(g), cfg)
    assert info.value.residual > 0


def test_solver_is_deterministic():
    g = box_grid([0, 0], [1, 1], 1 / 16)
    P = ExponentField.linear(1.7, [0.2, 0.1], 1.5)
    b = g.evaluate(lambda x: np.sin(2 * x[..., 0]) + x[..., 1])
    a = solve_dirichlet(P, zeros(g), b)
    c = solve_dirichlet(P, zeros(g), b)
    np.testing.assert_array_equal(a.values, c.values)


@settings(max_examples=15)
@given(
    p0=st.floats(1.3, 3.5),
    lift=st.floats(0, 0.5),
    df=st.floats(0, 1),
    k=st.floats(0.5, 3),
)
def test_discrete_comparison(p0, lift, df, k):
    g = box_grid([0, 0], [1, 1], 1 / 8)
    P = ExponentField.constant(p0)
    b1 = g.evaluate(lambda x: np.sin(k * x[..., 0]) + x[..., 1])
    b2 = b1 + lift
    f2 = g.with_values(np.full(g.shape, -0.2))
    f1 = f2 + df
    u1 = solve_dirichlet(P, f1, b1)
    u2 = solve_dirichlet(P, f2, b2)
    assert np.all(u1.values <= u2.values + 1e-8)


# -- shifted equation -----------------------------------------------------------


def test_shifted_zero_data():
    g = box_grid([-1, -1], [1, 1], 1 / 16)
    v = solve_shifted(ExponentField.constant(1.6), zeros(g), [0.0, 1.0], zeros(g))
    assert np.max(np.abs(v.values)) < 1e-12


def test_shifted_rejects_non_unit():
    g = box_grid([-1, -1], [1, 1], 1 / 4)
    with pytest.raises(DomainError):
        solve_shifted(ExponentField.constant(2.0), zeros(g), [0.0, 2.0], zeros(g))


def test_shifted_matches_dirichlet_after_substitution():
    g = box_grid([-1, -1], [1, 1], 1 / 16)
    P = ExponentField.linear(2.6, [0.2, -0.1], 1.5)
    f = g.with_values(np.full(g.shape, 0.01))
    b = g.evaluate(lambda x: 1 + x[..., 1] + 0.1 * np.cos(x[..., 0]))
    u = solve_dirichlet(P, f, b)
    q = g.evaluate(lambda x: x[..., 1])
    v = solve_shifted(P, f, [0.0, 1.0], b - q)
    assert np.max(np.abs(v.values - (u.values - q.values))) < 1e-8


def test_shifted_p2_reduces_to_laplace():
    g = box_grid([-1, -1], [1, 1], 1 / 16)
    P = ExponentField.constant(2.0)
    f = g.evaluate(lambda x: x[..., 0] * x[..., 1])
    b = g.evaluate(lambda x: np.cos(x[..., 0]))
    v = solve_shifted(P, f, [0.6, 0.8], b)
    u = solve_dirichlet(P, f, b)
    assert np.max(np.abs(v.values - u.values)) < 1e-9


# -- energy ------------------------------------------------------------------------


def energy_problem_1d(a, Q, h, p0=2.0):
    g = box_grid([0], [1], h)
    bv = np.zeros(g.shape)
    bv[0] = a
    return EnergyProblem(
        ExponentField.constant(p0), zeros(g), g.with_values(np.full(g.shape, float(Q))), g.with_values(bv)
    )


def test_energy_problem_rejects_negative_q():
    g = box_grid([0], [1], 0.25)
    with pytest.raises(DomainError):
        EnergyProblem(ExponentField.constant(2.0), zeros(g), g.with_values(-np.ones(g.shape)), zeros(g))


def test_energy_without_jump_is_linear_interpolant():
    g = box_grid([0, 0], [1, 1], 1 / 8)
    b = g.evaluate(lambda x: 1 + x[..., 0] - 0.5 * x[..., 1])
    prob = EnergyProblem(ExponentField.constant(2.0), zeros(g), zeros(g), b)
    u = minimize_energy(prob)
    assert np.max(np.abs(u.values - b.values)) < 1e-9


@pytest.mark.parametrize("Q,x_star", [(1.0, 0.5), (2.0, 0.25)])
def test_energy_one_d_interface(Q, x_star):
    u = minimize_energy(energy_problem_1d(0.5, Q, 1 / 64))
    assert interface_position_1d(u) == pytest.approx(x_star, abs=1 / 64)
    assert interface_slope_1d(u) == pytest.approx(Q, rel=0.05)
    x = u.axes()[0]
    np.testing.assert_allclose(u.values, np.maximum(0.5 - Q * x, 0.0), atol=Q / 64)


@pytest.mark.parametrize("a", [0.25, 0.5, 0.75])
@pytest.mark.parametrize("Q", [1.0, 2.0])
def test_free_boundary_slope_law(a, Q):
    u = minimize_energy(energy_problem_1d(a, Q, 1 / 512))
    assert abs(interface_slope_1d(u) - Q) <= 0.05 * Q


def test_energy_history_nonincreasing_2d():
    g = box_grid([-1, -1], [1, 1], 1 / 16)
    b = g.evaluate(lambda x: np.maximum(x[..., 1] + 0.2 * (x[..., 0] ** 2 - 1 / 3), 0.0))
    P = ExponentField.linear(2.2, [0.1, 0.1], 1.5)
    f = g.with_values(np.full(g.shape, 0.01))
    prob = EnergyProblem(P, f, g.with_values(np.ones(g.shape)), b)
    u = minimize_energy(prob)
    energies = [e for _, _, e in u.meta["history"]]
    assert all(b2 <= a2 + 1e-12 * abs(a2) for a2, b2 in zip(energies, energies[1:]))
    assert u.meta["energy"] == pytest.approx(discrete_energy(u, prob), rel=1e-12)
    assert np.all(u.values >= 0)
    text = history_csv(u.meta["history"])
    assert text.splitlines()[0] == "iteration,residual,energy"
    assert len(text.splitlines()) == len(u.meta["history"]) + 1


# -- linearized Neumann problem ----------------------------------------------------


def test_neumann_linear_data():
    u = solve_neumann_linearized(2.5, 1.0, lambda x: x[..., 0], 1 / 16)
    assert np.max(np.abs(u.values - u.points()[..., 0])) < 1e-12


@pytest.mark.parametrize("p0", [1.5, 2.0, 3.0])
@pytest.mark.parametrize("n", [2, 3])
def test_neumann_polynomial(p0, n):
    poly = lambda x: x[..., 0] ** 2 - x[..., -1] ** 2 / (p0 - 1)  # noqa: E731
    u = solve_neumann_linearized(p0, 1.0, poly, 1 / 16, n=n)
    assert np.max(np.abs(u.values - poly(u.points()))) < 1e-10


def test_neumann_domain_errors():
    data = lambda x: x[..., 0]  # noqa: E731
    with pytest.raises(DomainError):
        solve_neumann_linearized(2.0, -1.0, data, 0.25)
    with pytest.raises(DomainError):
        solve_neumann_linearized(2.0, 1.0, data, 0.25, P=ExponentField.constant(3.0))


def test_neumann_remainder_stable():
    data = lambda x: np.cos(2 * x[..., 0]) * np.cosh(x[..., -1]) + 0.3 * x[..., 0]  # noqa: E731
    u = solve_neumann_linearized(2.5, 1.0, data, 1 / 32)
    rem = quadratic_remainder(u)
    vals = list(rem.values())
    assert all(math.isfinite(v) for v in vals)
    assert max(vals) / min(vals) <= 2


@given(p0=st.floats(1.2, 4.0), k=st.floats(0.5, 3.0), c=st.floats(-1, 1))
@settings(max_examples=20)
def test_neumann_even_reflection(p0, k, c):
    data = lambda x: np.cos(k * x[..., 0]) * (1 + x[..., -1] ** 2) + c * x[..., 0]  # noqa: E731
    h = 1 / 16
    half = solve_neumann_linearized(p0, 1.0, data, h)
    full = solve_linearized_box(p0, [-1, -1], [1, 1], h, data, neumann_bottom=False)
    m = half.shape[-1]
    lower = full.values[:, : m][:, ::-1]
    upper = full.values[:, m - 1 :]
    assert np.max(np.abs(lower - upper)) < 1e-10
    assert np.max(np.abs(upper - half.values)) < 1e-10

"""Discrete solvers.

* :func:`solve_dirichlet` / :func:`solve_shifted`: Newton's method on the
  staggered-flux residual with a sparse Jacobian obtained by colored
  complex-step differentiation.
* :func:`solve_neumann_linearized`: direct sparse solve of
  ``Delta u + (p0-2) u_nn = 0`` on a half box with a reflected ghost layer.
* :func:`minimize_energy`: critical points of the discrete one-phase energy
  ``sum |grad v|^p/p + lam chi{v>0} + f v``, reached by continuation in a
  smoothed jump followed by an exact-jump polish with pointwise sweeps.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DomainError, GridMismatchError, NonConvergenceError
from .exponent import ExponentField, check_exponent_bounds
from .grid import GridFunction, box_grid
from .norms import cell_centers
from .operators import FLUX_DELTA, divergence_residual

__all__ = [
    "SolveConfig",
    "EnergyProblem",
    "solve_dirichlet",
    "solve_shifted",
    "solve_neumann_linearized",
    "solve_linearized_box",
    "quadratic_remainder",
    "jump_weight",
    "discrete_energy",
    "minimize_energy",
    "interface_position_1d",
    "interface_slope_1d",
    "history_csv",
]


@dataclass
class SolveConfig:
    """Solver controls.

    ``tol`` bounds the discrete sup norm of the residual weighted nodewise
    by ``1 / (1 + |f|)``.  ``energy_tol`` bounds the relative energy decrease
    of a converged polish round.  ``step_rule`` is ``"armijo"`` (backtracking)
    or ``"full"``.
    """

    max_iter: int = 60
    tol: float = 1e-9
    step_rule: str = "armijo"
    delta: float = FLUX_DELTA
    seed: int = 0
    max_sweeps: int = 200
    energy_tol: float = 1e-13
    jump: str = "normalized"
    eps_factor: float = 0.5
    eps_final_cells: float = 2.0

    def __post_init__(self):
        if self.tol <= 0 or self.energy_tol <= 0:
            raise DomainError("tolerances must be positive")
        if self.max_iter < 1 or self.max_sweeps < 1:
            raise DomainError("iteration limits must be at least 1")
        if self.step_rule not in ("armijo", "full"):
            raise DomainError(f"unknown step rule {self.step_rule!r}")
        if self.jump not in ("normalized", "literal"):
            raise DomainError(f"unknown jump normalization {self.jump!r}")
        if not 0 < self.eps_factor < 1:
            raise DomainError("eps_factor must lie in (0, 1)")


# -- Newton on the divergence residual ---------------------------------------


def _stencil_offsets(n):
    return list(itertools.product((-1, 0, 1), repeat=n))


def _colored_jacobian(residual, u, free, step=1e-30):
    """Sparse Jacobian of ``residual`` w.r.t. the free nodes.

    The residual at a node depends on its ``3^n`` neighbourhood only, so the
    nodes sharing ``index mod 3`` can be perturbed together.
    """
    shape = u.shape
    n = u.ndim
    grid_idx = np.indices(shape)
    color = np.zeros(shape, dtype=int)
    for d in range(n):
        color = color * 3 + grid_idx[d] % 3
    ncol = 3**n
    derivs = np.empty((ncol,) + shape)
    for c in range(ncol):
        pert = np.zeros(shape, dtype=complex)
        pert[free & (color == c)] = 1j * step
        derivs[c] = residual(u + pert).imag / step
    number = -np.ones(shape, dtype=np.int64)
    number[free] = np.arange(int(free.sum()))
    rows, cols, vals = [], [], []
    for off in _stencil_offsets(n):
        src = [slice(None)] * n
        dst = [slice(None)] * n
        for d, o in enumerate(off):
            # row r = node in src, column j = r + off
            src[d] = slice(max(0, -o), shape[d] - max(0, o))
            dst[d] = slice(max(0, o), shape[d] - max(0, -o))
        r_num = number[tuple(src)]
        c_num = number[tuple(dst)]
        c_col = color[tuple(dst)]
        ok = (r_num >= 0) & (c_num >= 0)
        if not np.any(ok):
            continue
        d_src = derivs[(slice(None),) + tuple(src)]
        picked = np.take_along_axis(d_src, c_col[None], axis=0)[0]
        rows.append(r_num[ok])
        cols.append(c_num[ok])
        vals.append(picked[ok])
    m = int(free.sum())
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m))


def _sparse_solve(A, b, symmetric=False):
    if symmetric:
        lu = spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    else:
        lu = spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A")
    return lu.solve(b)


def _newton(residual, u0, free, config: SolveConfig, scale, history: list):
    """Damped Newton; converged when ``max |R| / scale <= tol`` (``scale`` per free node)."""
    u = u0.astype(float).copy()
    R = residual(u)[free]
    res = float(np.max(np.abs(R) / scale)) if R.size else 0.0
    history.append((len(history), res, math.nan))
    for _ in range(config.max_iter):
        if res <= config.tol:
            return u, res
        J = _colored_jacobian(residual, u, free)
        try:
            du = _sparse_solve(J, -R)
        except RuntimeError as exc:
            raise NonConvergenceError(f"singular Jacobian: {exc}", res, len(history), u) from exc
        if not np.all(np.isfinite(du)):
            raise NonConvergenceError("non-finite Newton step", res, len(history), u)
        t, norm0 = 1.0, float(np.linalg.norm(R))
        while True:
            trial = u.copy()
            trial[free] += t * du
            Rt = residual(trial)[free]
            if config.step_rule == "full" or np.linalg.norm(Rt) <= (1 - 1e-4 * t) * norm0 or t < 1e-8:
                break
            t *= 0.5
        u, R = trial, Rt
        res = float(np.max(np.abs(R) / scale))
        history.append((len(history), res, math.nan))
        if t < 1e-8:
            break
    if res <= config.tol:
        return u, res
    raise NonConvergenceError(f"Newton stopped with residual {res:.3e}", res, len(history), u)


def _prepare(P: ExponentField, f: GridFunction, boundary: GridFunction, free):
    f.require_same_grid(boundary)
    check_exponent_bounds(P.p_min, P.p_max)
    interior = f.interior_mask()
    if free is None:
        free = interior
    else:
        free = np.asarray(free, dtype=bool) & interior
    return P(f.points()), free


def _solve_flux(P, f, boundary, config, free, shift, initial):
    config = config or SolveConfig()
    p_nodes, free = _prepare(P, f, boundary, free)
    h = f.spacing
    scale = 1.0 + np.abs(f.values[free])
    history: list = []

    def make_residual(p_vals):
        return lambda vals: divergence_residual(vals, h, p_vals, f.values, shift=shift, delta=config.delta)

    start = boundary.values.copy() if initial is None else np.asarray(initial.values, dtype=float).copy()
    start[~free] = boundary.values[~free]
    if initial is None and np.any(p_nodes != 2.0):
        # p = 2 problems are linear; start from whichever of the harmonic
        # extension and the p = 2 solution with the actual f fits better
        residual = make_residual(p_nodes)
        best = None
        for rhs in (np.zeros(f.shape), f.values):
            lin = lambda vals, rhs=rhs: divergence_residual(vals, h, np.full_like(p_nodes, 2.0), rhs, shift=shift, delta=config.delta)  # noqa: E731
            try:
                cand, _ = _newton(lin, start, free, config, scale, [])
            except NonConvergenceError as exc:
                cand = exc.partial
            merit = float(np.max(np.abs(residual(cand)[free]) / scale))
            if best is None or merit < best[0]:
                best = (merit, cand)
        start = best[1]
    try:
        u, res = _newton(make_residual(p_nodes), start, free, config, scale, history)
    except NonConvergenceError:
        # homotopy in the exponent from p = 2
        u = start
        for t in (0.25, 0.5, 0.75, 1.0):
            u, res = _newton(make_residual(2.0 + t * (p_nodes - 2.0)), u, free, config, scale, history)
    meta = {"delta": config.delta, "residual": res, "iterations": len(history) - 1, "tol": config.tol}
    out = f.with_values(u, name="u", meta=meta)
    out.meta["history"] = history
    return out


def solve_dirichlet(
    P: ExponentField,
    f: GridFunction,
    boundary: GridFunction,
    config: SolveConfig | None = None,
    free=None,
    initial: GridFunction | None = None,
) -> GridFunction:
    """Solve ``div(|grad u|^(p-2) grad u) = f`` with Dirichlet data.

    Values of ``boundary`` are imposed on every node that is not free; the
    free set defaults to all interior nodes and may be restricted (for
    example to an annulus).  The residual history is in ``meta["history"]``.
    """
    return _solve_flux(P, f, boundary, config, free, None, initial)


def solve_shifted(
    P: ExponentField,
    f: GridFunction,
    e,
    boundary: GridFunction,
    config: SolveConfig | None = None,
    free=None,
    initial: GridFunction | None = None,
) -> GridFunction:
    """Solve ``div(|grad v + e|^(p-2) (grad v + e)) = f`` for a unit vector ``e``."""
    e = np.asarray(e, dtype=float)
    if e.shape != (f.dim,) or abs(np.linalg.norm(e) - 1) > 1e-12:
        raise DomainError("shift must be a unit vector of the grid dimension")
    return _solve_flux(P, f, boundary, config, free, e, initial)


# -- linearized Neumann problem ----------------------------------------------


def solve_linearized_box(p0: float, lower, upper, h: float, data, neumann_bottom: bool = True) -> GridFunction:
    """Solve ``Delta u + (p0-2) u_nn = 0`` on a box with Dirichlet data ``data``.

    With ``neumann_bottom`` the face ``x_n = lower[-1]`` carries ``u_n = 0``
    through the ghost reflection ``u_{-1} = u_{1}``; all other faces take the
    values of ``data``.
    """
    grid = box_grid(lower, upper, h)
    n, shape, hh = grid.dim, grid.shape, grid.spacing
    pts = grid.points()
    dirichlet = grid.boundary_mask()
    if neumann_bottom:
        bottom = np.zeros(shape, dtype=bool)
        bottom[(slice(None),) * (n - 1) + (0,)] = True
        side = np.zeros(shape, dtype=bool)
        for d in range(n - 1):
            sl = [slice(None)] * n
            sl[d] = 0
            side[tuple(sl)] = True
            sl[d] = -1
            side[tuple(sl)] = True
        top = np.zeros(shape, dtype=bool)
        top[(slice(None),) * (n - 1) + (-1,)] = True
        dirichlet = side | top
    unknown = ~dirichlet
    number = -np.ones(shape, dtype=np.int64)
    number[unknown] = np.arange(int(unknown.sum()))
    g = np.asarray(data(pts), dtype=float)
    m = int(unknown.sum())
    rows, cols, vals = [], [], []
    rhs = np.zeros(m)
    idx = np.argwhere(unknown)
    r_num = number[unknown]
    for d in range(n):
        coef = (p0 - 1.0 if d == n - 1 else 1.0) / hh[d] ** 2
        rows.append(r_num)
        cols.append(r_num)
        vals.append(np.full(m, -2 * coef))
        for step in (-1, 1):
            nb = idx.copy()
            nb[:, d] += step
            if neumann_bottom and d == n - 1 and step == -1:
                # reflect through x_n = 0
                at_bottom = nb[:, d] < 0
                nb[at_bottom, d] = 1
            nb_t = tuple(nb.T)
            nb_num = number[nb_t]
            is_u = nb_num >= 0
            rows.append(r_num[is_u])
            cols.append(nb_num[is_u])
            vals.append(np.full(int(is_u.sum()), coef))
            np.subtract.at(rhs, r_num[~is_u], coef * g[nb_t][~is_u])
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m))
    sol = _sparse_solve(A, rhs)
    out = g.copy()
    out[unknown] = sol
    res = A @ sol - rhs
    return grid.with_values(out, name="u_tilde", meta={"p0": p0, "residual": float(np.max(np.abs(res))) if m else 0.0})


def solve_neumann_linearized(
    p0: float,
    rho: float,
    data,
    h: float,
    config: SolveConfig | None = None,
    P: ExponentField | None = None,
    n: int = 2,
) -> GridFunction:
    """``L_{p0} u = Delta u + (p0-2) u_nn = 0`` on ``[-rho, rho]^(n-1) x [0, rho]`` with ``u_n = 0`` on ``x_n = 0``.

    ``data`` is a vectorized callable supplying the Dirichlet trace on the
    remaining faces of the ``n``-dimensional half box.
    When ``P`` is given, ``p0`` must lie in ``[P.p_min, P.p_max]``.
    """
    config = config or SolveConfig()
    if rho <= 0:
        raise DomainError("rho must be positive")
    if p0 <= 1:
        raise DomainError("p0 must exceed 1")
    if P is not None and not (P.p_min <= p0 <= P.p_max):
        raise DomainError(f"p0={p0} outside [{P.p_min}, {P.p_max}]")
    if n < 1:
        raise DomainError("dimension must be at least 1")
    lower = [-rho] * (n - 1) + [0.0]
    upper = [rho] * n
    out = solve_linearized_box(p0, lower, upper, h, data, neumann_bottom=True)
    scale = max(1.0, out.max_abs()) / h**2
    if out.meta["residual"] > max(config.tol, 1e-10) * scale:
        raise NonConvergenceError("linear solve inaccurate", out.meta["residual"], 1, out)
    return out


def quadratic_remainder(u: GridFunction, radii=(1 / 16, 1 / 8, 1 / 4)) -> dict:
    """``max |u(x) - u(0) - grad u(0).x| / r^2`` over grid nodes of the half ball ``B_r``.

    The gradient at the origin uses central differences tangentially and the
    second-order one-sided difference in ``x_n``.
    """
    o = u.nearest_index(np.zeros(u.dim))
    if np.linalg.norm(u.point(o)) > 1e-12:
        raise DomainError("origin is not a grid node")
    g = np.empty(u.dim)
    for d, hd in enumerate(u.spacing):
        a, b, c = list(o), list(o), list(o)
        if d == u.dim - 1 and o[d] == 0:
            b[d] += 1
            c[d] += 2
            g[d] = (-3 * u.values[tuple(a)] + 4 * u.values[tuple(b)] - u.values[tuple(c)]) / (2 * hd)
        else:
            a[d] -= 1
            b[d] += 1
            g[d] = (u.values[tuple(b)] - u.values[tuple(a)]) / (2 * hd)
    pts = u.points()
    rem = np.abs(u.values - u.values[o] - pts @ g)
    dist = np.linalg.norm(pts, axis=-1)
    out = {}
    for r in radii:
        mask = dist <= r + 1e-12
        out[float(r)] = float(rem[mask].max() / r**2)
    return out


# -- discrete energy -----------------------------------------------------------


def jump_weight(Q: GridFunction, P: ExponentField, mode: str = "normalized") -> np.ndarray:
    """Nodal weight of ``chi{v > 0}``.

    ``"normalized"`` uses ``(p-1)/p Q^p`` so that minimizers satisfy
    ``|grad u| = Q`` on the free boundary; ``"literal"`` uses ``Q^2``.
    """
    q = Q.values
    if mode == "literal":
        return q**2
    p = P(Q.points())
    return (p - 1) / p * q**p


@dataclass
class EnergyProblem:
    """Data of ``sum_cells |grad v|^p/p + sum_nodes w (lam chi{v>0} + f v)``.

    Attributes:
        P: exponent.
        f: right-hand side.
        Q: free boundary datum, ``Q >= 0``.
        boundary: values imposed on fixed nodes (and the starting guess elsewhere).
        fixed: optional mask of Dirichlet nodes (defaults to the box boundary).
        nonnegative: restrict to ``v >= 0``; ``None`` means "when the boundary data is nonnegative".
    """

    P: ExponentField
    f: GridFunction
    Q: GridFunction
    boundary: GridFunction
    fixed: np.ndarray | None = None
    nonnegative: bool | None = None

    def __post_init__(self):
        self.f.require_same_grid(self.Q, self.boundary)
        if np.any(self.Q.values < 0):
            raise DomainError("Q must be nonnegative")
        if self.fixed is None:
            self.fixed = self.f.boundary_mask()
        self.fixed = np.asarray(self.fixed, dtype=bool) | self.f.boundary_mask()
        if self.nonnegative is None:
            self.nonnegative = bool(np.all(self.boundary.values[self.fixed] >= 0))

    @property
    def free(self) -> np.ndarray:
        return ~self.fixed


def _corner_index(n):
    return list(itertools.product((0, 1), repeat=n))


def _cell_energy(V, p, h, vol, delta):
    """Energy of cells from their ``2^n`` corner values ``V[..., a]`` (complex-safe)."""
    n = len(h)
    total = 0.0
    for a in range(2**n):
        m2 = delta**2
        for i in range(n):
            bit = 1 << (n - 1 - i)
            G = (V[..., a | bit] - V[..., a & ~bit]) / h[i]
            m2 = m2 + G * G
        total = total + m2 ** (p / 2) / p
    return total * vol


class _CornerScheme:
    """Corner-gradient discretization of ``sum_cells |grad v|^p / p``."""

    def __init__(self, grid: GridFunction, P: ExponentField, delta: float):
        self.n = grid.dim
        self.shape = grid.shape
        self.cshape = tuple(s - 1 for s in grid.shape)
        self.h = grid.spacing
        self.vol = float(np.prod(self.h)) / 2**self.n
        self.delta = delta
        _, centers = cell_centers(grid)
        self.p = P(centers)
        self.corners = _corner_index(self.n)
        flat = np.arange(int(np.prod(self.shape))).reshape(self.shape)
        self.corner_flat = np.stack([flat[self._sl(k)] for k in self.corners])

    def _sl(self, k):
        return tuple(slice(ki, ki + cs) for ki, cs in zip(k, self.cshape))

    def gather(self, u):
        return np.stack([u[self._sl(k)] for k in self.corners], axis=-1)

    def energy(self, u) -> float:
        return float(np.sum(_cell_energy(self.gather(u), self.p, self.h, self.vol, self.delta)))

    def _corner_data(self, u):
        n = self.n
        for a, k in enumerate(self.corners):
            G = []
            for i in range(n):
                bit = 1 << (n - 1 - i)
                k1 = list(k)
                k0 = list(k)
                k1[i], k0[i] = 1, 0
                G.append((u[self._sl(k1)] - u[self._sl(k0)]) / self.h[i])
            m2 = self.delta**2 + sum(g * g for g in G)
            yield a, k, G, m2

    def gradient(self, u) -> np.ndarray:
        out = np.zeros(self.shape)
        for _, k, G, m2 in self._corner_data(u):
            coef = m2 ** ((self.p - 2) / 2) * self.vol
            for i in range(self.n):
                k1 = list(k)
                k0 = list(k)
                k1[i], k0[i] = 1, 0
                flux = coef * G[i] / self.h[i]
                out[self._sl(k1)] += flux
                out[self._sl(k0)] -= flux
        return out

    def hessian(self, u) -> sp.csr_matrix:
        n, N = self.n, 2**self.n
        K = np.zeros((N, N) + self.cshape)
        for a, k, G, m2 in self._corner_data(u):
            coef = m2 ** ((self.p - 2) / 2) * self.vol
            for i in range(n):
                bi = 1 << (n - 1 - i)
                ai1, ai0 = a | bi, a & ~bi
                for j in range(n):
                    bj = 1 << (n - 1 - j)
                    aj1, aj0 = a | bj, a & ~bj
                    A = coef * ((i == j) + (self.p - 2) * G[i] * G[j] / m2) / (self.h[i] * self.h[j])
                    K[ai1, aj1] += A
                    K[ai1, aj0] -= A
                    K[ai0, aj1] -= A
                    K[ai0, aj0] += A
        rows = np.broadcast_to(self.corner_flat[:, None], K.shape).ravel()
        cols = np.broadcast_to(self.corner_flat[None, :], K.shape).ravel()
        size = int(np.prod(self.shape))
        return sp.csr_matrix((K.ravel(), (rows, cols)), shape=(size, size))


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3 - 2 * s)


def _smoothstep_d(s):
    inside = (s > 0) & (s < 1)
    return np.where(inside, 6 * s * (1 - s), 0.0)


def _smoothstep_dd(s):
    inside = (s > 0) & (s < 1)
    return np.where(inside, 6 - 12 * s, 0.0)


class _Energy:
    def __init__(self, problem: EnergyProblem, config: SolveConfig):
        grid = problem.f
        self.grid = grid
        self.scheme = _CornerScheme(grid, problem.P, config.delta)
        self.w = grid.node_volumes()
        self.lam = jump_weight(problem.Q, problem.P, config.jump)
        self.f = problem.f.values
        self.free = problem.free
        self.nonneg = problem.nonnegative

    def exact(self, u) -> float:
        return self.scheme.energy(u) + float(np.sum(self.w * (self.lam * (u > 0) + self.f * u)))

    def smoothed(self, u, eps) -> float:
        """``eps=None``: no jump term; ``eps=0``: sharp jump; otherwise smoothstep of width ``eps``."""
        if eps is None:
            jump = 0.0
        else:
            jump = _smoothstep(u / eps) if eps else (u > 0)
        return self.scheme.energy(u) + float(np.sum(self.w * (self.lam * jump + self.f * u)))

    def smoothed_grad(self, u, eps):
        g = self.scheme.gradient(u) + self.w * self.f
        if eps:
            g = g + self.w * self.lam * _smoothstep_d(u / eps) / eps
        return g

    def smoothed_hess_diag(self, u, eps, convexify=True):
        if not eps:
            return np.zeros(u.shape)
        d = self.w * self.lam * _smoothstep_dd(u / eps) / eps**2
        return np.maximum(d, 0.0) if convexify else d


def _projected_newton(E: _Energy, u, eps, active_free, lower, max_iter, gtol, ftol=1e-15):
    """Minimize the (smoothed) energy over ``active_free`` nodes subject to ``u >= lower``.

    Newton directions use the exact Hessian when it yields descent and the
    convexified one (negative jump curvature dropped) otherwise; steps are
    projected onto the bound and accepted by an Armijo test.
    """
    fun = lambda v: E.smoothed(v, eps)  # noqa: E731
    val = fun(u)
    idx = np.flatnonzero(active_free.ravel())
    if idx.size == 0:
        return u, val
    wscale = E.w.ravel()[idx]
    for _ in range(max_iter):
        g = E.smoothed_grad(u, eps).ravel()[idx]
        uf = u.ravel()[idx]
        at_bound = (uf <= lower) & (g > 0)
        pg = np.where(at_bound, 0.0, g)
        if np.max(np.abs(pg) / wscale) < gtol:
            break
        work = idx[~at_bound]
        Hg = E.scheme.hessian(u)[work][:, work]
        reg = 1e-12 * E.w.ravel()[work]
        d = np.zeros(idx.size)
        step = None
        for convexify in (False, True):
            diag = E.smoothed_hess_diag(u, eps, convexify).ravel()[work]
            try:
                cand = _sparse_solve(Hg + sp.diags(diag + reg), -g[~at_bound], symmetric=True)
            except RuntimeError:
                continue
            if np.all(np.isfinite(cand)) and float(cand @ g[~at_bound]) < 0:
                step = cand
                break
        if step is None:
            step = -g[~at_bound] / wscale[~at_bound]
        d[~at_bound] = step
        t = 1.0
        while True:
            trial = u.copy().ravel()
            trial[idx] = np.maximum(uf + t * d, lower)
            trial = trial.reshape(u.shape)
            tv = fun(trial)
            decrease = float(g @ (trial.ravel()[idx] - uf))
            if tv <= val + 1e-4 * decrease or t < 1e-10:
                break
            t *= 0.5
        if tv > val:
            break
        gain = val - tv
        u, val = trial, tv
        if gain <= ftol * max(1.0, abs(val)):
            break
    return u, val


def _local_sweep(E: _Energy, u, color_mask, lower):
    """Exact minimization of the energy restricted to each node of one color.

    Nodes of one color share no cell, so their one-dimensional problems are
    independent.  Each restriction is convex on either side of 0; the jump is
    resolved by comparing the best positive and best nonpositive values.
    """
    sc = E.scheme
    n = sc.n
    nodes = np.argwhere(color_mask)
    if len(nodes) == 0:
        return u, 0
    m = len(nodes)
    N = 2**n
    V = np.empty((m, N, N))
    pc = np.empty((m, N))
    for j, kj in enumerate(sc.corners):
        q = nodes - np.array(kj)
        for a, ka in enumerate(sc.corners):
            V[:, j, a] = u[tuple((q + np.array(ka)).T)]
        pc[:, j] = sc.p[tuple(q.T)]
    tn = tuple(nodes.T)
    w, lam, f = E.w[tn], E.lam[tn], E.f[tn]
    diag = np.arange(N)

    def S(s):
        W = V.astype(np.result_type(s, float)).copy()
        W[:, diag, diag] = s[:, None]
        return np.sum(_cell_energy(W, pc, sc.h, sc.vol, sc.delta), axis=1) + w * f * s

    step = 1e-30

    def dS(s):
        return S(s + 1j * step).imag / step

    def argmin_on(side):
        # minimize the convex S over s >= 0 (side=+1) or s <= 0 (side=-1)
        d0 = dS(np.zeros(m)) * side
        lo = np.zeros(m)
        hi = np.maximum(np.abs(u[tn]), 1e-3) * np.ones(m)
        need = d0 < 0
        for _ in range(200):
            bad = need & (dS(side * hi) * side < 0)
            if not np.any(bad):
                break
            lo = np.where(bad, hi, lo)
            hi = np.where(bad, 2 * hi, hi)
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            go_right = dS(side * mid) * side < 0
            lo = np.where(go_right, mid, lo)
            hi = np.where(go_right, hi, mid)
            if np.all(hi - lo <= 1e-15 * np.maximum(1.0, hi)):
                break
        return np.where(need, side * 0.5 * (lo + hi), 0.0)

    s_pos = argmin_on(+1)
    val_pos = S(s_pos) + w * lam * (s_pos > 0)
    if lower == 0.0:
        s_neg = np.zeros(m)
    else:
        s_neg = argmin_on(-1)
    val_neg = S(s_neg)
    choose_pos = val_pos < val_neg
    new = np.where(choose_pos, s_pos, s_neg)
    old = u[tn]
    cur = S(old) + w * lam * (old > 0)
    best = np.minimum(val_pos, val_neg)
    # keep the old value unless the restricted energy strictly improves
    take = best < cur
    new = np.where(take, new, old)
    flips = int(np.sum((new > 0) != (old > 0)))
    u = u.copy()
    u[tn] = new
    return u, flips


def _front_move(E: _Energy, u, energy, free, lower, config, gtol):
    """Try moving the whole free boundary by one lattice layer in or out.

    Pointwise updates cannot move a front whose single-node moves all raise
    the energy; a layer move followed by a fixed-phase solve can.  Returns
    the improved state or ``None``.
    """
    pos = u > 0
    near = np.zeros_like(pos)
    for d in range(u.ndim):
        for step in (-1, 1):
            near |= np.roll(pos, step, axis=d) & ~_wrap_mask(u.shape, d, step)
    grow = free & ~pos & near
    zero = ~pos
    near_zero = np.zeros_like(pos)
    for d in range(u.ndim):
        for step in (-1, 1):
            near_zero |= np.roll(zero, step, axis=d) & ~_wrap_mask(u.shape, d, step)
    peel = free & pos & near_zero
    for band, fill in ((peel, 0.0), (grow, None)):
        if not np.any(band):
            continue
        trial = u.copy()
        if fill is None:
            tiny = 1e-3 * float(np.max(u)) if np.any(pos) else 1e-3
            trial[band] = tiny
        else:
            trial[band] = fill
        phase_free = free & (trial > 0)
        trial, _ = _projected_newton(E, trial, 0.0, phase_free, lower, config.max_iter, gtol)
        val = E.exact(trial)
        if val < energy - config.energy_tol * max(1.0, abs(energy)):
            return trial, val
    return None


def _wrap_mask(shape, axis, step):
    """Entries that ``np.roll`` filled from the opposite end."""
    m = np.zeros(shape, dtype=bool)
    sl = [slice(None)] * len(shape)
    sl[axis] = 0 if step == 1 else -1
    m[tuple(sl)] = True
    return m


def discrete_energy(u: GridFunction, problem: EnergyProblem, config: SolveConfig | None = None) -> float:
    """Exact discrete energy (with the sharp jump term) of a grid function."""
    config = config or SolveConfig()
    u.require_same_grid(problem.f)
    return _Energy(problem, config).exact(u.values)


def minimize_energy(problem: EnergyProblem, config: SolveConfig | None = None) -> GridFunction:
    """Critical point of the discrete one-phase energy.

    Stage 1 follows minimizers of the energy with ``chi{v>0}`` replaced by the
    smoothstep ``B(v/eps)`` while ``eps`` shrinks geometrically to a couple of
    cells.  Stage 2 alternates a Newton solve on the fixed positive phase with
    colored pointwise sweeps that resolve the sharp jump exactly.  Stage 2
    energies are nonincreasing; they are recorded in ``meta["history"]`` as
    ``(sweep, max change, energy)``.
    """
    config = config or SolveConfig()
    E = _Energy(problem, config)
    grid = problem.f
    lower = 0.0 if problem.nonnegative else -np.inf
    free = problem.free
    u = problem.boundary.values.copy()
    if problem.nonnegative:
        u[free] = np.maximum(u[free], 0.0)
    gtol = 1e-10

    # stage 1: continuation in the smoothing width
    qmax = float(np.max(problem.Q.values)) if problem.Q.values.size else 0.0
    scale_u = max(float(np.max(np.abs(problem.boundary.values))), 1e-12)
    eps_final = config.eps_final_cells * grid.h * max(qmax, 1e-12)
    schedule = []
    if np.any(E.lam > 0):
        eps = max(scale_u, eps_final)
        while True:
            schedule.append(eps)
            if eps <= eps_final:
                break
            eps = max(eps * config.eps_factor, eps_final)
    # solve with no jump first (pure Dirichlet energy), then follow the schedule
    u, _ = _projected_newton(E, u, None, free, lower, config.max_iter, gtol)
    for eps in schedule:
        u, _ = _projected_newton(E, u, eps, free, lower, config.max_iter, gtol)

    # stage 2: exact jump
    colors = np.zeros(grid.shape, dtype=int)
    for d, ix in enumerate(np.indices(grid.shape)):
        colors = colors * 2 + ix % 2
    history = []
    energy = E.exact(u)
    history.append((0, math.nan, energy))
    converged = False
    for sweep in range(1, config.max_sweeps + 1):
        before = u
        # pointwise sweeps settle the phases (and cut the tail left by the smoothing) ...
        flips = 0
        for c in range(2**grid.dim):
            u, fl = _local_sweep(E, u, free & (colors == c), lower)
            flips += fl
        # ... then a smooth solve on the current phases (zero set frozen)
        phase_free = free & (u > 0) if problem.nonnegative else free & (u != 0)
        u, _ = _projected_newton(E, u, 0.0, phase_free, lower, config.max_iter, gtol)
        new_energy = E.exact(u)
        change = float(np.max(np.abs(u - before)))
        if new_energy > energy + 1e-12 * max(1.0, abs(energy)):
            raise NonConvergenceError(f"energy increased in sweep {sweep}", change, sweep, grid.with_values(u))
        decrease = energy - new_energy
        energy = new_energy
        history.append((sweep, change, energy))
        if flips == 0 and decrease <= config.energy_tol * max(1.0, abs(energy)):
            moved = _front_move(E, u, energy, free, lower, config, gtol) if problem.nonnegative else None
            if moved is None:
                converged = True
                break
            u, energy = moved
            history.append((sweep, float(np.max(np.abs(u - before))), energy))
    if not converged:
        raise NonConvergenceError("energy sweeps did not settle", history[-1][1], config.max_sweeps, grid.with_values(u))
    meta = {
        "energy": energy,
        "sweeps": len(history) - 1,
        "delta": config.delta,
        "jump": config.jump,
        "eps_schedule": schedule,
        "history": history,
    }
    return grid.with_values(u, name="u", meta=meta)


# -- 1D interface diagnostics --------------------------------------------------


def interface_position_1d(u: GridFunction) -> float:
    """First zero crossing to the right of the positive phase (linear interpolation)."""
    if u.dim != 1:
        raise GridMismatchError("interface_position_1d needs a 1D grid function")
    x = u.axes()[0]
    v = u.values
    pos = np.flatnonzero(v > 0)
    if pos.size == 0:
        return float(x[0])
    k = int(pos.max())
    if k == len(v) - 1:
        return float(x[-1])
    t = v[k] / (v[k] - v[k + 1])
    return float(x[k] + t * (x[k + 1] - x[k]))


def interface_slope_1d(u: GridFunction, width: float | None = None) -> float:
    """Least-squares slope magnitude of ``u`` on positive nodes within ``width`` of the interface.

    The zero crossing itself is included as a data point.
    """
    x = u.axes()[0]
    xs = interface_position_1d(u)
    width = 8 * u.h if width is None else width
    sel = (u.values > 0) & (x >= xs - width - 1e-12)
    xx = np.concatenate([x[sel], [xs]])
    yy = np.concatenate([u.values[sel], [0.0]])
    slope = np.polyfit(xx, yy, 1)[0]
    return float(abs(slope))


def history_csv(history) -> str:
    """Convergence history as CSV with columns ``iteration,residual,energy``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "residual", "energy"])
    for it, res, en in history:
        w.writerow([int(it), repr(float(res)), repr(float(en))])
    return buf.getvalue()

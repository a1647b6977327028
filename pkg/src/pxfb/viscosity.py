"""Discrete touching tests for viscosity sub/supersolutions.

A quadratic ``phi`` touches a grid function ``u`` from below at a node when,
after the minimal vertical shift, ``u - phi >= 0`` on the neighbourhood with
equality at that node.  The checks below evaluate the relevant inequality at
the contact node.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .barriers import _as_field
from .errors import (
    DomainError,
    GradientDegenerateError,
    NoTouchError,
    NotOnFreeBoundaryError,
    PreconditionError,
)
from .exponent import ExponentField
from .grid import GridFunction, extract_positive_phase
from .operators import GRADIENT_FLOOR, SmoothFunction, p_laplacian_from_jet

__all__ = [
    "TOUCH_TOL",
    "TestPolynomial",
    "TouchingVerdict",
    "find_touch",
    "interior_viscosity_check",
    "fb_condition_check",
    "ComparisonReport",
    "comparison_principle_check",
    "neumann_viscosity_check",
    "discrete_taylor",
    "BatteryReport",
    "viscosity_battery",
]

TOUCH_TOL = 1e-12
SIDES = ("below", "above")


@dataclass
class TestPolynomial:
    """``P(x) = value + gradient.(x - center) + (x - center)^T hessian (x - center) / 2``."""

    __test__ = False  # not a pytest class

    center: np.ndarray
    value: float
    gradient: np.ndarray
    hessian: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.gradient = np.asarray(self.gradient, dtype=float)
        self.hessian = np.asarray(self.hessian, dtype=float)
        n = len(self.center)
        if self.gradient.shape != (n,) or self.hessian.shape != (n, n):
            raise DomainError("gradient/Hessian shapes do not match the center")
        if not np.allclose(self.hessian, self.hessian.T, rtol=0, atol=1e-14):
            raise DomainError("Hessian must be symmetric")
        self.value = float(self.value)

    def __call__(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return self.value + d @ self.gradient + 0.5 * np.einsum("...i,ij,...j->...", d, self.hessian, d)

    def grad_at(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return self.gradient + d @ self.hessian.T

    def hess_at(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.hessian, x.shape[:-1] + self.hessian.shape)

    def as_smooth(self) -> SmoothFunction:
        return SmoothFunction(self.__call__, self.grad_at, self.hess_at)

    def shifted(self, c: float) -> "TestPolynomial":
        return TestPolynomial(self.center, self.value + c, self.gradient, self.hessian)

    def scaled(self, t: float) -> "TestPolynomial":
        return TestPolynomial(self.center, t * self.value, t * self.gradient, t * self.hessian)

    def __neg__(self):
        return self.scaled(-1.0)


@dataclass
class TouchingVerdict:
    """Result of a touching test.

    ``gap`` is the minimum over the neighbourhood of ``u - phi`` (below) or
    ``phi - u`` (above) after the shift; ``value`` is the tested quantity
    (e.g. ``Delta_{p(x)} phi - f``) and ``passed`` the verdict.
    """

    point: list
    index: list
    side: str
    gap: float
    shift: float
    value: float = math.nan
    passed: bool = True
    tolerance: float = 0.0
    kind: str = "touch"
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _neighbourhood(u: GridFunction, center, radius, flat_bottom: bool = False):
    """Neighbourhood mask and its edge: nodes with a lattice neighbour outside it.

    With ``flat_bottom`` the lower face of the last axis belongs to the
    domain boundary and its nodes are not edge nodes on that account.
    """
    pts = u.points()
    dist = np.linalg.norm(pts - np.asarray(center, dtype=float), axis=-1)
    nb = dist <= radius + 1e-12 * max(1.0, radius)
    edge = np.zeros_like(nb)
    last = u.dim - 1
    for d in range(u.dim):
        for step in (-1, 1):
            # neighbour of node i in direction -step is node i - step
            shifted = np.roll(nb, step, axis=d)
            wrap = [slice(None)] * u.dim
            wrap[d] = 0 if step == 1 else -1
            shifted[tuple(wrap)] = flat_bottom and d == last and step == 1
            edge |= nb & ~shifted
    return pts, dist, nb, edge


def find_touch(
    u: GridFunction, phi: TestPolynomial, side: str, radius: float, center=None, flat_bottom: bool = False
) -> TouchingVerdict:
    """Minimal vertical shift making ``phi`` touch ``u`` on the ``radius`` neighbourhood.

    Ties among near-contact nodes go to the node closest to ``center``, then
    to the lexicographically smallest index.

    Raises:
        NoTouchError: the contact node lies on the boundary of the neighbourhood.
    """
    if side not in SIDES:
        raise DomainError(f"side must be one of {SIDES}")
    if radius < 2 * u.h - 1e-12:
        raise DomainError("neighbourhood radius must be at least 2h")
    center = phi.center if center is None else np.asarray(center, dtype=float)
    pts, dist, nb, edge = _neighbourhood(u, center, radius, flat_bottom)
    d = u.values - phi(pts)
    if side == "above":
        d = -d
    dn = d[nb]
    shift = float(dn.min())
    near = np.argwhere(nb & (d - shift <= TOUCH_TOL))
    order = np.lexsort(tuple(near.T[::-1]) + (dist[tuple(near.T)],))
    idx = tuple(int(i) for i in near[order[0]])
    gap = float((dn - shift).min())
    verdict = TouchingVerdict(
        point=[float(c) for c in pts[idx]],
        index=list(idx),
        side=side,
        gap=gap,
        shift=shift if side == "below" else -shift,
    )
    if edge[idx]:
        raise NoTouchError(f"contact at {verdict.point} is on the neighbourhood boundary")
    return verdict


def _default_radius(u: GridFunction, radius):
    return 3 * u.h if radius is None else radius


def interior_viscosity_check(
    u: GridFunction,
    P: ExponentField,
    f,
    phi: TestPolynomial,
    x0,
    side: str,
    radius: float | None = None,
    tol: float = 1e-8,
    floor: float = GRADIENT_FLOOR,
) -> TouchingVerdict:
    """Viscosity inequality at an interior point of the positive phase.

    With ``phi`` touching from above the requirement is
    ``Delta_{p(x)} phi >= f`` at the contact node, from below ``<= f``;
    ``tol`` is the allowed violation.
    """
    i0 = u.nearest_index(x0)
    if not u.values[i0] > 0:
        raise PreconditionError("x0 is not in the positive phase")
    v = find_touch(u, phi, side, _default_radius(u, radius), center=x0)
    y = np.asarray(v.point)
    grad = phi.grad_at(y)
    lap = float(p_laplacian_from_jet(grad, phi.hessian, float(P(y)), P.gradient(y), floor))
    val = lap - float(_as_field(f)(y[None])[0])
    v.value = val
    v.tolerance = tol
    v.kind = "interior"
    v.passed = bool(val >= -tol) if side == "above" else bool(val <= tol)
    return v


def fb_condition_check(
    u: GridFunction,
    g,
    phi: TestPolynomial,
    x0,
    side: str,
    tol: float = 1e-8,
    radius: float | None = None,
    floor: float = GRADIENT_FLOOR,
) -> TouchingVerdict:
    """Free boundary condition ``|grad phi(x0)| <= g(x0)`` (below) or ``>= g(x0)`` (above).

    The gap of ``phi^+`` against ``u`` on the neighbourhood is reported but
    does not enter the verdict.

    Raises:
        NotOnFreeBoundaryError: ``x0`` is farther than ``h`` from the extracted free boundary.
    """
    if side not in SIDES:
        raise DomainError(f"side must be one of {SIDES}")
    x0 = np.asarray(x0, dtype=float)
    phase = extract_positive_phase(u)
    if phase.distance_to(x0) > u.h * (1 + 1e-9):
        raise NotOnFreeBoundaryError(f"{x0.tolist()} is not within h of the free boundary")
    grad = phi.grad_at(x0)
    s = float(np.linalg.norm(grad))
    if s < floor:
        raise GradientDegenerateError("test function gradient vanishes at x0")
    gv = float(_as_field(g)(x0[None])[0])
    pts, _, nb, _ = _neighbourhood(u, x0, _default_radius(u, radius))
    diff = u.values - np.maximum(phi(pts), 0.0)
    if side == "above":
        diff = -diff
    val = s - gv
    return TouchingVerdict(
        point=[float(c) for c in x0],
        index=list(u.nearest_index(x0)),
        side=side,
        gap=float(diff[nb].min()),
        shift=0.0,
        value=val,
        passed=bool(val <= tol) if side == "below" else bool(val >= -tol),
        tolerance=tol,
        kind="free_boundary",
    )


@dataclass
class ComparisonReport:
    """Strict separation of a solution from a strict subsolution."""

    passed: bool
    min_gap: float
    worst_point: list
    nodes: int
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def comparison_principle_check(u: GridFunction, v, region=None, verdict=None) -> ComparisonReport:
    """If ``u >= v^+`` then ``u > v`` on the positive phase of ``v`` and its free boundary band.

    ``v`` is a grid function on the same lattice or a callable sampled on it.
    ``region`` optionally restricts the nodes.  A ``verdict`` from
    :func:`classify_comparison` other than ``strict_sub`` is rejected.

    Raises:
        PreconditionError: ``u >= v^+`` fails or ``v`` is not a strict subsolution.
    """
    if verdict is not None and getattr(verdict, "verdict", verdict) != "strict_sub":
        raise PreconditionError("v is not classified as a strict subsolution")
    if isinstance(v, GridFunction):
        u.require_same_grid(v)
        vv = v.values
    elif isinstance(v, SmoothFunction) or callable(v):
        vv = np.asarray(v(u.points()), dtype=float)
    else:
        raise DomainError("v must be a grid function or a callable")
    mask = np.ones(u.shape, dtype=bool) if region is None else np.asarray(region, dtype=bool)
    bad = mask & (u.values < np.maximum(vv, 0.0) - TOUCH_TOL)
    if np.any(bad):
        raise PreconditionError(f"u >= v^+ fails at {int(bad.sum())} node(s)")
    phase = extract_positive_phase(u.with_values(vv, name="v"))
    check = mask & (phase.mask | phase.band_mask())
    if not np.any(check):
        return ComparisonReport(True, math.inf, [], 0, "empty positive phase: vacuous")
    gap = u.values - vv
    gm = np.where(check, gap, np.inf)
    idx = np.unravel_index(int(np.argmin(gm)), gm.shape)
    min_gap = float(gm[idx])
    passed = min_gap > 0
    note = "" if passed else "u touches v on its closure: the pair is inconsistent with u being a solution"
    return ComparisonReport(passed, min_gap, [float(c) for c in u.point(idx)], int(check.sum()), note)


def neumann_viscosity_check(
    u: GridFunction,
    p0: float,
    P: TestPolynomial,
    x_bar,
    side: str,
    radius: float | None = None,
    tol: float = 1e-8,
    restrict: bool = False,
) -> TouchingVerdict:
    """Viscosity test for ``L_{p0} u = 0`` in ``{x_n > 0}``, ``u_n = 0`` on ``{x_n = 0}``.

    At an interior contact ``L_{p0} P <= 0`` (below) or ``>= 0`` (above); on
    the flat boundary ``P_n <= 0`` (below) or ``>= 0`` (above).  With
    ``restrict`` the boundary condition is only tested for polynomials with
    ``L_{p0} P > 0`` (below) or ``< 0`` (above); others pass as exempt.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    if x_bar[-1] < -1e-12:
        raise DomainError("x_bar must lie in the closed upper half space")
    v = find_touch(u, P, side, _default_radius(u, radius), center=x_bar, flat_bottom=True)
    y = np.asarray(v.point)
    H = P.hessian
    L = float(np.trace(H) + (p0 - 2) * H[-1, -1])
    v.tolerance = tol
    if y[-1] > 1e-12:
        v.kind = "neumann_interior"
        v.value = L
        v.passed = bool(L <= tol) if side == "below" else bool(L >= -tol)
        return v
    v.kind = "neumann_boundary"
    Pn = float(P.grad_at(y)[-1])
    v.value = Pn
    if restrict and ((side == "below" and not L > 0) or (side == "above" and not L < 0)):
        v.passed = True
        v.note = "exempt: only polynomials with the strict sign of L_p0 P need testing"
        return v
    v.passed = bool(Pn <= tol) if side == "below" else bool(Pn >= -tol)
    return v


# -- batteries -----------------------------------------------------------------


def discrete_taylor(u: GridFunction, index) -> tuple[float, np.ndarray, np.ndarray]:
    """Value, central-difference gradient and Hessian at an interior node."""
    idx = np.array(index)
    n = u.dim
    h = u.spacing
    val = float(u.values[tuple(idx)])

    def at(off):
        return float(u.values[tuple(idx + off)])

    g = np.empty(n)
    H = np.empty((n, n))
    for i in range(n):
        ei = np.eye(n, dtype=int)[i]
        g[i] = (at(ei) - at(-ei)) / (2 * h[i])
        H[i, i] = (at(ei) - 2 * val + at(-ei)) / h[i] ** 2
        for j in range(i + 1, n):
            ej = np.eye(n, dtype=int)[j]
            H[i, j] = H[j, i] = (at(ei + ej) - at(ei - ej) - at(ej - ei) + at(-ei - ej)) / (4 * h[i] * h[j])
    return val, g, H


@dataclass
class BatteryReport:
    """Aggregate of a randomized touching battery."""

    passed: int = 0
    failed: int = 0
    exempt: int = 0
    max_violation: float = -math.inf
    tolerance: float = 0.0
    verdicts: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.passed + self.failed + self.exempt

    def summary(self) -> dict:
        return {
            "passed": self.passed,
            "failed": self.failed,
            "exempt": self.exempt,
            "max_violation": self.max_violation,
            "tolerance": self.tolerance,
        }

    def to_json(self) -> str:
        return json.dumps(self.verdicts, sort_keys=True, separators=(",", ":"))


def _random_spd(rng, n, lo=0.5, hi=5.0):
    Qm, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Qm * rng.uniform(lo, hi, n)) @ Qm.T


def viscosity_battery(
    u: GridFunction,
    P: ExponentField,
    f,
    count: int = 1000,
    seed: int = 0,
    c_tol: float = 10.0,
    radius_cells: float = 3.0,
    region=None,
    min_grad: float = 0.1,
    max_hessian: float = 10.0,
    max_draws: int | None = None,
) -> BatteryReport:
    """Random touching quadratics against a discrete solution.

    Each test picks a random node ``x0`` of ``region`` (interior and inside the
    positive phase) where the discrete gradient has norm at least ``min_grad``,
    and builds ``phi`` from the discrete Taylor data of ``u`` at ``x0`` with a
    random positive definite matrix subtracted (touching from below) or added
    (from above).  The violation tolerance is ``c_tol * h``; touches that do
    not localize count as exempt.
    """
    rng = np.random.default_rng(seed)
    h = u.h
    radius = radius_cells * h
    tol = c_tol * h
    pts = u.points()
    margin = np.ones(u.shape, dtype=bool)
    for d in range(u.dim):
        ax = pts[..., d]
        margin &= (ax >= u.lower[d] + radius + 1.5 * h) & (ax <= u.upper[d] - radius - 1.5 * h)
    ok = margin & (u.values > 0)
    if region is not None:
        ok &= np.asarray(region(pts) if callable(region) else region, dtype=bool)
    candidates = np.argwhere(ok)
    if len(candidates) == 0:
        raise PreconditionError("no admissible nodes for the battery")
    report = BatteryReport(tolerance=tol)
    draws = 0
    max_draws = max_draws or 50 * count
    while report.total < count and draws < max_draws:
        draws += 1
        idx = tuple(int(i) for i in candidates[rng.integers(len(candidates))])
        side = SIDES[int(rng.integers(2))]
        val, g, H = discrete_taylor(u, idx)
        if np.linalg.norm(g) < min_grad:
            continue
        S = _random_spd(rng, u.dim)
        Hphi = H - S if side == "below" else H + S
        if np.max(np.abs(np.linalg.eigvalsh(Hphi))) > max_hessian:
            continue
        x0 = u.point(idx)
        phi = TestPolynomial(x0, val, g, Hphi)
        try:
            v = interior_viscosity_check(u, P, f, phi, x0, side, radius=radius, tol=tol)
        except NoTouchError:
            report.exempt += 1
            report.verdicts.append({"point": x0.tolist(), "side": side, "status": "exempt"})
            continue
        except GradientDegenerateError:
            continue
        viol = -v.value if side == "above" else v.value
        report.max_violation = max(report.max_violation, float(viol))
        if v.passed:
            report.passed += 1
        else:
            report.failed += 1
        report.verdicts.append(
            {"point": v.point, "side": side, "status": "pass" if v.passed else "fail", "value": v.value}
        )
    return report

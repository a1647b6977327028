"""Slab flatness, Harnack ratios, the dichotomy probe and the blow-up iteration."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    BallOutOfDomainError,
    DomainError,
    InsufficientSamplesError,
    PreconditionError,
    ResolutionExhaustedError,
)
from .exponent import ExponentField
from .grid import GridFunction, extract_positive_phase

__all__ = [
    "CERT_TOL",
    "FlatnessCertificate",
    "IterationTrace",
    "measure_flatness",
    "DirectionSearch",
    "best_direction",
    "HarnackResult",
    "harnack_ratio",
    "DichotomyReport",
    "dichotomy_probe",
    "HolderFit",
    "holder_modulus",
    "flatness_iteration",
    "RescaledBounds",
    "rescaled_data_bounds",
]

CERT_TOL = 1e-12


def _unit(nu, n: int) -> np.ndarray:
    nu = np.asarray(nu, dtype=float)
    if nu.shape != (n,):
        raise DomainError(f"direction must have {n} components")
    if abs(np.linalg.norm(nu) - 1) > 1e-12:
        raise DomainError("direction must be a unit vector")
    return nu


@dataclass
class FlatnessCertificate:
    """``(x.nu + a)^+ <= u(x) <= (x.nu + b)^+`` on the lattice nodes of ``B_r(center)``."""

    center: list
    radius: float
    nu: list
    a: float
    b: float
    k: int = 0

    @property
    def eps(self) -> float:
        return (self.b - self.a) / self.radius

    def verify(self, u: GridFunction, tol: float = CERT_TOL) -> bool:
        """Re-check the slab bound by a direct scan of the ball."""
        mask = u.ball_mask(self.center, self.radius)
        s = u.points()[mask] @ np.asarray(self.nu)
        vals = u.values[mask]
        lower = np.maximum(s + self.a, 0.0) <= vals + tol
        upper = vals <= np.maximum(s + self.b, 0.0) + tol
        return bool(self.a <= self.b and np.all(lower) and np.all(upper))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps"] = self.eps
        return d


def _ball(u: GridFunction, center, r):
    if r <= 0:
        raise DomainError("radius must be positive")
    if not u.contains_ball(center, r):
        raise BallOutOfDomainError(f"B_{r}({list(np.asarray(center, dtype=float))}) is not inside the grid")
    mask = u.ball_mask(center, r)
    pts, vals = u.points()[mask], u.values[mask]
    if np.any(vals < -CERT_TOL):
        raise PreconditionError("u takes negative values in the ball")
    return pts, vals


def _offsets(pts, vals, dirs):
    """Maximal ``a`` and minimal ``b`` for each column of ``dirs``."""
    s = pts @ dirs
    d = vals[:, None] - s
    a = d.min(axis=0)
    pos = vals > 0
    b = d[pos].max(axis=0) if np.any(pos) else a.copy()
    return a, b


def measure_flatness(u: GridFunction, center, r: float, nu, k: int = 0) -> FlatnessCertificate:
    """Tightest slab around direction ``nu`` on the closed ball ``B_r(center)``.

    ``a = min(u - x.nu)`` over all ball nodes (nodes with ``u = 0`` force
    ``x.nu + a <= 0``) and ``b = max(u - x.nu)`` over nodes with ``u > 0``.
    Without positive nodes ``b = a``.
    """
    nu = _unit(nu, u.dim)
    pts, vals = _ball(u, center, r)
    a, b = _offsets(pts, vals, nu[:, None])
    return FlatnessCertificate(
        [float(c) for c in np.asarray(center, dtype=float)], float(r), nu.tolist(), float(a[0]), float(b[0]), k
    )


@dataclass
class DirectionSearch:
    """Local search grid: angular step (degrees), half-width, refinement passes and factor."""

    step_deg: float = 0.25
    span_deg: float = 10.0
    refinements: int = 2
    factor: int = 5

    def __post_init__(self):
        if self.step_deg <= 0 or self.span_deg < 0 or self.refinements < 0 or self.factor < 2:
            raise DomainError("invalid direction search parameters")


def _tangent_basis(nu):
    n = len(nu)
    # complete nu to an orthonormal basis; the sign convention keeps it deterministic
    M = np.linalg.qr(np.column_stack([nu, np.eye(n)]))[0]
    return M[:, 1:n]


def _candidates(seed, step, span):
    n = len(seed)
    if n == 1:
        return seed[:, None]
    m = int(round(span / step))
    ang = np.deg2rad(np.arange(-m, m + 1) * step)
    T = _tangent_basis(seed)
    grids = np.meshgrid(*([ang] * (n - 1)), indexing="ij")
    offs = np.stack([g.ravel() for g in grids], axis=-1)
    t = np.tan(offs)
    dirs = seed[None, :] + t @ T.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    zero = np.all(offs == 0, axis=1)
    dirs[zero] = seed  # the seed itself, bit for bit
    return dirs.T


def best_direction(u: GridFunction, center, r: float, seed, search: DirectionSearch | None = None, k: int = 0):
    """Direction minimizing the slab width over a local grid around ``seed``.

    The grid is refined ``search.refinements`` times around the current best.
    Ties go to the first candidate in grid order.
    """
    search = search or DirectionSearch()
    best = _unit(seed, u.dim)
    pts, vals = _ball(u, center, r)
    step, span = search.step_deg, search.span_deg
    for _ in range(search.refinements + 1):
        dirs = _candidates(best, step, span)
        widths = np.empty(dirs.shape[1])
        chunk = max(1, int(2e7 // max(len(vals), 1)))
        for j in range(0, dirs.shape[1], chunk):
            a, b = _offsets(pts, vals, dirs[:, j : j + chunk])
            widths[j : j + chunk] = b - a
        best = dirs[:, int(np.argmin(widths))].copy()
        span, step = step, step / search.factor
    return best, measure_flatness(u, center, r, best, k)


# -- Harnack -----------------------------------------------------------------


@dataclass
class HarnackResult:
    """``sup v <= C (inf v + R (F + C))`` on ``B_R`` with equality at ``C = constant``."""

    constant: float
    sup: float
    inf: float
    radius: float
    F: float
    rhs_term: float

    def to_dict(self) -> dict:
        return asdict(self)


def harnack_ratio(v: GridFunction, center, R: float, f_sup: float, p_max: float) -> HarnackResult:
    """Empirical constant of the Harnack-type inequality on ``B_R(center)``.

    ``F = f_sup^(1/(p_max - 1))``.  ``C`` is the positive root of
    ``R C^2 + (inf + R F) C - sup = 0`` and is 0 when ``sup = 0``.
    """
    if R <= 0 or p_max <= 1 or f_sup < 0:
        raise DomainError("need R > 0, p_max > 1, f_sup >= 0")
    big = v.ball_mask(center, 4 * R)
    if np.any(v.values[big] < -1e-10):
        raise PreconditionError(f"v is negative on B_4R (min {float(v.values[big].min()):.3e})")
    _, vals = _ball(v, center, R)
    vals = np.maximum(vals, 0.0)
    sup, inf = float(vals.max()), float(vals.min())
    F = f_sup ** (1 / (p_max - 1))
    if sup == 0:
        C = 0.0
    else:
        bq = inf + R * F
        C = 2 * sup / (bq + math.sqrt(bq * bq + 4 * R * sup))
    return HarnackResult(C, sup, inf, float(R), F, R * (F + C))


# -- dichotomy ---------------------------------------------------------------


@dataclass
class DichotomyReport:
    """Branch of the dichotomy at ``x0 = e_n / 10`` and the constants achieved on ``B_{1/2}``.

    ``c_upper`` is the largest ``c`` with ``u >= (q + c eps)^+`` and
    ``c_lower`` the largest with ``u <= (q + (1 - c) eps)^+``; ``c`` is the
    one belonging to ``branch``.
    """

    branch: str
    c: float
    c_upper: float
    c_lower: float
    u_x0: float
    midpoint: float
    sigma: float
    eps: float

    def to_dict(self) -> dict:
        return asdict(self)


def dichotomy_probe(
    u: GridFunction,
    eps: float,
    sigma: float = 0.0,
    P: ExponentField | None = None,
    f=None,
    g=None,
    tol: float = CERT_TOL,
) -> DichotomyReport:
    """Which alternative holds for ``q^+ <= u <= (q + eps)^+``, ``q = x_n + sigma``.

    When ``f``, ``g`` or ``P`` are given their smallness (``|f|``,
    ``|g - 1|`` and ``|grad p|`` at most ``eps^2`` on the unit ball nodes)
    is part of the hypothesis.

    Raises:
        PreconditionError: a hypothesis fails.
    """
    if not 0 < eps < 1:
        raise DomainError("eps must lie in (0, 1)")
    if not abs(sigma) < 1 / 20:
        raise PreconditionError("|sigma| must be below 1/20")
    n = u.dim
    pts, vals = _ball(u, np.zeros(n), 1.0)
    q = pts[:, -1] + sigma
    if np.any(np.maximum(q, 0) > vals + tol) or np.any(vals > np.maximum(q + eps, 0) + tol):
        raise PreconditionError("u is not between q^+ and (q + eps)^+ on B_1")
    lim = eps**2 * (1 + 1e-12)
    if f is not None and np.max(np.abs(_field(f)(pts))) > lim:
        raise PreconditionError("|f| exceeds eps^2")
    if g is not None and np.max(np.abs(_field(g)(pts) - 1)) > lim:
        raise PreconditionError("|g - 1| exceeds eps^2")
    if P is not None and np.max(np.linalg.norm(P.gradient(pts), axis=-1)) > lim:
        raise PreconditionError("|grad p| exceeds eps^2")
    x0 = np.zeros(n)
    x0[-1] = 0.1
    u_x0 = float(u.interpolate(x0[None])[0])
    mid = max(0.1 + sigma + eps / 2, 0.0)
    half = np.linalg.norm(pts, axis=-1) <= 0.5 + CERT_TOL
    ratio = (vals[half] - q[half]) / eps
    c_upper = float(ratio.min())
    pos = vals[half] > 0
    c_lower = float((1 - ratio[pos]).min()) if np.any(pos) else 1.0
    branch = "upper" if u_x0 >= mid else "lower"
    return DichotomyReport(branch, c_upper if branch == "upper" else c_lower, c_upper, c_lower, u_x0, mid, sigma, eps)


def _field(c) -> Callable[[np.ndarray], np.ndarray]:
    if callable(c):
        return lambda x: np.asarray(c(x), dtype=float)
    return lambda x: np.full(np.shape(x)[:-1], float(c))


# -- Hölder modulus ----------------------------------------------------------


@dataclass
class HolderFit:
    """``osc <= C r^gamma`` fitted over dyadic annuli (``gamma`` is NaN when skipped)."""

    constant: float
    gamma: float
    residual: float
    radii: list = field(default_factory=list)
    oscillation: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def holder_modulus(
    ut: GridFunction, x0, eps: float, eps_bar: float, region=None, r_max: float | None = None, min_annuli: int = 3
) -> HolderFit:
    """Dyadic-annulus oscillation of ``ut`` about ``x0`` and its log-log fit.

    Annuli are ``[r_j, 2 r_j)`` with ``r_0 = eps / eps_bar``; the oscillation of
    annulus ``j`` is attributed to its outer radius.  ``region`` restricts the
    samples (e.g. to the closure of the positive phase).

    Raises:
        InsufficientSamplesError: fewer than ``min_annuli`` nonempty annuli.
    """
    if eps <= 0 or eps_bar <= 0:
        raise DomainError("eps and eps_bar must be positive")
    x0 = np.asarray(x0, dtype=float)
    pts = ut.points()
    dist = np.linalg.norm(pts - x0, axis=-1)
    mask = np.isfinite(ut.values)
    if region is not None:
        mask &= np.asarray(region(pts) if callable(region) else region, dtype=bool)
    if r_max is None:
        r_max = float(min(np.min(x0 - np.array(ut.lower)), np.min(np.array(ut.upper) - x0)))
    u0 = float(ut.interpolate(x0[None])[0])
    r = eps / eps_bar
    radii, osc = [], []
    while 2 * r <= r_max * (1 + 1e-12):
        ring = mask & (dist >= r) & (dist < 2 * r)
        if np.any(ring):
            radii.append(2 * r)
            osc.append(float(np.max(np.abs(ut.values[ring] - u0))))
        r *= 2
    if len(radii) < min_annuli:
        raise InsufficientSamplesError(f"only {len(radii)} nonempty annuli (need {min_annuli})")
    osc_a = np.array(osc)
    if np.all(osc_a == 0):
        return HolderFit(0.0, math.nan, 0.0, radii, osc)
    keep = osc_a > 0
    if keep.sum() < 2:
        raise InsufficientSamplesError("fewer than two annuli with positive oscillation")
    X = np.log(np.array(radii)[keep])
    Y = np.log(osc_a[keep])
    A = np.column_stack([np.ones_like(X), X])
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    res = float(np.sqrt(np.mean((A @ coef - Y) ** 2)))
    return HolderFit(float(math.exp(coef[0])), float(coef[1]), res, radii, osc)


# -- blow-up iteration ---------------------------------------------------------


@dataclass
class IterationTrace:
    """Certificates of the rescaled fields ``u_k(x) = u(c + rho_k x) / rho_k``."""

    rbar: float
    center: list
    certificates: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    alpha: float = math.nan
    alpha_residual: float = math.nan

    @property
    def eps(self) -> list:
        return [c.eps for c in self.certificates]

    @property
    def directions(self) -> list:
        return [c.nu for c in self.certificates]

    def direction_steps(self) -> list:
        nus = np.array(self.directions)
        return np.linalg.norm(np.diff(nus, axis=0), axis=1).tolist()

    def ratios(self) -> list:
        e = self.eps
        return [e[k + 1] / e[k] if e[k] > 0 else math.nan for k in range(len(e) - 1)]

    def to_dict(self) -> dict:
        return {
            "rbar": self.rbar,
            "center": self.center,
            "rho": self.rho,
            "alpha": self.alpha,
            "alpha_residual": self.alpha_residual,
            "certificates": [c.to_dict() for c in self.certificates],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = len(self.certificates[0].nu) if self.certificates else 0
        w.writerow(["k", "rho", "eps", "a", "b"] + [f"nu{i}" for i in range(n)])
        for c, rho in zip(self.certificates, self.rho):
            w.writerow([c.k, repr(rho), repr(c.eps), repr(c.a), repr(c.b)] + [repr(x) for x in c.nu])
        return buf.getvalue()


def _fit_alpha(rho, eps):
    rho, eps = np.asarray(rho), np.asarray(eps)
    keep = eps > 0
    if keep.sum() < 2:
        return math.nan, math.nan
    X, Y = np.log(rho[keep]), np.log(eps[keep])
    A = np.column_stack([np.ones_like(X), X])
    coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    return float(coef[1]), float(np.sqrt(np.mean((A @ coef - Y) ** 2)))


def flatness_iteration(
    u,
    rbar: float,
    K: int,
    seed,
    center=None,
    radius: float = 1.0,
    search: DirectionSearch | None = None,
    grid: GridFunction | None = None,
) -> IterationTrace:
    """Flatness of ``u_k(x) = u(c + rho_k x) / rho_k``, ``rho_k = rbar^k``, on ``B_radius``.

    ``u`` is a grid function, or a callable evaluated exactly on the lattice
    of ``grid`` (the rescaled lattice is the original one mapped by
    ``x -> (x - c) / rho_k``, so no interpolation is involved either way).
    The best direction at scale ``k`` seeds the search at scale ``k + 1``.
    ``alpha`` is the slope of ``log eps_k`` against ``log rho_k``.

    Raises:
        ResolutionExhaustedError: ``rho_K * radius < 4 h``.
        PreconditionError: ``center`` is not within ``h`` of the free boundary.
    """
    if not 0 < rbar < 1:
        raise DomainError("rbar must lie in (0, 1)")
    if K < 1:
        raise DomainError("K must be at least 1")
    if isinstance(u, GridFunction):
        base, fn = u, None
    elif callable(u) and grid is not None:
        base, fn = grid, u
    else:
        raise DomainError("u must be a grid function, or a callable together with a grid")
    n = base.dim
    c = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    h = base.h
    rho_K = rbar**K
    if rho_K * radius < 4 * h:
        raise ResolutionExhaustedError(f"rho_K = {rho_K:g} resolves fewer than 4 cells at h = {h:g}")
    if fn is None:
        phase = extract_positive_phase(base)
        if phase.distance_to(c) > h * (1 + 1e-9):
            raise PreconditionError("center is not within h of the free boundary")
    trace = IterationTrace(rbar=float(rbar), center=c.tolist())
    nu = _unit(seed, n)
    for k in range(K + 1):
        rho = rbar**k
        if fn is None:
            uk = base.rescale(rho, c)
        else:
            lat = base.rescale(rho, c)
            uk = lat.with_values(np.asarray(fn(c + rho * lat.points())) / rho)
        nu, cert = best_direction(uk, np.zeros(n), radius, nu, search, k)
        trace.certificates.append(cert)
        trace.rho.append(rho)
    trace.alpha, trace.alpha_residual = _fit_alpha(trace.rho, trace.eps)
    return trace


# -- rescaled data -----------------------------------------------------------


@dataclass
class RescaledBounds:
    """Sup norms of the rescaled data on ``B_1`` against ``eps_k^2``."""

    k: int
    rho: float
    eps_k: float
    f_sup: float
    g_dev: float
    grad_p_sup: float

    @property
    def holds(self) -> bool:
        lim = self.eps_k**2 * (1 + 1e-12)
        return self.f_sup <= lim and self.g_dev <= lim and self.grad_p_sup <= lim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["holds"] = self.holds
        return d


def rescaled_data_bounds(f, g, P: ExponentField, rbar: float, eps0: float, K: int, n: int, samples: int = 33) -> list:
    """``f_k(x) = rho_k f(rho_k x)``, ``g_k(x) = g(rho_k x)``, ``p_k(x) = p(rho_k x)`` on ``B_1``.

    Returns the sampled sup norms of ``f_k``, ``g_k - 1`` and ``grad p_k``
    next to ``eps_k^2`` with ``eps_k = 2^-k eps0``.
    """
    ax = np.linspace(-1, 1, samples)
    pts = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), axis=-1).reshape(-1, n)
    pts = pts[np.linalg.norm(pts, axis=1) <= 1]
    F, G = _field(f), _field(g)
    out = []
    for k in range(K + 1):
        rho = rbar**k
        y = rho * pts
        out.append(
            RescaledBounds(
                k,
                rho,
                eps0 / 2**k,
                float(np.max(np.abs(rho * F(y)))),
                float(np.max(np.abs(G(y) - 1))),
                float(np.max(rho * np.linalg.norm(P.gradient(y), axis=-1))),
            )
        )
    return out

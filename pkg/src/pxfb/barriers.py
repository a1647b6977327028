"""Radial barriers ``w = c1 |x - x0|^-gamma - c2`` and their affine perturbations.

Besides exact evaluation, this module certifies the barrier inequalities by
dense sampling of the annulus and classifies analytic candidates as strict
comparison sub- or supersolutions.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .errors import DomainError, GradientDegenerateError, OutOfAnnulusError
from .exponent import ExponentField, check_exponent_bounds
from .grid import GridFunction, extract_positive_phase
from .operators import GRADIENT_FLOOR, SmoothFunction, p_laplacian_from_jet

__all__ = [
    "gamma_exponent",
    "gamma_conditions",
    "BarrierConstants",
    "barrier_constants",
    "Barrier",
    "eval_barrier",
    "radial_p_laplacian",
    "annulus_samples",
    "synthetic_exponent",
    "CertificationReport",
    "certify_barrier_w",
    "certify_barrier_v",
    "ComparisonVerdict",
    "classify_comparison",
]

EPS_GRID = tuple(2.0**-k for k in range(1, 31))


# -- the exponent gamma ------------------------------------------------------


def _gamma_terms(n: int, p_min: float, p_max: float) -> list[Fraction]:
    n, a, b = Fraction(n), Fraction(p_min), Fraction(p_max)
    return [Fraction(1), (1 + n - a) / (a - 1), (1 + n) / (a - 1) - 2, n + b - 3]


def gamma_exponent(n: int, p_min: float, p_max: float) -> float:
    """``max{1, (1+n-p_min)/(p_min-1), (1+n)/(p_min-1) - 2, n+p_max-3}``.

    The maximum is taken in exact rational arithmetic and rounded upward, so
    the returned float satisfies the three admissibility conditions exactly.
    """
    if int(n) != n or n < 1:
        raise DomainError(f"dimension must be a positive integer, got {n}")
    check_exponent_bounds(p_min, p_max)
    exact = max(_gamma_terms(int(n), p_min, p_max))
    g = float(exact)
    if Fraction(g) < exact:
        g = math.nextafter(g, math.inf)
    return g


def gamma_conditions(gamma: float, n: int, p_min: float, p_max: float) -> tuple[Fraction, Fraction, Fraction]:
    """Exact slacks of the three conditions that ``gamma`` must meet (each should be ``>= 0``).

    ``gamma(p_min-1) + p_min - n >= 1``, ``(gamma+2)(p_min-1) - n >= 1`` and
    ``gamma + 4 - n - p_max >= 1``.
    """
    g, n, a, b = Fraction(gamma), Fraction(n), Fraction(p_min), Fraction(p_max)
    return (g * (a - 1) + a - n - 1, (g + 2) * (a - 1) - n - 1, g + 4 - n - b - 1)


def radial_p_laplacian(r, gamma: float, p: float, n: int, c1: float = 1.0):
    """Closed form of ``Delta_p (c1 |x|^-gamma)`` at radius ``r`` for constant ``p``."""
    r = np.asarray(r, dtype=float)
    return c1 ** (p - 1) * gamma ** (p - 1) * r ** (-gamma * (p - 1) - p) * (gamma * (p - 1) + p - n)


# -- constants ---------------------------------------------------------------


@dataclass
class BarrierConstants:
    """``c_bar`` in closed form and the empirical smallness thresholds."""

    c_bar: float
    C5: float
    eps0_empirical: float | None = None
    eps1_empirical: float | None = None
    note: str = (
        "eps0 and eps1 are existence constants; the values reported here are the "
        "largest eps on the grid 2^-1..2^-30 for which sampled certification passes"
    )


def barrier_constants(
    n: int,
    p_min: float,
    p_max: float,
    c0: float,
    c1: float,
    theta: float = 1.0,
    r1: float | None = None,
    r2: float = 1.0,
    samples: int = 64,
) -> BarrierConstants:
    """``c_bar = min(c1^(p_min-1), c1^(p_max-1)) / 2`` and ``C5 = min(2^(2-p_max), 2^(p_min-2))``.

    When an inner radius ``r1`` is supplied, the thresholds ``eps0`` and
    ``eps1`` are estimated by certifying on the logarithmic grid of ``eps``.
    """
    if c0 <= 0 or c1 <= 0:
        raise DomainError("c0 and c1 must be positive")
    if not 0 < theta <= 1:
        raise DomainError("theta must lie in (0, 1]")
    check_exponent_bounds(p_min, p_max)
    c_bar = 0.5 * min(c1 ** (p_min - 1), c1 ** (p_max - 1))
    C5 = min(0.5 ** (p_max - 2), 2.0 ** (p_min - 2))
    out = BarrierConstants(c_bar, C5)
    if r1 is not None:
        gamma = gamma_exponent(n, p_min, p_max)
        center = np.zeros(n)
        p_c = 0.5 * (p_min + p_max)

        def w_ok(eps):
            b = Barrier(center, c0, c1, 0.0, 0.0, gamma, eps, r1, r2, "radial_w")
            P = synthetic_exponent(p_c, eps ** (1 + theta), center, theta=theta)
            return certify_barrier_w(b, P, samples, threshold=c_bar).passed

        def v_ok(eps):
            b = Barrier(center, c0, c1, 0.0, 0.0, gamma, eps, r1, r2, "perturbed_v")
            P = synthetic_exponent(p_c, eps ** (1 + theta), center, theta=theta)
            return certify_barrier_v(b, P, samples).passed

        out.eps0_empirical = empirical_threshold(w_ok)
        out.eps1_empirical = empirical_threshold(v_ok)
    return out


def empirical_threshold(ok: Callable[[float], bool], grid=EPS_GRID) -> float | None:
    """Largest ``eps`` of the (decreasing) grid for which ``ok`` holds."""
    for eps in grid:
        if ok(eps):
            return eps
    return None


# -- the barrier -------------------------------------------------------------


@dataclass
class Barrier:
    """``w = c1 |x - x0|^-gamma - c2`` (``radial_w``) or ``v = x_n + c3 + (c0/2) eps (w - 1)`` (``perturbed_v``).

    ``gamma`` is not forced to be admissible here so that inadmissible
    choices can be certified (and seen to fail); see :meth:`admissible`.
    """

    center: np.ndarray
    c0: float
    c1: float
    c2: float
    c3: float
    gamma: float
    eps: float
    r1: float
    r2: float
    kind: str = "radial_w"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        if self.kind not in ("radial_w", "perturbed_v"):
            raise DomainError(f"unknown barrier kind {self.kind!r}")
        if not 0 < self.r1 < self.r2 <= 1:
            raise DomainError(f"need 0 < r1 < r2 <= 1, got r1={self.r1}, r2={self.r2}")
        if self.c1 <= 0 or self.c0 <= 0 or self.c2 < 0:
            raise DomainError("c0, c1 must be positive and c2 nonnegative")
        if not 0 <= self.eps < 1:
            raise DomainError("eps must lie in [0, 1)")
        if self.gamma <= 0:
            raise DomainError("gamma must be positive")

    @property
    def dim(self) -> int:
        return len(self.center)

    def admissible(self, p_min: float, p_max: float) -> bool:
        return self.gamma >= 1 and all(s >= 0 for s in gamma_conditions(self.gamma, self.dim, p_min, p_max))

    def with_eps(self, eps: float) -> "Barrier":
        return Barrier(self.center, self.c0, self.c1, self.c2, self.c3, self.gamma, eps, self.r1, self.r2, self.kind)

    # derivatives ----------------------------------------------------------

    def _radial(self, x):
        d = np.asarray(x, dtype=float) - self.center
        r = np.linalg.norm(d, axis=-1)
        return d, r

    def w(self, x):
        _, r = self._radial(x)
        return self.c1 * r ** (-self.gamma) - self.c2

    def w_gradient(self, x):
        d, r = self._radial(x)
        return (-self.c1 * self.gamma * r ** (-self.gamma - 2))[..., None] * d

    def w_hessian(self, x):
        d, r = self._radial(x)
        nu = d / r[..., None]
        eye = np.eye(self.dim)
        k = self.c1 * self.gamma * r ** (-self.gamma - 2)
        return k[..., None, None] * ((self.gamma + 2) * nu[..., :, None] * nu[..., None, :] - eye)

    def value(self, x):
        if self.kind == "radial_w":
            return self.w(x)
        x = np.asarray(x, dtype=float)
        return x[..., -1] + self.c3 + 0.5 * self.c0 * self.eps * (self.w(x) - 1)

    def gradient(self, x):
        if self.kind == "radial_w":
            return self.w_gradient(x)
        e = np.zeros(self.dim)
        e[-1] = 1.0
        return e + 0.5 * self.c0 * self.eps * self.w_gradient(x)

    def hessian(self, x):
        if self.kind == "radial_w":
            return self.w_hessian(x)
        return 0.5 * self.c0 * self.eps * self.w_hessian(x)

    def as_smooth(self) -> SmoothFunction:
        return SmoothFunction(self.value, self.gradient, self.hessian)

    def in_annulus(self, x, tol: float = 1e-12):
        _, r = self._radial(x)
        return (r >= self.r1 * (1 - tol)) & (r <= self.r2 * (1 + tol))


def eval_barrier(b: Barrier, x, P: ExponentField, floor: float = GRADIENT_FLOOR):
    """Value, gradient and ``Delta_{p(x)}`` of the barrier at point(s) ``x`` of the annulus."""
    x = np.asarray(x, dtype=float)
    if not np.all(b.in_annulus(x)):
        raise OutOfAnnulusError(f"point(s) outside the annulus {b.r1} <= |x - x0| <= {b.r2}")
    grad = b.gradient(x)
    lap = p_laplacian_from_jet(grad, b.hessian(x), P(x), P.gradient(x), floor)
    val = b.value(x)
    if np.ndim(val) == 0:
        return float(val), grad, float(lap)
    return val, grad, lap


# -- sampling ----------------------------------------------------------------


def _sphere_directions(n: int, per_axis: int) -> np.ndarray:
    """Normalized lattice points of the cube surface (odd count so axis directions occur)."""
    m = 2 * (per_axis // 2) + 1
    ax = np.linspace(-1.0, 1.0, m)
    pts = np.stack(np.meshgrid(*([ax] * n), indexing="ij"), axis=-1).reshape(-1, n)
    surf = pts[np.max(np.abs(pts), axis=1) == 1.0]
    return surf / np.linalg.norm(surf, axis=1, keepdims=True)


def annulus_samples(center, r1: float, r2: float, per_axis: int = 64) -> np.ndarray:
    """Bounding-box lattice points filtered to the annulus, plus both bounding spheres."""
    c = np.asarray(center, dtype=float)
    n = len(c)
    ax = [np.linspace(ci - r2, ci + r2, per_axis) for ci in c]
    box = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1).reshape(-1, n)
    r = np.linalg.norm(box - c, axis=1)
    inner = box[(r >= r1) & (r <= r2)]
    dirs = _sphere_directions(n, per_axis)
    return np.concatenate([inner, c + r1 * dirs, c + r2 * dirs])


def synthetic_exponent(p_c: float, slope: float, base_point, direction=None, radius: float = 1.0, theta: float = 1.0):
    """Affine exponent ``p_c + slope <x - base_point, d>`` with ``|grad p| = slope`` exactly."""
    base = np.asarray(base_point, dtype=float)
    d = np.zeros(len(base)) if direction is None else np.asarray(direction, dtype=float)
    if direction is None:
        d[0] = 1.0
    d = d / np.linalg.norm(d)
    return ExponentField.linear(p_c, slope * d, radius, base_point=base, theta=theta)


# -- certification -----------------------------------------------------------


@dataclass
class CertificationReport:
    """Outcome of a sampled inequality check; ``passed`` iff ``min_margin > 0``."""

    inequality: str
    region: dict
    sample_count: int
    min_margin: float
    worst_point: list
    passed: bool
    params: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        self.passed = bool(self.min_margin > 0)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        pt = ", ".join(f"{c:.6g}" for c in self.worst_point)
        return f"{self.inequality}: {status} margin={self.min_margin:.6g} at ({pt}) over {self.sample_count} samples"


def _barrier_params(b: Barrier, P: ExponentField) -> dict:
    return {
        "center": [float(c) for c in b.center],
        "c0": b.c0,
        "c1": b.c1,
        "c2": b.c2,
        "c3": b.c3,
        "gamma": b.gamma,
        "eps": b.eps,
        "kind": b.kind,
        "p_min": P.p_min,
        "p_max": P.p_max,
        "grad_p_bound": P.lipschitz,
    }


def _region(b: Barrier, per_axis: int) -> dict:
    return {"shape": "annulus", "r1": b.r1, "r2": b.r2, "samples_per_axis": per_axis}


def certify_barrier_w(b: Barrier, P: ExponentField, samples: int = 64, threshold: float | None = None) -> CertificationReport:
    """Check ``Delta_{p(x)} w >= c_bar`` on the annulus (margin ``Delta w - c_bar``).

    ``threshold`` overrides ``c_bar`` (computed from ``c1`` and the exponent bounds).
    """
    wb = b if b.kind == "radial_w" else Barrier(b.center, b.c0, b.c1, b.c2, b.c3, b.gamma, b.eps, b.r1, b.r2, "radial_w")
    thr = 0.5 * min(b.c1 ** (P.p_min - 1), b.c1 ** (P.p_max - 1)) if threshold is None else float(threshold)
    pts = annulus_samples(b.center, b.r1, b.r2, samples)
    _, _, lap = eval_barrier(wb, pts, P)
    margin = lap - thr
    i = int(np.argmin(margin))
    params = _barrier_params(wb, P) | {"threshold": thr}
    return CertificationReport(
        "p_laplacian_w_ge_cbar",
        _region(b, samples),
        len(pts),
        float(margin[i]),
        [float(c) for c in pts[i]],
        False,
        params,
        {"lap_min": float(lap.min()), "lap_max": float(lap.max())},
    )


def certify_barrier_v(b: Barrier, P: ExponentField, samples: int = 64) -> CertificationReport:
    """Check ``1/2 <= |grad v| <= 2`` and ``Delta_{p(x)} v > eps^2`` on the annulus."""
    vb = b if b.kind == "perturbed_v" else Barrier(b.center, b.c0, b.c1, b.c2, b.c3, b.gamma, b.eps, b.r1, b.r2, "perturbed_v")
    pts = annulus_samples(b.center, b.r1, b.r2, samples)
    _, grad, lap = eval_barrier(vb, pts, P)
    s = np.linalg.norm(grad, axis=-1)
    parts = {
        "grad_lower": s - 0.5,
        "grad_upper": 2.0 - s,
        "strict_sub": lap - vb.eps**2,
    }
    stacked = np.stack(list(parts.values()))
    margin = stacked.min(axis=0)
    i = int(np.argmin(margin))
    comps = {k: float(v.min()) for k, v in parts.items()}
    return CertificationReport(
        "grad_pinch_and_p_laplacian_v_gt_eps2",
        _region(b, samples),
        len(pts),
        float(margin[i]),
        [float(c) for c in pts[i]],
        False,
        _barrier_params(vb, P),
        comps,
    )


# -- strict comparison sub/supersolutions ------------------------------------


@dataclass
class ComparisonVerdict:
    """Classification of a candidate with its sampled margins.

    ``interior_margin`` is ``min (Delta_{p(x)} v - f)`` over the positive phase
    and ``fb_margin`` is ``min (|grad v| - g)`` over free boundary points; the
    ``*_super`` entries are the corresponding ``min (f - Delta v)`` and
    ``min (g - |grad v|)``.
    """

    verdict: str
    interior_margin: float
    fb_margin: float
    interior_margin_super: float
    fb_margin_super: float
    interior_samples: int
    fb_samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def _as_field(c) -> Callable[[np.ndarray], np.ndarray]:
    if callable(c):
        return c
    return lambda x: np.full(np.shape(x)[:-1], float(c))


def _project_to_zero(phi: SmoothFunction, pts: np.ndarray, steps: int = 8) -> np.ndarray:
    x = pts.copy()
    for _ in range(steps):
        g = phi.gradient(x)
        x = x - (phi.value(x) / np.sum(g * g, axis=-1))[:, None] * g
    return x


def classify_comparison(
    v: SmoothFunction,
    grid: GridFunction,
    P: ExponentField,
    f=0.0,
    g=1.0,
    region=None,
    floor: float = GRADIENT_FLOOR,
) -> ComparisonVerdict:
    """Classify ``v`` as ``strict_sub``, ``strict_super`` or ``neither``.

    ``v`` is sampled on the nodes of ``grid`` (restricted to ``region``, a
    boolean lattice or a predicate on points).  The free boundary is extracted
    from the samples and refined by Newton projection onto ``{v = 0}``.
    Strictness uses zero slack; the margins are returned.
    """
    pts = grid.points()
    vals = v.value(pts)
    if region is None:
        inside = np.ones(grid.shape, dtype=bool)
    elif callable(region):
        inside = np.asarray(region(pts), dtype=bool)
    else:
        inside = np.asarray(region, dtype=bool)
    f_fn, g_fn = _as_field(f), _as_field(g)

    closed = inside & (vals >= 0)
    if np.any(closed):
        grads = v.gradient(pts[closed])
        if np.any(np.linalg.norm(grads, axis=-1) < floor):
            raise GradientDegenerateError("candidate gradient vanishes on its closed positive phase")

    pos = inside & (vals > 0)
    xp = pts[pos]
    if len(xp):
        lap = p_laplacian_from_jet(v.gradient(xp), v.hessian(xp), P(xp), P.gradient(xp), floor)
        res = lap - f_fn(xp)
        int_sub, int_sup = float(res.min()), float((-res).min())
    else:
        int_sub = int_sup = math.inf

    phase = extract_positive_phase(grid.with_values(vals))
    fb = phase.points
    if len(fb):
        fb = _project_to_zero(v, fb)
        keep = np.asarray(region(fb), dtype=bool) if callable(region) else None
        if keep is None and region is not None:
            # lattice region: keep crossings whose edge endpoints are both inside
            e = phase.edges
            keep = inside[tuple(e[:, 0].T)] & inside[tuple(e[:, 1].T)]
        if keep is not None:
            fb = fb[keep]
    if len(fb):
        s = np.linalg.norm(v.gradient(fb), axis=-1) - g_fn(fb)
        fb_sub, fb_sup = float(s.min()), float((-s).min())
    else:
        fb_sub = fb_sup = math.inf

    if int_sub > 0 and fb_sub > 0:
        verdict = "strict_sub"
    elif int_sup > 0 and fb_sup > 0:
        verdict = "strict_super"
    else:
        verdict = "neither"
    return ComparisonVerdict(verdict, int_sub, fb_sub, int_sup, fb_sup, int(len(xp)), int(len(fb)))

"""Modular and Luxemburg norm of the variable exponent Lebesgue space."""

from __future__ import annotations

import itertools
import math

import numpy as np

from .exponent import ExponentField
from .grid import GridFunction

__all__ = ["cell_centers", "modular", "luxemburg_norm", "norm_bracket"]


def cell_centers(u: GridFunction) -> tuple[np.ndarray, np.ndarray]:
    """Cell-center values (mean of the ``2^n`` corners) and cell-center points."""
    n = u.dim
    acc = np.zeros(tuple(s - 1 for s in u.shape))
    for corner in itertools.product((0, 1), repeat=n):
        sl = tuple(slice(c, s - 1 + c) for c, s in zip(corner, u.shape))
        acc += u.values[sl]
    vals = acc / 2**n
    axes = [0.5 * (a[1:] + a[:-1]) for a in u.axes()]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return vals, pts


def _modular_cells(vals, p_cells, cell_vol, scale=1.0) -> float:
    return float(np.sum(np.abs(vals / scale) ** p_cells) * cell_vol)


def modular(u: GridFunction, P: ExponentField) -> float:
    """``rho(u) = integral of |u|^p(x)`` by the midpoint rule on grid cells."""
    vals, pts = cell_centers(u)
    return _modular_cells(vals, P(pts), float(np.prod(u.spacing)))


def luxemburg_norm(u: GridFunction, P: ExponentField, rtol: float = 1e-12, max_iter: int = 400) -> float:
    """``inf{lam > 0 : rho(u / lam) <= 1}`` by bisection in ``log lam``.

    ``rho(u / lam)`` is continuous and strictly decreasing in ``lam`` once
    ``u`` is not a.e. zero, so the infimum is the unique root of ``rho = 1``.
    """
    vals, pts = cell_centers(u)
    p_cells = P(pts)
    vol = float(np.prod(u.spacing))
    top = float(np.max(np.abs(vals))) if vals.size else 0.0
    if top == 0.0:
        return 0.0

    def rho(lam):
        return _modular_cells(vals, p_cells, vol, lam)

    m = u.measure
    lo = top * m ** (1 / P.p_max) / 2
    hi = top * (1 + m) ** (1 / P.p_min) * 2
    while rho(lo) <= 1:
        lo /= 2
    while rho(hi) > 1:
        hi *= 2
    a, b = math.log(lo), math.log(hi)
    for _ in range(max_iter):
        if b - a <= rtol:
            break
        mid = 0.5 * (a + b)
        if rho(math.exp(mid)) > 1:
            a = mid
        else:
            b = mid
    return math.exp(b)


def norm_bracket(rho: float, p_min: float, p_max: float) -> tuple[float, float]:
    """Lower and upper bound of the norm in terms of the modular value."""
    lo = min(rho ** (1 / p_min), rho ** (1 / p_max))
    hi = max(rho ** (1 / p_min), rho ** (1 / p_max))
    return lo, hi

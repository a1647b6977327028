"""Evaluation of the p(x)-Laplacian in nondivergence and divergence form.

The nondivergence form of ``div(|grad u|^(p-2) grad u)`` for a C^2 function
with nonvanishing gradient is

    |grad u|^(p-2) (lap u + (p-2) <D^2u nu, nu> + <grad p, grad u> log|grad u|),

with ``nu = grad u / |grad u|``.  The divergence form is discretized with
fluxes on the staggered faces of the lattice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import GradientDegenerateError
from .exponent import ExponentField
from .grid import GridFunction

__all__ = [
    "GRADIENT_FLOOR",
    "FLUX_DELTA",
    "SmoothFunction",
    "eval_p_laplacian_nondiv",
    "p_laplacian_from_jet",
    "eval_p_laplacian_div",
    "divergence_residual",
    "face_gradients",
    "node_gradient",
    "frozen_coefficients",
    "coefficients_from_gradient",
    "ellipticity_bounds",
]

GRADIENT_FLOOR = 1e-12
FLUX_DELTA = 1e-8


@dataclass
class SmoothFunction:
    """A C^2 function given by vectorized value, gradient and Hessian evaluators."""

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        return self.value(np.asarray(x, dtype=float))


def p_laplacian_from_jet(grad, hess, p, grad_p, floor: float = GRADIENT_FLOOR):
    """Nondivergence p(x)-Laplacian from pointwise derivative data.

    ``grad`` has shape ``(..., n)``, ``hess`` ``(..., n, n)``; ``p`` and
    ``grad_p`` are the exponent and its gradient at the same points.
    """
    grad = np.asarray(grad, dtype=float)
    hess = np.asarray(hess, dtype=float)
    norm = np.linalg.norm(grad, axis=-1)
    p = np.asarray(p, dtype=float)
    grad_p = np.asarray(grad_p, dtype=float)
    # with p = 2 and grad p = 0 the operator is the Laplacian and needs no gradient
    linear = (p == 2) & np.all(grad_p == 0, axis=-1)
    bad = (norm < floor) & ~linear
    if np.any(bad):
        raise GradientDegenerateError(
            f"|grad| below floor {floor:g} at {int(np.sum(bad))} point(s); the expansion is undefined there",
            points=np.argwhere(np.atleast_1d(bad)),
        )
    lap = np.trace(hess, axis1=-2, axis2=-1)
    if np.all(linear):
        return lap
    safe = np.where(norm < floor, 1.0, norm)
    ghg = np.einsum("...i,...ij,...j->...", grad, hess, grad)
    inf_lap = ghg / safe**2
    log_term = np.einsum("...i,...i->...", grad_p, grad) * np.log(safe)
    return np.where(linear, lap, safe ** (p - 2) * (lap + (p - 2) * inf_lap + log_term))


def eval_p_laplacian_nondiv(phi: SmoothFunction, x, P: ExponentField, floor: float = GRADIENT_FLOOR):
    """``Delta_{p(x)} phi`` at the point(s) ``x`` from the nondivergence expansion.

    Raises:
        GradientDegenerateError: if ``|grad phi(x)| < floor`` anywhere.
    """
    x = np.asarray(x, dtype=float)
    out = p_laplacian_from_jet(phi.gradient(x), phi.hessian(x), P(x), P.gradient(x), floor)
    return float(out) if np.ndim(out) == 0 else out


# -- divergence form ---------------------------------------------------------


def _slab(ndim, axis, sl):
    s = [slice(None)] * ndim
    s[axis] = sl
    return tuple(s)


def face_gradients(values: np.ndarray, h) -> list[list[np.ndarray]]:
    """Gradient components on the staggered faces.

    Entry ``[i][k]`` is the ``k``-th gradient component on the faces normal to
    axis ``i`` (array with one fewer node along ``i``).  The normal component
    is the two-point difference; tangential components average the central
    differences of the two adjacent nodes.  Works for complex input.
    """
    n = values.ndim
    central = []
    for k in range(n):
        central.append(np.gradient(values, h[k], axis=k, edge_order=1) if n > 1 else None)
    out = []
    for i in range(n):
        lo, hi = _slab(n, i, slice(0, -1)), _slab(n, i, slice(1, None))
        comps = []
        for k in range(n):
            if k == i:
                comps.append((values[hi] - values[lo]) / h[i])
            else:
                comps.append(0.5 * (central[k][lo] + central[k][hi]))
        out.append(comps)
    return out


def divergence_residual(values, h, p_nodes, f_values, shift=None, delta: float = FLUX_DELTA):
    """``div(|G|_delta^(p-2) G) - f`` at interior nodes, ``G = grad u + shift``.

    ``|G|_delta = sqrt(|G|^2 + delta^2)``; ``p`` on a face is the arithmetic
    mean of its two nodes.  Boundary entries of the result are zero.
    Complex-safe so that it can be differentiated by complex steps.
    """
    n = values.ndim
    h = np.asarray(h, dtype=float)
    faces = face_gradients(values, h)
    div = np.zeros(values.shape, dtype=np.result_type(values, float))
    inner = tuple(slice(1, -1) for _ in range(n))
    for i in range(n):
        lo, hi = _slab(n, i, slice(0, -1)), _slab(n, i, slice(1, None))
        G = [faces[i][k] + (0.0 if shift is None else shift[k]) for k in range(n)]
        mag2 = sum(g * g for g in G) + delta**2
        p_face = 0.5 * (p_nodes[lo] + p_nodes[hi])
        flux = mag2 ** ((p_face - 2) / 2) * G[i]
        d = (flux[hi] - flux[lo]) / h[i]
        # restrict to nodes interior in every direction
        sl = [slice(1, -1)] * n
        sl[i] = slice(None)
        div[inner] += d[tuple(sl)]
    res = np.zeros_like(div)
    res[inner] = div[inner] - f_values[inner]
    return res


def eval_p_laplacian_div(u: GridFunction, P: ExponentField, f: GridFunction, delta: float = FLUX_DELTA) -> GridFunction:
    """Discrete residual ``div(|grad u|^(p-2) grad u) - f`` on interior nodes.

    Boundary nodes carry zero.  The flux regularization ``delta`` is stored
    in the result's metadata.
    """
    u.require_same_grid(f)
    p_nodes = P(u.points())
    res = divergence_residual(u.values, u.spacing, p_nodes, f.values, delta=delta)
    return u.with_values(res, name="residual", meta={"delta": delta})


# -- frozen coefficients -----------------------------------------------------


def node_gradient(u: GridFunction, index) -> np.ndarray:
    """Central (one-sided at the box boundary) difference gradient at a node."""
    index = tuple(int(i) for i in index)
    g = np.empty(u.dim)
    for k, hk in enumerate(u.spacing):
        lo, hi = list(index), list(index)
        if 0 < index[k] < u.shape[k] - 1:
            lo[k] -= 1
            hi[k] += 1
            g[k] = (u.values[tuple(hi)] - u.values[tuple(lo)]) / (2 * hk)
        elif index[k] == 0:
            hi[k] += 1
            g[k] = (u.values[tuple(hi)] - u.values[index]) / hk
        else:
            lo[k] -= 1
            g[k] = (u.values[index] - u.values[tuple(lo)]) / hk
    return g


def coefficients_from_gradient(grad, p: float, grad_p, floor: float = GRADIENT_FLOOR):
    """Frozen-coefficient matrix ``A`` and drift ``b`` for a gradient value.

    ``A = |g|^(p-2) (I + (p-2) nu nu^T)`` and ``b = |g|^(p-2) log|g| grad p``.
    """
    grad = np.asarray(grad, dtype=float)
    s = float(np.linalg.norm(grad))
    if s < floor:
        raise GradientDegenerateError(f"|grad u| = {s:g} below floor {floor:g}")
    nu = grad / s
    w = s ** (p - 2)
    A = w * (np.eye(len(grad)) + (p - 2) * np.outer(nu, nu))
    b = w * math.log(s) * np.asarray(grad_p, dtype=float)
    return A, b


def frozen_coefficients(u: GridFunction, P: ExponentField, index, floor: float = GRADIENT_FLOOR):
    """``(A(x), b(x))`` of the linear equation satisfied by ``u`` at a lattice node."""
    x = u.point(index)
    return coefficients_from_gradient(node_gradient(u, index), float(P(x)), P.gradient(x), floor)


def ellipticity_bounds(c1: float, C1: float, p_min: float, p_max: float) -> tuple[float, float]:
    """Eigenvalue bounds of ``A`` when ``c1 <= |grad u| <= C1`` and ``p`` ranges in ``[p_min, p_max]``.

    The eigenvalues are ``s^(p-2)`` and ``(p-1) s^(p-2)``; both are monotone
    in ``s``, and in ``p`` they are extremal at the interval ends, at ``p = 2``
    or at the interior critical point ``p = 1 + 1/|log s|``.
    """
    if not 0 < c1 <= C1:
        raise ValueError("need 0 < c1 <= C1")
    lo, hi = math.inf, 0.0
    for s in (c1, C1):
        cands = {p_min, p_max}
        if p_min < 2 < p_max:
            cands.add(2.0)
        if s != 1.0:
            pc = 1 + 1 / abs(math.log(s))
            if p_min < pc < p_max:
                cands.add(pc)
        for p in cands:
            w = s ** (p - 2)
            lo = min(lo, w * min(1.0, p - 1))
            hi = max(hi, w * max(1.0, p - 1))
    return lo, hi

"""The variable exponent ``p(x)``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError

__all__ = ["ExponentField", "check_exponent_bounds"]


def check_exponent_bounds(p_min: float, p_max: float) -> None:
    if not (1.0 < p_min <= p_max < math.inf):
        raise DomainError(f"exponent bounds must satisfy 1 < p_min <= p_max < inf, got p_min={p_min}, p_max={p_max}")


@dataclass
class ExponentField:
    """Variable exponent with declared bounds and Lipschitz constant.

    ``p`` and ``grad`` are vectorized over points of shape ``(..., n)``.
    When ``grad`` is omitted it is replaced by central differences of ``p``.

    Attributes:
        p: exponent evaluator.
        p_min, p_max: declared bounds, ``1 < p_min <= p(x) <= p_max``.
        grad: gradient evaluator (optional).
        lipschitz: bound on ``|grad p|``; ``inf`` for discontinuous exponents
            (only meaningful for the norm utilities).
        base_point: point where ``p0`` is read off; the origin by default.
        theta: flatness parameter attached to the field (``|grad p| <= eps**(1+theta)``).
    """

    p: Callable[[np.ndarray], np.ndarray]
    p_min: float
    p_max: float
    grad: Callable[[np.ndarray], np.ndarray] | None = None
    lipschitz: float = math.inf
    base_point: tuple | None = None
    theta: float = 1.0
    fd_step: float = field(default=1e-6, repr=False)

    def __post_init__(self):
        check_exponent_bounds(self.p_min, self.p_max)
        if self.lipschitz < 0:
            raise DomainError("Lipschitz bound must be nonnegative")
        if not (0 < self.theta <= 1):
            raise DomainError("theta must lie in (0, 1]")

    # constructors ---------------------------------------------------------

    @classmethod
    def constant(cls, p0: float, **kw) -> "ExponentField":
        p0 = float(p0)
        return cls(
            p=lambda x: np.full(np.shape(x)[:-1], p0),
            p_min=p0,
            p_max=p0,
            grad=lambda x: np.zeros(np.shape(x)),
            lipschitz=0.0,
            **kw,
        )

    @classmethod
    def linear(cls, p0: float, slope, radius: float, base_point=None, **kw) -> "ExponentField":
        """``p(x) = p0 + slope . (x - base_point)``, bounded on the ball of given radius."""
        slope = np.asarray(slope, dtype=float)
        x0 = np.zeros_like(slope) if base_point is None else np.asarray(base_point, dtype=float)
        L = float(np.linalg.norm(slope))
        return cls(
            p=lambda x: p0 + (np.asarray(x) - x0) @ slope,
            p_min=p0 - L * radius,
            p_max=p0 + L * radius,
            grad=lambda x: np.broadcast_to(slope, np.shape(x)).copy(),
            lipschitz=L,
            base_point=tuple(x0),
            **kw,
        )

    @classmethod
    def two_valued(cls, low: float, high: float, axis: int = 0, cut: float = 0.5) -> "ExponentField":
        """Piecewise constant exponent, ``low`` for ``x[axis] < cut`` and ``high`` otherwise."""
        return cls(
            p=lambda x: np.where(np.asarray(x)[..., axis] < cut, low, high),
            p_min=min(low, high),
            p_max=max(low, high),
            grad=lambda x: np.zeros(np.shape(x)),
            lipschitz=math.inf,
        )

    # evaluation -----------------------------------------------------------

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.p(np.asarray(x, dtype=float)), dtype=float)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.grad is not None:
            return np.asarray(self.grad(x), dtype=float)
        n = x.shape[-1]
        g = np.empty(x.shape)
        for i in range(n):
            e = np.zeros(n)
            e[i] = self.fd_step
            g[..., i] = (self(x + e) - self(x - e)) / (2 * self.fd_step)
        return g

    @property
    def p0(self) -> float:
        return float(self.at_base())

    def at_base(self, n: int | None = None) -> float:
        if self.base_point is not None:
            x = np.asarray(self.base_point, dtype=float)
        else:
            x = np.zeros(n or 1)
        return float(self(x))

    def grad_sup(self, points) -> float:
        """Sup of ``|grad p|`` over sampled points."""
        g = self.gradient(points)
        return float(np.max(np.linalg.norm(g, axis=-1))) if g.size else 0.0

    def check(self, points, pairs: int = 2000, seed: int = 0, tol: float = 1e-12) -> bool:
        """Verify the declared bounds and Lipschitz constant on sampled points."""
        pts = np.asarray(points, dtype=float).reshape(-1, np.shape(points)[-1])
        vals = self(pts)
        if np.any(vals < self.p_min - tol) or np.any(vals > self.p_max + tol):
            return False
        if math.isfinite(self.lipschitz) and len(pts) > 1:
            rng = np.random.default_rng(seed)
            i = rng.integers(0, len(pts), pairs)
            j = rng.integers(0, len(pts), pairs)
            d = np.linalg.norm(pts[i] - pts[j], axis=-1)
            if np.any(np.abs(vals[i] - vals[j]) > self.lipschitz * d + tol):
                return False
        return True

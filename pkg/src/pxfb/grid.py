"""Uniform Cartesian grid functions, positive phases and their serialization.

A :class:`GridFunction` stores nodal values on the lattice
``lower + h * index`` of an axis-aligned box, boundary nodes included.
Points are always passed around as arrays of shape ``(..., n)``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import GridMismatchError

__all__ = [
    "GridFunction",
    "PositivePhase",
    "extract_positive_phase",
    "box_grid",
]


def _as_tuple(x) -> tuple[float, ...]:
    return tuple(float(v) for v in np.atleast_1d(np.asarray(x, dtype=float)))


@dataclass
class GridFunction:
    """Scalar field sampled on the nodes of a uniform grid over a box.

    Attributes:
        lower: lower corner of the box.
        upper: upper corner of the box.
        values: array whose shape is the lattice shape (one entry per node).
        name: field name used in serialized headers.
        meta: free-form metadata (solver settings, regularization, ...);
            not part of grid identity.
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    values: np.ndarray
    name: str = "u"
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.lower = _as_tuple(self.lower)
        self.upper = _as_tuple(self.upper)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != len(self.lower) or len(self.lower) != len(self.upper):
            raise ValueError(
                f"values has {self.values.ndim} axes but the box has dimension {len(self.lower)}"
            )
        if any(s < 2 for s in self.values.shape):
            raise ValueError("each axis needs at least two nodes")
        if any(u <= l for l, u in zip(self.lower, self.upper)):
            raise ValueError("upper corner must exceed lower corner on every axis")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"grid function {self.name!r} has non-finite values")

    # construction ---------------------------------------------------------

    @classmethod
    def sample(cls, fn: Callable[[np.ndarray], np.ndarray], lower, upper, h, name="u"):
        """Evaluate ``fn`` (vectorized over points ``(..., n)``) on a grid of spacing ``h``."""
        grid = box_grid(lower, upper, h)
        return grid.with_values(np.broadcast_to(fn(grid.points()), grid.shape), name=name)

    def with_values(self, values, name: str | None = None, meta: dict | None = None) -> "GridFunction":
        values = np.array(values, dtype=float)
        if values.shape != self.shape:
            raise GridMismatchError(f"expected values of shape {self.shape}, got {values.shape}")
        return GridFunction(self.lower, self.upper, values, name or self.name, dict(meta or {}))

    def evaluate(self, fn, name: str | None = None) -> "GridFunction":
        """New grid function on the same lattice with values ``fn(points)``."""
        return self.with_values(np.broadcast_to(fn(self.points()), self.shape), name=name)

    # geometry -------------------------------------------------------------

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def spacing(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / (np.array(self.shape) - 1)

    @property
    def h(self) -> float:
        """Largest spacing over the axes."""
        return float(self.spacing.max())

    @property
    def measure(self) -> float:
        return float(np.prod(np.array(self.upper) - np.array(self.lower)))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, u, s) for l, u, s in zip(self.lower, self.upper, self.shape)]

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(*shape, n)``."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def point(self, index) -> np.ndarray:
        index = tuple(int(i) for i in index)
        return np.array([ax[i] for ax, i in zip(self.axes(), index)])

    def nearest_index(self, x) -> tuple[int, ...]:
        x = np.asarray(x, dtype=float)
        idx = np.rint((x - np.array(self.lower)) / self.spacing).astype(int)
        idx = np.clip(idx, 0, np.array(self.shape) - 1)
        return tuple(int(i) for i in idx)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for axis in range(self.dim):
            sl = [slice(None)] * self.dim
            sl[axis] = 0
            mask[tuple(sl)] = True
            sl[axis] = -1
            mask[tuple(sl)] = True
        return mask

    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask()

    def ball_mask(self, center, radius: float, closed: bool = True) -> np.ndarray:
        d = np.linalg.norm(self.points() - np.asarray(center, dtype=float), axis=-1)
        tol = 1e-12 * max(1.0, radius)
        return d <= radius + tol if closed else d < radius - tol

    def contains_ball(self, center, radius: float) -> bool:
        c = np.asarray(center, dtype=float)
        tol = 1e-12 * max(1.0, radius)
        return bool(np.all(c - radius >= np.array(self.lower) - tol) and np.all(c + radius <= np.array(self.upper) + tol))

    def node_volumes(self) -> np.ndarray:
        """Lumped (trapezoidal) control volume of every node."""
        w = np.ones(self.shape)
        for axis, h in enumerate(self.spacing):
            wa = np.full(self.shape[axis], h)
            wa[0] = wa[-1] = h / 2
            sh = [1] * self.dim
            sh[axis] = -1
            w = w * wa.reshape(sh)
        return w

    def same_grid(self, other: "GridFunction") -> bool:
        return (
            self.shape == other.shape
            and np.allclose(self.lower, other.lower, rtol=0, atol=1e-12)
            and np.allclose(self.upper, other.upper, rtol=0, atol=1e-12)
        )

    def require_same_grid(self, *others: "GridFunction") -> None:
        for other in others:
            if not self.same_grid(other):
                raise GridMismatchError(
                    f"grid of {other.name!r} {other.lower}-{other.upper} {other.shape} does not match "
                    f"{self.name!r} {self.lower}-{self.upper} {self.shape}"
                )

    # resampling -----------------------------------------------------------

    def interpolate(self, x) -> np.ndarray:
        """Multilinear interpolation at points ``(..., n)`` inside the box."""
        x = np.asarray(x, dtype=float)
        interp = RegularGridInterpolator(self.axes(), self.values, method="linear", bounds_error=True)
        return interp(x.reshape(-1, self.dim)).reshape(x.shape[:-1])

    def rescale(self, rho: float, center=None) -> "GridFunction":
        """Blow-up ``x -> u(center + rho x) / rho`` as an exact change of coordinates.

        The lattice of the result is the original lattice mapped by
        ``x -> (x - center) / rho``, so no interpolation is involved.
        """
        c = np.zeros(self.dim) if center is None else np.asarray(center, dtype=float)
        lower = (np.array(self.lower) - c) / rho
        upper = (np.array(self.upper) - c) / rho
        out = GridFunction(lower, upper, self.values / rho, self.name, dict(self.meta))
        out.meta["rescale"] = float(rho)
        return out

    # arithmetic -----------------------------------------------------------

    def __neg__(self):
        return self.with_values(-self.values, meta=self.meta)

    def __add__(self, other):
        if isinstance(other, GridFunction):
            self.require_same_grid(other)
            other = other.values
        return self.with_values(self.values + other)

    def __sub__(self, other):
        if isinstance(other, GridFunction):
            self.require_same_grid(other)
            other = other.values
        return self.with_values(self.values - other)

    def __mul__(self, c):
        return self.with_values(self.values * c)

    __rmul__ = __mul__

    def max_abs(self, mask=None) -> float:
        v = self.values if mask is None else self.values[mask]
        return float(np.max(np.abs(v))) if v.size else 0.0

    # serialization --------------------------------------------------------

    def header(self) -> dict:
        meta = {k: v for k, v in self.meta.items() if isinstance(v, (int, float, str, bool)) or v is None}
        return {
            "field": self.name,
            "dimension": self.dim,
            "lower": list(self.lower),
            "upper": list(self.upper),
            "spacing": [float(s) for s in self.spacing],
            "shape": list(self.shape),
            "order": "row-major",
            "meta": meta,
        }

    def to_json(self) -> str:
        doc = {"header": self.header(), "values": [float(v) for v in self.values.ravel(order="C")]}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "GridFunction":
        doc = json.loads(text)
        hd = doc["header"]
        values = np.asarray(doc["values"], dtype=float).reshape(hd["shape"], order="C")
        return cls(hd["lower"], hd["upper"], values, hd.get("field", "u"), dict(hd.get("meta", {})))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{i + 1}" for i in range(self.dim)] + [self.name])
        pts = self.points().reshape(-1, self.dim)
        for x, v in zip(pts, self.values.ravel(order="C")):
            writer.writerow([repr(float(c)) for c in x] + [repr(float(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GridFunction":
        rows = list(csv.reader(io.StringIO(text)))
        head, body = rows[0], np.array(rows[1:], dtype=float)
        n = len(head) - 1
        axes = [np.unique(body[:, i]) for i in range(n)]
        shape = tuple(len(a) for a in axes)
        return cls([a[0] for a in axes], [a[-1] for a in axes], body[:, n].reshape(shape), head[-1])


def box_grid(lower, upper, h) -> GridFunction:
    """Zero grid function on the box with (per-axis or scalar) target spacing ``h``."""
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    h = np.broadcast_to(np.asarray(h, dtype=float), lower.shape)
    cells = (upper - lower) / h
    shape = np.rint(cells).astype(int)
    if np.any(np.abs(cells - shape) > 1e-8 * np.maximum(1, cells)) or np.any(shape < 1):
        raise ValueError(f"spacing {h} does not divide the box {lower}-{upper}")
    return GridFunction(lower, upper, np.zeros(tuple(shape + 1)))


@dataclass
class PositivePhase:
    """Discrete positive phase ``{u > 0}`` and sub-cell free boundary points.

    Attributes:
        owner: the grid function the phase was extracted from.
        mask: boolean lattice, true exactly where the value is positive.
        points: ``(m, n)`` interface crossings, one per lattice edge joining a
            positive and a non-positive node (linear interpolation along the edge).
        edges: ``(m, 2, n)`` integer node indices of those edges, positive node first.
    """

    owner: GridFunction
    mask: np.ndarray
    points: np.ndarray
    edges: np.ndarray

    @property
    def empty(self) -> bool:
        return len(self.points) == 0

    def band_mask(self) -> np.ndarray:
        """Nodes that are endpoints of an interface edge."""
        band = np.zeros_like(self.mask)
        if len(self.edges):
            idx = self.edges.reshape(-1, self.owner.dim)
            band[tuple(idx.T)] = True
        return band

    def distance_to(self, x) -> float:
        if self.empty:
            return float("inf")
        return float(np.min(np.linalg.norm(self.points - np.asarray(x, dtype=float), axis=-1)))


def extract_positive_phase(u: GridFunction) -> PositivePhase:
    """Positive mask and linearly interpolated zero crossings along lattice edges."""
    vals = u.values
    mask = vals > 0
    pts_all = u.points()
    points, edges = [], []
    for axis in range(u.dim):
        a = [slice(None)] * u.dim
        b = [slice(None)] * u.dim
        a[axis] = slice(0, -1)
        b[axis] = slice(1, None)
        a, b = tuple(a), tuple(b)
        va, vb = vals[a], vals[b]
        ma, mb = mask[a], mask[b]
        cut = ma != mb
        if not np.any(cut):
            continue
        ia = np.argwhere(cut)
        ib = ia.copy()
        ib[:, axis] += 1
        pa, pb = pts_all[a][cut], pts_all[b][cut]
        fa, fb = va[cut], vb[cut]
        pos_first = ma[cut]
        # orient every edge as (positive node, non-positive node)
        p_pos = np.where(pos_first[:, None], pa, pb)
        p_neg = np.where(pos_first[:, None], pb, pa)
        f_pos = np.where(pos_first, fa, fb)
        f_neg = np.where(pos_first, fb, fa)
        i_pos = np.where(pos_first[:, None], ia, ib)
        i_neg = np.where(pos_first[:, None], ib, ia)
        t = f_pos / (f_pos - f_neg)
        points.append(p_pos + t[:, None] * (p_neg - p_pos))
        edges.append(np.stack([i_pos, i_neg], axis=1))
    if points:
        pts = np.concatenate(points)
        edg = np.concatenate(edges)
        order = np.lexsort(pts.T[::-1])
        pts, edg = pts[order], edg[order]
    else:
        pts = np.zeros((0, u.dim))
        edg = np.zeros((0, 2, u.dim), dtype=int)
    return PositivePhase(u, mask, pts, edg)

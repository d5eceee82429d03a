"""Structured grids, sampled fields and second-order finite-difference stencils.

Every geometric quantity lives in a flat chart: a periodic torus ``[0, L)^n`` or a
closed box centred at the origin, ``[-L/2, L/2]^n``.  The conformal Schouten
tensor of ``g = e^{-2u} g_0`` is assembled from plain partial derivatives, with
an optional Levi-Civita correction when ``g_0`` is itself conformally flat.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PERIODIC = "periodic"
BOX = "box"
TOPOLOGIES = (PERIODIC, BOX)


def tri_indices(n: int) -> list[tuple[int, int]]:
    """Lower-triangle (row, col) pairs in row order: (0,0), (1,0), (1,1), (2,0), ..."""
    return [(i, j) for i in range(n) for j in range(i + 1)]


@dataclass(frozen=True)
class GridSpec:
    """Uniform tensor-product grid.

    Periodic axes sample ``x_k = k h`` for ``k = 0..N-1`` with ``h = L/N``.
    Box axes include both boundary layers and are centred at the origin:
    ``x_k = (k - (N-1)/2) h`` with ``h = L/(N-1)``.
    """

    dim: int
    shape: tuple[int, ...]
    extent: tuple[float, ...]
    topology: str

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"dim must be >= 2, got {self.dim}")
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}, got {self.topology!r}")
        if len(self.shape) != self.dim or len(self.extent) != self.dim:
            raise ValueError("shape and extent must have one entry per dimension")
        if any(int(s) != s or s < 4 for s in self.shape):
            raise ValueError(f"every shape entry must be an integer >= 4, got {self.shape}")
        if any(not (e > 0 and math.isfinite(e)) for e in self.extent):
            raise ValueError(f"extent must be positive and finite, got {self.extent}")

    @property
    def periodic(self) -> bool:
        return self.topology == PERIODIC

    @property
    def spacing(self) -> tuple[float, ...]:
        if self.periodic:
            return tuple(e / s for e, s in zip(self.extent, self.shape))
        return tuple(e / (s - 1) for e, s in zip(self.extent, self.shape))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def axis_coords(self, axis: int) -> np.ndarray:
        n, h = self.shape[axis], self.spacing[axis]
        k = np.arange(n, dtype=float)
        if self.periodic:
            return k * h
        return (k - (n - 1) / 2.0) * h

    def coords(self) -> list[np.ndarray]:
        """Broadcastable coordinate arrays, one per axis (``ij`` indexing)."""
        out = []
        for a in range(self.dim):
            shp = [1] * self.dim
            shp[a] = self.shape[a]
            out.append(self.axis_coords(a).reshape(shp))
        return out

    def mesh(self) -> list[np.ndarray]:
        return [np.broadcast_to(c, self.shape) for c in self.coords()]

    def interior_mask(self) -> np.ndarray:
        """True on points not on a box boundary (all points for a torus)."""
        mask = np.ones(self.shape, dtype=bool)
        if self.periodic:
            return mask
        for a in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[a] = 0
            mask[tuple(idx)] = False
            idx[a] = -1
            mask[tuple(idx)] = False
        return mask

    def interior_slices(self) -> tuple[slice, ...]:
        if self.periodic:
            return (slice(None),) * self.dim
        return (slice(1, -1),) * self.dim

    def same_as(self, other: "GridSpec") -> bool:
        return (
            self.dim == other.dim
            and tuple(self.shape) == tuple(other.shape)
            and tuple(self.extent) == tuple(other.extent)
            and self.topology == other.topology
        )


def make_grid(dim: int, shape: Sequence[int], extent: Sequence[float] | float, topology: str = PERIODIC) -> GridSpec:
    """Build a validated :class:`GridSpec`.

    ``extent`` may be a scalar, in which case every axis gets the same length.

    >>> make_grid(2, [5, 5], [1, 1], "box").spacing
    (0.25, 0.25)
    """
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    if np.isscalar(extent):
        extent = [float(extent)] * dim
    shape = tuple(int(s) for s in shape)
    extent = tuple(float(e) for e in extent)
    return GridSpec(dim=int(dim), shape=shape, extent=extent, topology=topology)


def _frozen(values: np.ndarray, expected_shape: tuple[int, ...], what: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, order="C")
    if arr.shape != expected_shape:
        raise ValueError(f"{what}: expected values of shape {expected_shape}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{what}: values must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarField:
    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, self.grid.shape, "ScalarField"))

    kind = "scalar"

    def components(self) -> int:
        return 1

    def __add__(self, other: "ScalarField") -> "ScalarField":
        _check_same_grid(self.grid, other.grid)
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        _check_same_grid(self.grid, other.grid)
        return ScalarField(self.grid, self.values - other.values)

    @classmethod
    def constant(cls, grid: GridSpec, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "ScalarField":
        return cls(grid, np.broadcast_to(fn(*grid.coords()), grid.shape))


@dataclass(frozen=True)
class VectorField:
    grid: GridSpec
    values: np.ndarray = field(repr=False)

    kind = "vector"

    def __post_init__(self):
        shp = self.grid.shape + (self.grid.dim,)
        object.__setattr__(self, "values", _frozen(self.values, shp, "VectorField"))

    def components(self) -> int:
        return self.grid.dim


@dataclass(frozen=True)
class SymMatrixField:
    """Field of symmetric n x n matrices stored as the lower triangle, row order."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    kind = "symmat"

    def __post_init__(self):
        n = self.grid.dim
        shp = self.grid.shape + (n * (n + 1) // 2,)
        object.__setattr__(self, "values", _frozen(self.values, shp, "SymMatrixField"))

    def components(self) -> int:
        n = self.grid.dim
        return n * (n + 1) // 2

    def full(self) -> np.ndarray:
        return unpack_sym(self.values, self.grid.dim)

    @classmethod
    def from_full(cls, grid: GridSpec, mats: np.ndarray) -> "SymMatrixField":
        return cls(grid, pack_sym(np.asarray(mats, dtype=float), grid.dim))

    @classmethod
    def constant(cls, grid: GridSpec, matrix) -> "SymMatrixField":
        m = np.asarray(matrix, dtype=float)
        if m.ndim == 0:
            m = m * np.eye(grid.dim)
        if m.shape != (grid.dim, grid.dim):
            raise ValueError(f"constant matrix must be {grid.dim}x{grid.dim}")
        packed = pack_sym(m, grid.dim)
        return cls(grid, np.broadcast_to(packed, grid.shape + packed.shape))

    @classmethod
    def zeros(cls, grid: GridSpec) -> "SymMatrixField":
        return cls.constant(grid, 0.0)


def pack_sym(mats: np.ndarray, n: int) -> np.ndarray:
    return np.stack([mats[..., i, j] for i, j in tri_indices(n)], axis=-1)


def unpack_sym(packed: np.ndarray, n: int) -> np.ndarray:
    out = np.empty(packed.shape[:-1] + (n, n))
    for k, (i, j) in enumerate(tri_indices(n)):
        out[..., i, j] = packed[..., k]
        out[..., j, i] = packed[..., k]
    return out


def _check_same_grid(a: GridSpec, b: GridSpec) -> None:
    if not a.same_as(b):
        raise ValueError("fields live on different grids")


# --------------------------------------------------------------------------
# raw-array stencils (shared with the solvers' hot loops)


def d1(a: np.ndarray, axis: int, h: float, periodic: bool) -> np.ndarray:
    """Second-order first derivative along ``axis``; one-sided at box ends."""
    if periodic:
        return (np.roll(a, -1, axis) - np.roll(a, 1, axis)) / (2.0 * h)
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    out[1:-1] = (a[2:] - a[:-2]) / (2.0 * h)
    out[0] = (-3.0 * a[0] + 4.0 * a[1] - a[2]) / (2.0 * h)
    out[-1] = (3.0 * a[-1] - 4.0 * a[-2] + a[-3]) / (2.0 * h)
    return np.moveaxis(out, 0, axis)


def d2(a: np.ndarray, axis: int, h: float, periodic: bool) -> np.ndarray:
    """Second-order pure second derivative along ``axis``; 4-point one-sided at box ends."""
    h2 = h * h
    if periodic:
        return (np.roll(a, -1, axis) - 2.0 * a + np.roll(a, 1, axis)) / h2
    a = np.moveaxis(a, axis, 0)
    out = np.empty_like(a)
    out[1:-1] = (a[2:] - 2.0 * a[1:-1] + a[:-2]) / h2
    out[0] = (2.0 * a[0] - 5.0 * a[1] + 4.0 * a[2] - a[3]) / h2
    out[-1] = (2.0 * a[-1] - 5.0 * a[-2] + 4.0 * a[-3] - a[-4]) / h2
    return np.moveaxis(out, 0, axis)


def grad_array(a: np.ndarray, grid: GridSpec) -> np.ndarray:
    h = grid.spacing
    return np.stack([d1(a, k, h[k], grid.periodic) for k in range(grid.dim)], axis=-1)


def hessian_array(a: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Full (..., n, n) Hessian; mixed entries by nested central differences."""
    n, h, per = grid.dim, grid.spacing, grid.periodic
    out = np.empty(a.shape + (n, n))
    firsts = [d1(a, k, h[k], per) for k in range(n)]
    for i in range(n):
        out[..., i, i] = d2(a, i, h[i], per)
        for j in range(i):
            m = d1(firsts[j], i, h[i], per)
            out[..., i, j] = m
            out[..., j, i] = m
    return out


def schouten_array(u: np.ndarray, grid: GridSpec, S0_full: np.ndarray | None = None,
                   grad_u: np.ndarray | None = None) -> np.ndarray:
    """W(u) = D^2 u + du (x) du - |du|^2/2 I + S0 as a full (..., n, n) array."""
    g = grad_array(u, grid) if grad_u is None else grad_u
    W = hessian_array(u, grid)
    W += g[..., :, None] * g[..., None, :]
    half = 0.5 * np.einsum("...k,...k->...", g, g)
    idx = np.arange(grid.dim)
    W[..., idx, idx] -= half[..., None]
    if S0_full is not None:
        W += S0_full
    return W


# --------------------------------------------------------------------------
# field-level operations


def gradient(u: ScalarField) -> VectorField:
    return VectorField(u.grid, grad_array(u.values, u.grid))


def hessian(u: ScalarField) -> SymMatrixField:
    return SymMatrixField.from_full(u.grid, hessian_array(u.values, u.grid))


def metric_log_gradient(w: ScalarField) -> np.ndarray:
    """Gradient of ``w`` recovered from the sampled metric coefficient ``e^{-2w}``.

    This is what the Christoffel symbols of ``g_0 = e^{-2w} g_flat`` see when the
    connection is differentiated from the metric field itself: ``-(1/2) e^{2w} D(e^{-2w})``.
    It agrees with the plain stencil gradient of ``w`` up to O(h^2).
    """
    m = np.exp(-2.0 * w.values)
    return -0.5 * grad_array(m, w.grid) / m[..., None]


def conformal_schouten(u: ScalarField, S0: SymMatrixField, factor: ScalarField | None = None) -> SymMatrixField:
    """Schouten tensor of ``e^{-2u} g_0`` given the Schouten tensor ``S0`` of ``g_0``.

    Computes ``D^2 u + du (x) du - |du|^2/2 I + S0`` in the flat chart.  When
    ``factor`` is given, ``g_0 = e^{-2 factor} g_flat`` and the Hessian is taken
    covariantly with respect to ``g_0``, i.e. the Christoffel terms
    ``u_i w_j + w_i u_j - <du, dw> delta_ij`` are added.
    """
    _check_same_grid(u.grid, S0.grid)
    grid = u.grid
    gu = grad_array(u.values, grid)
    W = schouten_array(u.values, grid, S0.full(), grad_u=gu)
    if factor is not None:
        _check_same_grid(grid, factor.grid)
        gw = metric_log_gradient(factor)
        W += gu[..., :, None] * gw[..., None, :] + gw[..., :, None] * gu[..., None, :]
        dot = np.einsum("...k,...k->...", gu, gw)
        idx = np.arange(grid.dim)
        W[..., idx, idx] -= dot[..., None]
    return SymMatrixField.from_full(grid, W)


def background_from_factor(w: ScalarField) -> SymMatrixField:
    """Schouten tensor of ``g_0 = e^{-2w} g_flat``.

    Composition: if ``g = e^{-2u} g_0`` then ``g = e^{-2(u+w)} g_flat``, so
    ``conformal_schouten(u, background_from_factor(w), factor=w)`` matches
    ``conformal_schouten(u + w, zeros)``.
    """
    return conformal_schouten(w, SymMatrixField.zeros(w.grid))


def _cell_centres(v: np.ndarray) -> np.ndarray:
    # average of the 2^n corners of every box cell
    out = v
    for axis in range(v.ndim):
        a = np.moveaxis(out, axis, 0)
        out = np.moveaxis(0.5 * (a[1:] + a[:-1]), 0, axis)
    return out


def conformal_volume(v: ScalarField) -> float:
    """Volume of ``e^{-2v} g_flat`` over the grid's domain, midpoint rule.

    ``v`` is the total conformal factor relative to the flat metric.  Box grids
    use cell-centre values interpolated from the corners.
    """
    grid = v.grid
    vals = v.values if grid.periodic else _cell_centres(v.values)
    dens = np.exp(-grid.dim * vals)
    return math.fsum(np.sum(dens, axis=-1).ravel()) * grid.cell_volume

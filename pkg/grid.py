"""
Structured node-centered grids, fields, finite-difference operators,
quadrature, analytic interface shapes and field export.

Cartesian grids are 1D/2D/3D boxes. A radial grid is a 1D grid on [0, R]
standing for a spherically symmetric 3D problem: integrals carry the
shell volume, vectors keep only their radial component and tensors are
stored as [normal-normal, tangential] pairs.
"""
import hashlib
import math
import os
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import polars as pl
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

from config import QUAD_TOL


class ShapeMismatchError(ValueError):
    """Fields live on different grids or have the wrong array shape."""


class UnsupportedShapeError(ValueError):
    """The requested construction is not available for this interface shape."""


class QuadratureError(RuntimeError):
    """Surface quadrature did not settle; carries the last two estimates."""

    def __init__(self, message: str, estimates: tuple[float, float]):
        self.estimates = estimates
        super().__init__(message)


# ── Grid ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class StructuredGrid:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    cells: tuple[int, ...]
    radial: bool = False

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(x) for x in self.lower))
        object.__setattr__(self, "upper", tuple(float(x) for x in self.upper))
        object.__setattr__(self, "cells", tuple(int(n) for n in self.cells))
        if not (len(self.lower) == len(self.upper) == len(self.cells)) or not 1 <= len(self.cells) <= 3:
            raise ValueError("grid needs matching lower/upper/cells of dimension 1, 2 or 3")
        if any(n < 8 for n in self.cells):
            raise ValueError(f"grid needs at least 8 cells per axis, got {self.cells}")
        if any(u <= l for l, u in zip(self.lower, self.upper)):
            raise ValueError("grid box must have upper > lower on every axis")
        if self.radial and (len(self.cells) != 1 or self.lower[0] != 0.0):
            raise ValueError("radial grids are one-dimensional on [0, R]")

    @classmethod
    def box(cls, lower, upper, h: float, radial: bool = False) -> "StructuredGrid":
        """Grid whose spacing is at most h on every axis."""
        cells = [
            max(8, math.ceil((u - l) / h * (1.0 - 1e-12)))
            for l, u in zip(lower, upper)
        ]
        return cls(tuple(lower), tuple(upper), tuple(cells), radial)

    def for_xi(self, xi: float, h_over_xi: float) -> "StructuredGrid":
        """Same box, spacing at most h_over_xi * xi."""
        return StructuredGrid.box(self.lower, self.upper, h_over_xi * xi, self.radial)

    def refine(self, factor: int = 2) -> "StructuredGrid":
        return StructuredGrid(self.lower, self.upper, tuple(n * factor for n in self.cells), self.radial)

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def physical_dim(self) -> int:
        return 3 if self.radial else self.dim

    @property
    def ncomp(self) -> int:
        """Stored components of a vector field."""
        return 1 if self.radial else self.dim

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((u - l) / n for l, u, n in zip(self.lower, self.upper, self.cells))

    @property
    def h(self) -> float:
        return min(self.spacing)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(n + 1 for n in self.cells)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, u, n + 1) for l, u, n in zip(self.lower, self.upper, self.cells)]

    @cached_property
    def mesh(self) -> np.ndarray:
        """Node coordinates, shape S + (dim,)."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def physical_points(self) -> np.ndarray:
        """Node positions in physical space; radial nodes map to (r, 0, 0)."""
        if self.radial:
            r = self.axes()[0]
            return np.stack([r, np.zeros_like(r), np.zeros_like(r)], axis=-1)
        return self.mesh

    @property
    def radius(self) -> np.ndarray:
        return self.axes()[0]

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weight (dual-cell volume) per node."""
        if self.radial:
            r, h = self.axes()[0], self.spacing[0]
            r_minus = np.maximum(r - h / 2, 0.0)
            r_plus = np.minimum(r + h / 2, self.upper[0])
            return 4.0 * np.pi / 3.0 * (r_plus**3 - r_minus**3)
        w = np.ones(self.shape)
        for k, h in enumerate(self.spacing):
            wk = np.full(self.shape[k], h)
            wk[0] = wk[-1] = h / 2
            w = w * wk.reshape([-1 if j == k else 1 for j in range(self.dim)])
        return w

    @cached_property
    def face_base(self) -> list[np.ndarray]:
        """
        Per-axis coefficients c_f with (1/2) sum_f c_f (u_j - u_i)^2 the
        Dirichlet energy of u; shape of axis k is S with S[k] - 1.
        """
        if self.radial:
            r, h = self.axes()[0], self.spacing[0]
            r_face = 0.5 * (r[:-1] + r[1:])
            return [4.0 * np.pi * r_face**2 / h]
        faces = []
        for k, h in enumerate(self.spacing):
            transverse = self.weights.take(np.arange(self.shape[k] - 1), axis=k) / _axis_weight(self, k, trim=True)
            faces.append(transverse / h)
        return faces

    def boundary_mask(self) -> np.ndarray:
        """Dirichlet nodes: the box surface, or r = R for radial grids."""
        mask = np.zeros(self.shape, dtype=bool)
        if self.radial:
            mask[-1] = True
            return mask
        for k in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[k] = 0
            mask[tuple(idx)] = True
            idx[k] = -1
            mask[tuple(idx)] = True
        return mask

    def interior_mask(self, width: int = 2) -> np.ndarray:
        """Nodes at least `width` nodes away from the Dirichlet boundary."""
        mask = np.ones(self.shape, dtype=bool)
        if self.radial:
            mask[self.shape[0] - width:] = False
            return mask
        for k in range(self.dim):
            idx = [slice(None)] * self.dim
            idx[k] = slice(0, width)
            mask[tuple(idx)] = False
            idx[k] = slice(self.shape[k] - width, None)
            mask[tuple(idx)] = False
        return mask

    def describe(self) -> dict:
        return {
            "lower": list(self.lower), "upper": list(self.upper),
            "cells": list(self.cells), "radial": self.radial, "h": self.h,
        }


def _axis_weight(grid: StructuredGrid, k: int, trim: bool) -> np.ndarray:
    h = grid.spacing[k]
    wk = np.full(grid.shape[k], h)
    wk[0] = wk[-1] = h / 2
    if trim:
        wk = wk[:-1]
    return wk.reshape([-1 if j == k else 1 for j in range(grid.dim)])


# ── Fields ─────────────────────────────────────────────────────────────────

@dataclass(eq=False)
class ScalarField:
    grid: StructuredGrid
    values: np.ndarray
    grad_hint: np.ndarray | None = None     # exact gradient, vector-field layout
    lap_hint: np.ndarray | None = None      # exact Laplacian
    underresolved: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ShapeMismatchError(f"scalar values {self.values.shape} != grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    def strip(self) -> "ScalarField":
        """Same values without exact-derivative hints."""
        return ScalarField(self.grid, self.values.copy(), underresolved=self.underresolved)

    def digest(self) -> str:
        return field_digest(self.values)

    def with_values(self, values) -> "ScalarField":
        return ScalarField(self.grid, values)


@dataclass(eq=False)
class VectorField:
    grid: StructuredGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape + (self.grid.ncomp,):
            raise ShapeMismatchError(f"vector values {self.values.shape} do not fit the grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")


@dataclass(eq=False)
class TensorField:
    grid: StructuredGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = self.grid.shape + ((2,) if self.grid.radial else (self.grid.dim, self.grid.dim))
        if self.values.shape != expected:
            raise ShapeMismatchError(f"tensor values {self.values.shape} != {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")


def field_digest(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values, dtype=float).tobytes()).hexdigest()[:16]


# ── Finite differences ─────────────────────────────────────────────────────

def _d1(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    return np.gradient(values, h, axis=axis, edge_order=2)


def _d2(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second difference: 3-point interior, 4-point one-sided at the ends."""
    f = np.moveaxis(values, axis, 0)
    out = np.empty_like(f)
    out[1:-1] = f[2:] - 2.0 * f[1:-1] + f[:-2]
    out[0] = 2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]
    out[-1] = 2.0 * f[-1] - 5.0 * f[-2] + 4.0 * f[-3] - f[-4]
    return np.moveaxis(out / h**2, 0, axis)


def _over_r(grid: StructuredGrid, values: np.ndarray, at_origin: np.ndarray) -> np.ndarray:
    """values / r with the limit supplied at r = 0."""
    r = grid.radius
    with np.errstate(divide="ignore", invalid="ignore"):
        out = values / r
    out[0] = at_origin[0]
    return out


def gradient(f: ScalarField) -> VectorField:
    g = f.grid
    comps = [_d1(f.values, h, k) for k, h in enumerate(g.spacing)]
    return VectorField(g, np.stack(comps, axis=-1))


def divergence(v: VectorField) -> ScalarField:
    g = v.grid
    if g.radial:
        vr = v.values[..., 0]
        dv = _d1(vr, g.spacing[0], 0)
        return ScalarField(g, dv + 2.0 * _over_r(g, vr, dv))
    return ScalarField(g, sum(_d1(v.values[..., k], h, k) for k, h in enumerate(g.spacing)))


def tensor_divergence(T: TensorField) -> VectorField:
    """Row-wise divergence (div T)_i = d_j T_ij."""
    g = T.grid
    if g.radial:
        t_rr, t_tt = T.values[..., 0], T.values[..., 1]
        d_rr = _d1(t_rr, g.spacing[0], 0)
        d_tt = _d1(t_tt, g.spacing[0], 0)
        # T_rr = T_tt at the origin, so (T_rr - T_tt)/r -> d_rr - d_tt
        out = d_rr + 2.0 * _over_r(g, t_rr - t_tt, d_rr - d_tt)
        return VectorField(g, out[..., None])
    rows = [
        sum(_d1(T.values[..., i, j], g.spacing[j], j) for j in range(g.dim))
        for i in range(g.dim)
    ]
    return VectorField(g, np.stack(rows, axis=-1))


def laplacian(f: ScalarField) -> ScalarField:
    g = f.grid
    if g.radial:
        h = g.spacing[0]
        d2 = _d2(f.values, h, 0)
        d1 = _d1(f.values, h, 0)
        return ScalarField(g, d2 + 2.0 * _over_r(g, d1, d2))
    return ScalarField(g, sum(_d2(f.values, h, k) for k, h in enumerate(g.spacing)))


def integrate(f: ScalarField | np.ndarray, grid: StructuredGrid | None = None) -> float:
    """Node quadrature with the grid's dual-cell weights."""
    if isinstance(f, ScalarField):
        grid, values = f.grid, f.values
    else:
        values = np.asarray(f)
    return float(np.sum(grid.weights * values))


def contract(grid: StructuredGrid, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Nodewise A:B for tensors in the grid's layout."""
    if grid.radial:
        return A[..., 0] * B[..., 0] + 2.0 * A[..., 1] * B[..., 1]
    return np.einsum("...ij,...ij->...", A, B)


# ── Face-based Dirichlet forms ─────────────────────────────────────────────

def _face_pairs(grid: StructuredGrid):
    idx = np.arange(grid.size).reshape(grid.shape)
    for k in range(grid.dim):
        lo = idx.take(np.arange(grid.shape[k] - 1), axis=k)
        hi = idx.take(np.arange(1, grid.shape[k]), axis=k)
        yield k, lo, hi


def face_differences(grid: StructuredGrid, values: np.ndarray) -> list[np.ndarray]:
    return [np.diff(values, axis=k) for k in range(grid.dim)]


def stiffness(grid: StructuredGrid, face_coeff: list[np.ndarray] | None = None) -> sp.csr_matrix:
    """
    Sparse K with u^T K u = sum_f c_f (u_j - u_i)^2 over all faces;
    natural (no-flux) conditions on every node.
    """
    coeff = grid.face_base if face_coeff is None else face_coeff
    rows, cols, data = [], [], []
    for (k, lo, hi), c in zip(_face_pairs(grid), coeff):
        lo, hi, c = lo.ravel(), hi.ravel(), np.asarray(c).ravel()
        rows += [lo, hi, lo, hi]
        cols += [lo, hi, hi, lo]
        data += [c, c, -c, -c]
    K = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    )
    return K.tocsr()


def dirichlet_energy(grid: StructuredGrid, values: np.ndarray, face_coeff: list[np.ndarray] | None = None) -> float:
    """(1/2) sum_f c_f (u_j - u_i)^2."""
    coeff = grid.face_base if face_coeff is None else face_coeff
    return 0.5 * float(sum(np.sum(c * d**2) for c, d in zip(coeff, face_differences(grid, values))))


def harmonic_faces(grid: StructuredGrid, node_values: np.ndarray) -> list[np.ndarray]:
    """Harmonic mean of adjacent node values on every face."""
    out = []
    for k in range(grid.dim):
        a = node_values.take(np.arange(grid.shape[k] - 1), axis=k)
        b = node_values.take(np.arange(1, grid.shape[k]), axis=k)
        out.append(2.0 * a * b / (a + b))
    return out


def face_inside_fraction(shape: "InterfaceShape", grid: StructuredGrid) -> list[np.ndarray]:
    """Fraction of each face segment lying inside G (linear distance model)."""
    d = shape.signed_distance(grid.physical_points())
    out = []
    for k in range(grid.dim):
        lo = d.take(np.arange(grid.shape[k] - 1), axis=k)
        hi = d.take(np.arange(1, grid.shape[k]), axis=k)
        with np.errstate(divide="ignore", invalid="ignore"):
            crossing = np.maximum(lo, hi) / np.abs(lo - hi)
        theta = np.where((lo > 0) & (hi > 0), 1.0, np.where((lo <= 0) & (hi <= 0), 0.0, crossing))
        out.append(np.clip(theta, 0.0, 1.0))
    return out


def outside_fraction(shape: "InterfaceShape", grid: StructuredGrid) -> np.ndarray:
    """Fraction of each node's dual cell lying outside G."""
    if grid.radial and shape.kind == "ball":
        r, h = grid.radius, grid.spacing[0]
        r_minus = np.maximum(r - h / 2, 0.0)
        r_plus = np.minimum(r + h / 2, grid.upper[0])
        inside = 4.0 * np.pi / 3.0 * (np.clip(shape.radius, r_minus, r_plus) ** 3 - r_minus**3)
        return np.clip(1.0 - inside / grid.weights, 0.0, 1.0)
    d = shape.signed_distance(grid.physical_points())
    return np.clip(0.5 - d / grid.h, 0.0, 1.0)


# ── Interface shapes ───────────────────────────────────────────────────────

@dataclass(frozen=True)
class InterfaceShape:
    """
    Analytic sharp interface. G is the solute side; the signed distance is
    positive inside G and the normal points out of G.

    plane: G = {x . n < offset};  slab: G = {offset < x . n < upper};
    ball: G = {|x - center| < radius}.
    """
    kind: str
    normal: tuple[float, ...] = ()
    offset: float = 0.0
    upper: float = 0.0
    center: tuple[float, ...] = ()
    radius: float = 0.0

    @classmethod
    def plane(cls, normal, offset: float = 0.0) -> "InterfaceShape":
        n = np.asarray(normal, dtype=float)
        return cls("plane", tuple(n / np.linalg.norm(n)), float(offset))

    @classmethod
    def slab(cls, normal, lower: float, upper: float) -> "InterfaceShape":
        if upper <= lower:
            raise ValueError("slab needs upper > lower")
        n = np.asarray(normal, dtype=float)
        return cls("slab", tuple(n / np.linalg.norm(n)), float(lower), float(upper))

    @classmethod
    def ball(cls, center, radius: float) -> "InterfaceShape":
        if not radius > 0:
            raise ValueError("ball radius must be positive")
        return cls("ball", center=tuple(float(c) for c in center), radius=float(radius))

    def __post_init__(self):
        if self.kind not in ("plane", "slab", "ball"):
            raise UnsupportedShapeError(f"unknown interface kind '{self.kind}'")

    def describe(self) -> dict:
        if self.kind == "ball":
            return {"kind": "ball", "center": list(self.center), "radius": self.radius}
        out = {"kind": self.kind, "normal": list(self.normal), "offset": self.offset}
        if self.kind == "slab":
            out["upper"] = self.upper
        return out

    def _proj(self, points):
        return np.asarray(points, dtype=float) @ np.asarray(self.normal)

    def signed_distance(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if self.kind == "ball":
            c = np.asarray(self.center)[: points.shape[-1]]
            return self.radius - np.linalg.norm(points - c, axis=-1)
        s = self._proj(points)
        if self.kind == "plane":
            return self.offset - s
        return np.minimum(s - self.offset, self.upper - s)

    def normal_at(self, points) -> np.ndarray:
        """Outward unit normal of the nearest interface sheet."""
        points = np.asarray(points, dtype=float)
        if self.kind == "ball":
            diff = points - np.asarray(self.center)[: points.shape[-1]]
            r = np.linalg.norm(diff, axis=-1, keepdims=True)
            return np.divide(diff, r, out=np.zeros_like(diff), where=r > 0)
        n = np.broadcast_to(np.asarray(self.normal), points.shape).copy()
        if self.kind == "slab":
            s = self._proj(points)
            lower_side = (s - self.offset) < (self.upper - s)
            n[lower_side] *= -1.0
        return n

    def mean_curvature(self) -> float:
        """Average of the principal curvatures (positive for a convex G)."""
        return 1.0 / self.radius if self.kind == "ball" else 0.0

    def distance_derivatives(self, grid: StructuredGrid):
        """(d, grad d, laplacian d) at the nodes, in the grid's layout."""
        d = self.signed_distance(grid.physical_points())
        n = grid.physical_dim
        if grid.radial:
            if self.kind != "ball":
                raise UnsupportedShapeError("radial grids support ball interfaces only")
            r = np.maximum(grid.radius, 0.5 * grid.h)
            return d, -np.ones(grid.shape + (1,)), -(n - 1) / r
        nu = self.normal_at(grid.mesh)
        if self.kind == "ball":
            r = np.maximum(self.radius - d, 0.5 * grid.h)
            return d, -nu, -(n - 1) / r
        return d, -nu, np.zeros(grid.shape)

    def _plane_axis(self) -> int:
        n = np.asarray(self.normal)
        k = int(np.argmax(np.abs(n)))
        if not np.isclose(abs(n[k]), 1.0):
            raise UnsupportedShapeError("only axis-aligned planes have box-clipped measures")
        return k

    def perimeter(self, grid: StructuredGrid) -> float:
        """Area (n = 3), length (n = 2) or point count (n = 1) of the interface in the box."""
        n = grid.physical_dim
        if self.kind == "ball":
            if n == 2:
                return 2.0 * np.pi * self.radius
            if n == 3:
                return 4.0 * np.pi * self.radius**2
            raise UnsupportedShapeError("balls need a 2D, 3D or radial grid")
        if grid.radial:
            raise UnsupportedShapeError("radial grids support ball interfaces only")
        k = self._plane_axis()
        cross = float(np.prod([u - l for j, (l, u) in enumerate(zip(grid.lower, grid.upper)) if j != k]))
        return cross * (2.0 if self.kind == "slab" else 1.0)

    def volume(self, grid: StructuredGrid) -> float:
        """|G| inside the box."""
        n = grid.physical_dim
        if self.kind == "ball":
            if n == 2:
                return np.pi * self.radius**2
            if n == 3:
                return 4.0 * np.pi / 3.0 * self.radius**3
            raise UnsupportedShapeError("balls need a 2D, 3D or radial grid")
        k = self._plane_axis()
        cross = self.perimeter(grid) / (2.0 if self.kind == "slab" else 1.0)
        sign = np.sign(self.normal[k])
        if self.kind == "slab":
            return cross * (self.upper - self.offset)
        if sign > 0:
            return cross * (self.offset - grid.lower[k])
        return cross * (grid.upper[k] + self.offset)

    def check_inside(self, grid: StructuredGrid) -> None:
        """Balls must sit strictly inside the box; planes must cut it."""
        if self.kind == "ball":
            if grid.radial:
                if any(c != 0.0 for c in self.center) or self.radius >= grid.upper[0]:
                    raise ValueError("radial ball must be centered at 0 with radius < R")
                return
            c = np.asarray(self.center)
            if c.shape != (grid.dim,) or np.any(c - self.radius <= grid.lower) or np.any(c + self.radius >= grid.upper):
                raise ValueError(f"ball {self.center}, R={self.radius} is not interior to the box")
            return
        if grid.radial:
            raise UnsupportedShapeError("radial grids support ball interfaces only")
        k = self._plane_axis()
        sign = np.sign(self.normal[k])
        levels = [self.offset] + ([self.upper] if self.kind == "slab" else [])
        for level in levels:
            x = sign * level
            if not grid.lower[k] < x < grid.upper[k]:
                raise ValueError(f"{self.kind} level {level} does not cut the box")


def signed_distance_field(shape: InterfaceShape, grid: StructuredGrid) -> ScalarField:
    d, grad_d, lap_d = shape.distance_derivatives(grid)
    return ScalarField(grid, d, grad_hint=grad_d, lap_hint=lap_d)


# ── Surface quadrature ─────────────────────────────────────────────────────

def _gauss(m: int, a: float, b: float):
    x, w = np.polynomial.legendre.leggauss(m)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


def surface_nodes(shape: InterfaceShape, grid: StructuredGrid, m: int):
    """Quadrature points, outward normals and weights on the interface."""
    n = grid.physical_dim
    if shape.kind == "ball":
        c = np.zeros(n) if grid.radial else np.asarray(shape.center)
        R = shape.radius
        if n == 3:
            mu, w_mu = _gauss(m, -1.0, 1.0)
            phi, w_phi = _gauss(2 * m, 0.0, 2.0 * np.pi)
            MU, PHI = np.meshgrid(mu, phi, indexing="ij")
            s = np.sqrt(1.0 - MU**2)
            nu = np.stack([s * np.cos(PHI), s * np.sin(PHI), MU], axis=-1).reshape(-1, 3)
            w = (np.outer(w_mu, w_phi) * R**2).ravel()
        elif n == 2:
            phi, w_phi = _gauss(2 * m, 0.0, 2.0 * np.pi)
            nu = np.stack([np.cos(phi), np.sin(phi)], axis=-1)
            w = w_phi * R
        else:
            raise UnsupportedShapeError("balls need a 2D, 3D or radial grid")
        return c + R * nu, nu, w
    if grid.radial:
        raise UnsupportedShapeError("radial grids support ball interfaces only")
    k = shape._plane_axis()
    sign = float(np.sign(shape.normal[k]))
    sheets = [(shape.offset, sign)] if shape.kind == "plane" else [(shape.offset, -sign), (shape.upper, sign)]
    transverse = [j for j in range(n) if j != k]
    grids_1d = [_gauss(m, grid.lower[j], grid.upper[j]) for j in transverse]
    if grids_1d:
        coords = np.meshgrid(*[g[0] for g in grids_1d], indexing="ij")
        weights = np.ones_like(coords[0])
        for j, g in enumerate(grids_1d):
            weights = weights * g[1].reshape([-1 if i == j else 1 for i in range(len(grids_1d))])
        coords = [c.ravel() for c in coords]
        weights = weights.ravel()
    else:
        coords, weights = [], np.ones(1)
    pts, nus, ws = [], [], []
    for level, out_sign in sheets:
        p = np.zeros((weights.size, n))
        for j, c in zip(transverse, coords):
            p[:, j] = c
        p[:, k] = sign * level
        nu = np.zeros_like(p)
        nu[:, k] = out_sign
        pts.append(p)
        nus.append(nu)
        ws.append(weights)
    return np.concatenate(pts), np.concatenate(nus), np.concatenate(ws)


def surface_integral(
    shape: InterfaceShape,
    integrand,
    grid: StructuredGrid,
    tol: float = QUAD_TOL,
    order: int = 8,
    max_order: int = 512,
) -> float:
    """
    Integral over the interface of integrand(points, normals) -> values,
    by tensor Gauss-Legendre with the order doubled until two successive
    values agree to `tol` (relative to max(1, |value|)); QuadratureError
    when they still disagree at `max_order`.
    """
    def evaluate(m):
        pts, nu, w = surface_nodes(shape, grid, m)
        return float(np.sum(w * np.asarray(integrand(pts, nu), dtype=float)))

    previous = evaluate(order)
    while order < max_order:
        order *= 2
        current = evaluate(order)
        if abs(current - previous) <= tol * max(1.0, abs(current)):
            return current
        if order >= max_order:
            raise QuadratureError(
                f"surface quadrature not converged at order {order}: "
                f"{previous:.12g} vs {current:.12g}", (previous, current)
            )
        previous = current
    raise QuadratureError(f"max_order {max_order} leaves no room to refine order {order}", (previous, previous))


# ── Interpolation ──────────────────────────────────────────────────────────

def sample(values: np.ndarray, grid: StructuredGrid, points: np.ndarray) -> np.ndarray:
    """Linear interpolation of node values at arbitrary grid-coordinate points."""
    points = np.asarray(points, dtype=float)
    if grid.dim == 1:
        return np.interp(points[..., 0], grid.axes()[0], values)
    interp = RegularGridInterpolator(grid.axes(), values, bounds_error=False, fill_value=None)
    return interp(points)


def resample(f: ScalarField, target: StructuredGrid) -> ScalarField:
    if f.grid.radial != target.radial or f.grid.dim != target.dim:
        raise ShapeMismatchError("cannot resample between different grid kinds")
    return ScalarField(target, sample(f.values, f.grid, target.mesh))


# ── Export ─────────────────────────────────────────────────────────────────

def atomic_write(path: str, write) -> None:
    """Call write(tmp_path) then move the result into place."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    write(tmp)
    os.replace(tmp, path)


def field_frame(field, config_hash: str = "") -> pl.DataFrame:
    """Flat table: node indices, coordinates, value column(s)."""
    grid = field.grid
    idx = np.indices(grid.shape).reshape(grid.dim, -1)
    coords = grid.mesh.reshape(-1, grid.dim)
    columns = {f"i{k}": idx[k] for k in range(grid.dim)}
    columns |= {("r" if grid.radial else f"x{k}"): coords[:, k] for k in range(grid.dim)}
    values = field.values.reshape(grid.size, -1)
    if values.shape[1] == 1:
        columns["value"] = values[:, 0]
    else:
        columns |= {f"v{c}": values[:, c] for c in range(values.shape[1])}
    frame = pl.DataFrame(columns)
    if config_hash:
        frame = frame.with_columns(pl.lit(config_hash).alias("config_hash"))
    return frame


def write_csv(field, path: str, config_hash: str = "") -> None:
    frame = field_frame(field, config_hash)
    atomic_write(path, frame.write_csv)


FIELD_MAGIC = b"SOLVFLD1"
FIELD_VERSION = 1
HEADER_DTYPE = np.dtype([
    ("magic", "S8"),
    ("version", "<u2"),
    ("ndim", "<u2"),
    ("ncomp", "<u2"),
    ("dtype", "S2"),
    ("shape", "<u4", (3,)),
    ("config_hash", "S16"),
    ("pad", "S20"),
])
assert HEADER_DTYPE.itemsize == 64


def write_binary(field, path: str, config_hash: str = "") -> None:
    """64-byte header followed by little-endian float64 node values."""
    grid = field.grid
    values = np.ascontiguousarray(field.values, dtype="<f8")
    ncomp = int(np.prod(values.shape[grid.dim:])) if values.ndim > grid.dim else 1
    header = np.zeros(1, dtype=HEADER_DTYPE)
    header["magic"] = FIELD_MAGIC
    header["version"] = FIELD_VERSION
    header["ndim"] = grid.dim
    header["ncomp"] = ncomp
    header["dtype"] = b"f8"
    header["shape"][0, : grid.dim] = grid.shape
    header["config_hash"] = config_hash.encode()[:16]

    def write(tmp):
        with open(tmp, "wb") as f:
            f.write(header.tobytes())
            f.write(values.tobytes())

    atomic_write(path, write)


def read_binary(path: str) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    header = np.frombuffer(raw[:64], dtype=HEADER_DTYPE)[0]
    if header["magic"] != FIELD_MAGIC:
        raise ValueError(f"{path} is not a field file")
    ndim, ncomp = int(header["ndim"]), int(header["ncomp"])
    shape = tuple(int(n) for n in header["shape"][:ndim])
    values = np.frombuffer(raw[64:], dtype="<f8").reshape(shape + ((ncomp,) if ncomp > 1 else ()))
    meta = {
        "version": int(header["version"]),
        "ndim": ndim,
        "ncomp": ncomp,
        "shape": shape,
        "config_hash": header["config_hash"].decode(),
    }
    return meta, values.copy()

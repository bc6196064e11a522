"""
One-dimensional interface profiles and their lifts to grid fields.

Three kinds of profile s -> g(s), with s the signed distance to the
interface (positive inside the solute):

    canonical  exact equi-partition profile g = 1/(1 + exp(-6 s / xi))
    gk         inverse of q(t) = int_0^t xi / sqrt(2 (W(tau)/a + xi)) dtau
               on [0, lambda], extended by 0 below and 1 above
    clamped    canonical profile rescaled onto the collar [0, sqrt(xi)]
               inside the solute; zero outside (recovery construction)
"""
import math
from dataclasses import dataclass, field

import numpy as np
import polars as pl
from scipy.integrate import cumulative_simpson, quad
from scipy.interpolate import PchipInterpolator
from scipy.special import expit

from config import PROFILE_NODES, UNDERRESOLVED_H_OVER_XI, XI0
from grid import InterfaceShape, ScalarField, StructuredGrid, atomic_write, outside_fraction
from model import eval_W, eval_W_prime

PROFILE_KINDS = ("canonical", "gk", "clamped")


class ProfileConstructionError(RuntimeError):
    """The tabulated q is not strictly increasing or violates its bounds."""


class ShapeTooSmallError(ValueError):
    """The solute cannot hold the sqrt(xi) collar of the recovery construction."""


@dataclass(frozen=True)
class ProfileSpec:
    xi: float
    well_scale: float = 1.0
    kind: str = "canonical"

    def __post_init__(self):
        if not 0.0 < self.xi <= XI0:
            raise ValueError(f"xi must lie in (0, {XI0}], got {self.xi}")
        if not self.well_scale > 0:
            raise ValueError(f"well scale must be positive, got {self.well_scale}")
        if self.kind not in PROFILE_KINDS:
            raise ValueError(f"Unknown profile kind: {self.kind}")


@dataclass(frozen=True)
class Profile:
    spec: ProfileSpec
    width: float                                  # support length (inf for canonical)
    q_nodes: np.ndarray | None = field(default=None, repr=False)
    t_nodes: np.ndarray | None = field(default=None, repr=False)
    _inverse: PchipInterpolator | None = field(default=None, repr=False)

    @property
    def xi(self) -> float:
        return self.spec.xi

    @property
    def kind(self) -> str:
        return self.spec.kind

    # ── pointwise evaluation ──────────────────────────────────────────────

    def value(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        xi = self.xi
        match self.kind:
            case "canonical":
                return expit(6.0 * s / xi)
            case "gk":
                inner = self._inverse(np.clip(s, 0.0, self.width))
                return np.where(s <= 0.0, 0.0, np.where(s >= self.width, 1.0, np.clip(inner, 0.0, 1.0)))
            case "clamped":
                g0, scale, half = self._collar()
                inner = (expit(6.0 * (s - half) / xi) - g0) / scale
                return np.where(s <= 0.0, 0.0, np.where(s >= self.width, 1.0, inner))

    def derivative(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        xi = self.xi
        match self.kind:
            case "canonical":
                g = expit(6.0 * s / xi)
                return 6.0 / xi * g * (1.0 - g)
            case "gk":
                g = self.value(s)
                slope = np.sqrt(2.0 * (eval_W(g) / self.spec.well_scale + xi)) / xi
                return np.where((s > 0.0) & (s < self.width), slope, 0.0)
            case "clamped":
                g0, scale, half = self._collar()
                g = expit(6.0 * (s - half) / xi)
                slope = 6.0 / xi * g * (1.0 - g) / scale
                return np.where((s > 0.0) & (s < self.width), slope, 0.0)

    def second_derivative(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        xi = self.xi
        match self.kind:
            case "canonical":
                return eval_W_prime(expit(6.0 * s / xi)) / xi**2
            case "gk":
                g = self.value(s)
                curv = eval_W_prime(g) / (self.spec.well_scale * xi**2)
                return np.where((s > 0.0) & (s < self.width), curv, 0.0)
            case "clamped":
                g0, scale, half = self._collar()
                g = expit(6.0 * (s - half) / xi)
                curv = eval_W_prime(g) / xi**2 / scale
                return np.where((s > 0.0) & (s < self.width), curv, 0.0)

    def _collar(self):
        half = 0.5 * math.sqrt(self.xi)
        g0 = float(expit(-6.0 * half / self.xi))
        g1 = float(expit(6.0 * half / self.xi))
        return g0, g1 - g0, half

    # ── diagnostics ───────────────────────────────────────────────────────

    def q(self, t) -> np.ndarray:
        """The tabulated q of a gk profile."""
        if self.kind != "gk":
            raise ValueError("q is defined for gk profiles only")
        return np.interp(t, self.t_nodes, self.q_nodes)

    def ode_residual(self, s) -> np.ndarray:
        """xi g' - sqrt(2 W(g)) for the canonical profile."""
        g = self.value(s)
        return self.xi * self.derivative(s) - np.sqrt(2.0 * eval_W(g))

    def line_energy(self) -> float:
        """int [xi/2 g'^2 + W(g)/xi] ds across the interface."""
        xi, a = self.xi, self.spec.well_scale
        match self.kind:
            case "canonical":
                # substitute t = g(s); the integrand becomes 6 t (1 - t)
                value, _ = quad(lambda t: 6.0 * t * (1.0 - t), 0.0, 1.0)
                return value
            case "gk":
                def integrand(t):
                    root = math.sqrt(2.0 * (float(eval_W(t)) / a + xi))
                    return 0.5 * root + float(eval_W(t)) / root
                value, _ = quad(integrand, 0.0, 1.0, epsabs=1e-13, epsrel=1e-12)
                return value
            case "clamped":
                def integrand(s):
                    g = float(self.value(s))
                    return 0.5 * xi * float(self.derivative(s)) ** 2 + float(eval_W(g)) / xi
                value, _ = quad(integrand, 0.0, self.width, points=[0.5 * self.width], limit=200)
                return value

    def tabulate(self, n: int = PROFILE_NODES) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "canonical":
            s = np.linspace(-4.0 * self.xi, 4.0 * self.xi, n)
        else:
            pad = 0.1 * self.width
            s = np.linspace(-pad, self.width + pad, n)
        return s, self.value(s)

    def export_csv(self, path: str, n: int = PROFILE_NODES, config_hash: str = "") -> None:
        s, g = self.tabulate(n)
        frame = pl.DataFrame({"s": s, "g": g})
        if config_hash:
            frame = frame.with_columns(pl.lit(config_hash).alias("config_hash"))
        atomic_write(path, frame.write_csv)


# ── Builders ───────────────────────────────────────────────────────────────

def canonical_profile(xi: float) -> Profile:
    return Profile(ProfileSpec(xi, 1.0, "canonical"), width=math.inf)


def gk_profile(xi: float, a: float = 1.0, nodes: int = PROFILE_NODES) -> Profile:
    spec = ProfileSpec(xi, a, "gk")
    t = np.linspace(0.0, 1.0, nodes)
    integrand = xi / np.sqrt(2.0 * (eval_W(t) / a + xi))
    q = cumulative_simpson(integrand, x=t, initial=0.0)

    if not np.all(np.diff(q) > 0):
        raise ProfileConstructionError(f"q is not strictly increasing for xi={xi}, a={a}")
    width = float(q[-1])
    if not 0.0 < width < math.sqrt(xi / 2.0):
        raise ProfileConstructionError(
            f"transition width {width:.6g} outside (0, sqrt(xi/2)) for xi={xi}, a={a}"
        )
    return Profile(spec, width=width, q_nodes=q, t_nodes=t, _inverse=PchipInterpolator(q, t))


def clamped_profile(xi: float) -> Profile:
    return Profile(ProfileSpec(xi, 1.0, "clamped"), width=math.sqrt(xi))


def make_profile(kind: str, xi: float, a: float = 1.0) -> Profile:
    match kind:
        case "canonical":
            return canonical_profile(xi)
        case "gk":
            return gk_profile(xi, a)
        case "clamped":
            return clamped_profile(xi)
    raise ValueError(f"Unknown profile kind: {kind}")


def beta_limit(a: float) -> float:
    """Limit line energy (1 + a) / (2 sqrt(a)) of gk profiles with well W/a."""
    if not a > 0:
        raise ValueError(f"well scale must be positive, got {a}")
    return (1.0 + a) / (2.0 * math.sqrt(a))


# ── Lifts ──────────────────────────────────────────────────────────────────

def lift_profile(profile: Profile, shape: InterfaceShape, grid: StructuredGrid) -> ScalarField:
    """phi(x) = g(d(x)) with exact gradient and Laplacian hints."""
    d, grad_d, lap_d = shape.distance_derivatives(grid)
    g1 = profile.derivative(d)
    g2 = profile.second_derivative(d)
    grad = g1[..., None] * grad_d
    lap = g2 * np.sum(grad_d**2, axis=-1) + g1 * lap_d

    underresolved = grid.h > UNDERRESOLVED_H_OVER_XI * profile.xi * (1.0 + 1e-12)
    if underresolved:
        print(
            f"[profiles] warning: h={grid.h:.4g} does not resolve xi={profile.xi:.4g} "
            f"(need h <= {UNDERRESOLVED_H_OVER_XI} xi)",
            flush=True,
        )
    return ScalarField(grid, profile.value(d), grad_hint=grad, lap_hint=lap, underresolved=underresolved)


def check_collar_fits(shape: InterfaceShape, xi: float) -> None:
    collar = math.sqrt(xi)
    if shape.kind == "ball" and shape.radius < collar:
        raise ShapeTooSmallError(f"ball radius {shape.radius} < sqrt(xi) = {collar:.4g}")
    if shape.kind == "slab" and shape.upper - shape.offset < 2.0 * collar:
        raise ShapeTooSmallError(f"slab thickness {shape.upper - shape.offset} < 2 sqrt(xi)")


def recovery_phase_field(shape: InterfaceShape, xi: float, grid: StructuredGrid) -> ScalarField:
    """
    Recovery field: 1 on the eroded set {d >= sqrt(xi)}, 0 outside G,
    clamped canonical profile across the collar in between.
    """
    check_collar_fits(shape, xi)
    return lift_profile(clamped_profile(xi), shape, grid)


# ── Distances to the sharp indicator ───────────────────────────────────────

def lq_distance(phi: ScalarField, shape: InterfaceShape, q: float = 1.0) -> float:
    """(int |phi - chi_G|^q)^(1/q), splitting each dual cell at the interface."""
    grid = phi.grid
    out = outside_fraction(shape, grid)
    local = (1.0 - out) * np.abs(phi.values - 1.0) ** q + out * np.abs(phi.values) ** q
    return float(np.sum(grid.weights * local)) ** (1.0 / q)


def l1_distance(phi: ScalarField, shape: InterfaceShape) -> float:
    return lq_distance(phi, shape, 1.0)

"""
Free-energy assembly: the four terms of F_xi[phi], the sharp F_0[chi_G],
the eta-transform and equi-partition diagnostics.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.integrate import quad

from grid import InterfaceShape, ScalarField, StructuredGrid, dirichlet_energy, gradient, outside_fraction
from model import SolvationModel, eval_U, eval_W

INFINITE_ENERGY = math.inf


class ConsistencyError(ValueError):
    """Inputs belong to different states (stale PB solution, broken self-check)."""


@dataclass
class EnergyBreakdown:
    volume_term: float
    surface_term: float
    vdw_term: float
    ele_term: float
    total: float
    xi: float | None = None          # None for the sharp functional
    discrepancy_L1: float = 0.0
    u_cap: float | None = None

    def as_row(self) -> dict:
        row = asdict(self)
        row["xi"] = "sharp" if self.xi is None else self.xi
        return row

    def components(self) -> dict:
        return {
            "volume": self.volume_term,
            "surface": self.surface_term,
            "vdw": self.vdw_term,
            "ele": self.ele_term,
        }


def nodal_gradient(phi: ScalarField) -> np.ndarray:
    """Exact gradient when the field carries one, finite differences otherwise."""
    return phi.grad_hint if phi.grad_hint is not None else gradient(phi).values


def sampled_U(grid: StructuredGrid, model: SolvationModel) -> np.ndarray:
    return eval_U(grid.physical_points(), model.atoms, model.u_max)


# ── Terms of F_xi ──────────────────────────────────────────────────────────

def volume_term(phi: ScalarField, P0: float) -> float:
    return P0 * float(np.sum(phi.grid.weights * phi.values**2))


def gradient_energy(phi: ScalarField, use_hint: bool = True) -> float:
    """1/2 int |grad phi|^2; the face Dirichlet form unless an exact gradient is attached."""
    if use_hint and phi.grad_hint is not None:
        return 0.5 * float(np.sum(phi.grid.weights * np.sum(phi.grad_hint**2, axis=-1)))
    return dirichlet_energy(phi.grid, phi.values)


def surface_term(phi: ScalarField, xi: float, gamma0: float, use_hint: bool = True) -> float:
    well = float(np.sum(phi.grid.weights * eval_W(phi.values)))
    return gamma0 * (xi * gradient_energy(phi, use_hint) + well / xi)


def vdw_term(phi: ScalarField, model: SolvationModel, U: np.ndarray | None = None) -> float:
    U = sampled_U(phi.grid, model) if U is None else U
    return model.params.rho0 * float(np.sum(phi.grid.weights * (phi.values - 1.0) ** 2 * U))


def discrepancy(phi: ScalarField, xi: float) -> tuple[ScalarField, float]:
    """Pointwise xi/2 |grad phi|^2 - W(phi)/xi and its L1 norm."""
    grad = nodal_gradient(phi)
    field = 0.5 * xi * np.sum(grad**2, axis=-1) - eval_W(phi.values) / xi
    return ScalarField(phi.grid, field), float(np.sum(phi.grid.weights * np.abs(field)))


def total_F_xi(phi: ScalarField, xi: float, model: SolvationModel, pb_solution=None,
               use_hint: bool = True, U: np.ndarray | None = None) -> EnergyBreakdown:
    """Full breakdown of F_xi[phi]; the PB solution must have been computed for this phi."""
    if pb_solution is not None:
        if pb_solution.problem.phi is None or pb_solution.phi_digest != phi.digest():
            raise ConsistencyError("PB solution was computed for a different phase field")
        ele = pb_solution.free_energy
    elif model.has_electrostatics:
        raise ConsistencyError("charged solute needs a PB solution for the electrostatic term")
    else:
        ele = 0.0
    p = model.params
    vol = volume_term(phi, p.P0)
    sur = surface_term(phi, xi, p.gamma0, use_hint)
    vdw = vdw_term(phi, model, U)
    _, disc = discrepancy(phi, xi)
    return EnergyBreakdown(vol, sur, vdw, ele, vol + sur + vdw + ele, xi, disc, model.u_max)


def discrete_energy(phi: ScalarField, xi: float, model: SolvationModel, ele: float = 0.0,
                    U: np.ndarray | None = None) -> EnergyBreakdown:
    """The fully discrete functional minimized by the gradient flow."""
    p = model.params
    vol = volume_term(phi, p.P0)
    sur = surface_term(phi, xi, p.gamma0, use_hint=False)
    vdw = vdw_term(phi, model, U)
    return EnergyBreakdown(vol, sur, vdw, ele, vol + sur + vdw + ele, xi, 0.0, model.u_max)


# ── Sharp functional ───────────────────────────────────────────────────────

def sharp_vdw_integral(shape: InterfaceShape, grid: StructuredGrid, model: SolvationModel) -> float:
    """rho0 int_{Omega \\ G} U, +inf if an atom is not inside G."""
    for atom in model.atoms:
        if atom.lj_energy == 0:
            continue
        position = np.asarray(atom.position)
        if grid.radial:
            inside = np.linalg.norm(position) < shape.radius
        else:
            inside = float(shape.signed_distance(position[None, :])[0]) > 0
        if not inside:
            return INFINITE_ENERGY
    if not model.atoms:
        return 0.0
    rho0 = model.params.rho0
    if grid.radial:
        def integrand(r):
            u = float(eval_U(np.array([[r, 0.0, 0.0]]), model.atoms, model.u_max)[0])
            return u * 4.0 * math.pi * r**2
        value, _ = quad(integrand, shape.radius, grid.upper[0], epsabs=1e-13, epsrel=1e-11, limit=400)
        return rho0 * value
    out = outside_fraction(shape, grid)
    return rho0 * float(np.sum(grid.weights * out * sampled_U(grid, model)))


def total_F_0(shape: InterfaceShape, grid: StructuredGrid, model: SolvationModel,
              sharp_solution=None) -> EnergyBreakdown:
    """P0 |G| + gamma0 Per(G) + rho0 int_{Omega \\ G} U + F_ele[chi_G]."""
    p = model.params
    vol = p.P0 * shape.volume(grid)
    sur = p.gamma0 * shape.perimeter(grid)
    vdw = sharp_vdw_integral(shape, grid, model)
    ele = sharp_solution.free_energy if sharp_solution is not None else 0.0
    return EnergyBreakdown(vol, sur, vdw, ele, vol + sur + vdw + ele, None, 0.0, model.u_max)


# ── eta-transform ──────────────────────────────────────────────────────────

def eta(phi):
    """int_0^phi sqrt(2 W(t)) dt in closed form."""
    phi = np.asarray(phi, dtype=float)
    middle = 3.0 * phi**2 - 2.0 * phi**3
    return np.where(phi < 0.0, -middle, np.where(phi > 1.0, 2.0 - middle, middle))


def eta_prime(phi):
    phi = np.asarray(phi, dtype=float)
    return 6.0 * np.abs(phi * (1.0 - phi))


def eta_transform(phi: ScalarField) -> ScalarField:
    grad = eta_prime(phi.values)[..., None] * nodal_gradient(phi)
    return ScalarField(phi.grid, eta(phi.values), grad_hint=grad)


def eta_variation(phi: ScalarField) -> float:
    """int |grad eta(phi)|."""
    grad = nodal_gradient(phi)
    return float(np.sum(phi.grid.weights * eta_prime(phi.values) * np.linalg.norm(grad, axis=-1)))


def cauchy_schwarz_split(phi: ScalarField, xi: float) -> dict:
    """
    With a = sqrt(xi/2)|grad phi| and b = sqrt(W/xi): the surface density is
    a^2 + b^2 and |grad eta| = 2ab. Reports both integrals and the bound
    |int (a^2 + b^2) - int 2ab| <= int |a - b| (a + b).
    """
    w = phi.grid.weights
    a = math.sqrt(xi / 2.0) * np.linalg.norm(nodal_gradient(phi), axis=-1)
    b = np.sqrt(eval_W(phi.values) / xi)
    density = float(np.sum(w * (a**2 + b**2)))
    variation = float(np.sum(w * 2.0 * a * b))
    remainder = abs(density - variation)
    bound = float(np.sum(w * np.abs(a - b) * (a + b)))
    return {
        "surface_density": density,
        "eta_variation": variation,
        "remainder": remainder,
        "bound": bound,
        "holds": bool(variation <= density * (1 + 1e-12) and remainder <= bound * (1 + 1e-12) + 1e-14),
    }


def coercivity_margin(breakdown: EnergyBreakdown, phi: ScalarField, c3: float, c4: float) -> float:
    """total - [c3 (||phi||_H1^2 + ||phi||_4^4) - c4]; negative flags a violated lower bound."""
    w = phi.grid.weights
    h1_sq = float(np.sum(w * phi.values**2)) + 2.0 * gradient_energy(phi)
    l4 = float(np.sum(w * phi.values**4))
    return breakdown.total - (c3 * (h1_sq + l4) - c4)

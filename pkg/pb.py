"""
Nonlinear Poisson-Boltzmann solver on structured grids.

The discrete problem minimizes

    E_h(u) = 1/2 u^T K u - sum_i w_i rho_i u_i + sum_i m_i B(u_i)

over node values with u = psi_inf on the Dirichlet nodes. K is the
face-based stiffness with permittivity eps_f on each face and m_i the
ion-accessible volume of node i: w_i (phi_i - 1)^2 in diffuse form, the
dual-cell volume outside G in sharp form.
"""
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.integrate import quad
from scipy.sparse.linalg import spsolve
from scipy.special import erf, erfc

from config import C_BOUND, MAX_HALVINGS, MAX_NEWTON, PB_TOL
from grid import (
    InterfaceShape, ScalarField, ShapeMismatchError, StructuredGrid, dirichlet_energy, face_inside_fraction,
    gradient, harmonic_faces, outside_fraction, sample, stiffness,
)
from model import (
    SolvationModel, debye_kappa, eval_B, eval_B_prime, eval_B_second, eval_eps,
    smeared_charge_density,
)

BOUNDARY_KINDS = ("zero", "screened")


class AdmissibilityError(ValueError):
    """A trial potential does not take the boundary values psi_inf."""


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, residual_history: list[float]):
        self.residual_history = list(residual_history)
        super().__init__(message)


class BoundViolationError(AssertionError):
    """max |psi| off the solute exceeds the configured cap."""


# ── Problem ────────────────────────────────────────────────────────────────

@dataclass(eq=False)
class PBProblem:
    grid: StructuredGrid
    model: SolvationModel
    eps_faces: list[np.ndarray]
    ion_weight: np.ndarray
    rho: np.ndarray
    boundary: np.ndarray                 # psi_inf sampled at every node
    off_solute: np.ndarray               # nodes where phi != 1 (bound check)
    phi: ScalarField | None = None
    shape: InterfaceShape | None = None
    boundary_kind: str = "zero"

    @property
    def mode(self) -> str:
        return "sharp" if self.shape is not None else "diffuse"

    @property
    def phi_digest(self) -> str:
        return self.phi.digest() if self.phi is not None else "sharp"

    @cached_property
    def dirichlet(self) -> np.ndarray:
        return self.grid.boundary_mask().ravel()

    @cached_property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet)

    @cached_property
    def face_coeff(self) -> list[np.ndarray]:
        return [eps * c for eps, c in zip(self.eps_faces, self.grid.face_base)]

    @cached_property
    def K(self) -> sp.csr_matrix:
        return stiffness(self.grid, self.face_coeff)

    @cached_property
    def load(self) -> np.ndarray:
        return (self.grid.weights * self.rho).ravel()

    @property
    def ionic(self):
        return self.model.ionic

    def energy(self, u: np.ndarray) -> float:
        """E_h(u) for a flat node vector u."""
        kBT = self.model.params.kBT
        with np.errstate(over="ignore"):
            ions = float(np.sum(self.ion_weight.ravel() * eval_B(u, self.ionic, kBT)))
        return 0.5 * float(u @ (self.K @ u)) - float(self.load @ u) + ions

    def residual(self, u: np.ndarray) -> np.ndarray:
        kBT = self.model.params.kBT
        with np.errstate(over="ignore", invalid="ignore"):
            return self.K @ u - self.load + self.ion_weight.ravel() * eval_B_prime(u, self.ionic, kBT)

    def jacobian(self, u: np.ndarray) -> sp.csr_matrix:
        kBT = self.model.params.kBT
        curvature = self.ion_weight.ravel() * eval_B_second(u, self.ionic, kBT)
        return (self.K + sp.diags(curvature)).tocsr()

    def harmonic_extension(self) -> np.ndarray:
        """psi_inf on the boundary, discrete eps-harmonic inside."""
        u = np.where(self.dirichlet, self.boundary.ravel(), 0.0)
        if not np.any(u):
            return u
        free, fixed = self.free, np.flatnonzero(self.dirichlet)
        K = self.K
        rhs = -(K[free][:, fixed] @ u[fixed])
        u[free] = spsolve(K[free][:, free].tocsc(), rhs)
        return u


def _boundary_values(grid: StructuredGrid, model: SolvationModel, kind: str) -> np.ndarray:
    if kind not in BOUNDARY_KINDS:
        raise ValueError(f"Unknown boundary kind: {kind} (expected one of {BOUNDARY_KINDS})")
    values = np.zeros(grid.shape)
    if kind == "zero":
        return values
    eps_w = model.params.eps_w
    kappa = debye_kappa(model.ionic, eps_w, model.params.kBT)
    points = grid.physical_points()
    for atom in model.atoms:
        if atom.charge == 0:
            continue
        r = np.linalg.norm(points - np.asarray(atom.position), axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            coulomb = atom.charge * np.exp(-kappa * r) / (4.0 * np.pi * eps_w * r)
        values += np.where(r > 0, coulomb, 0.0)
    return values


def diffuse_problem(grid: StructuredGrid, model: SolvationModel, phi: ScalarField, boundary: str = "zero") -> PBProblem:
    """Coefficients from a phase field: eps(phi) on faces, ions weighted by (phi - 1)^2."""
    if phi.grid != grid:
        raise ShapeMismatchError("phase field lives on a different grid")
    eps_nodes = eval_eps(phi.values, model.dielectric)
    ion_weight = grid.weights * (phi.values - 1.0) ** 2 if model.ionic.count else np.zeros(grid.shape)
    return PBProblem(
        grid=grid,
        model=model,
        eps_faces=harmonic_faces(grid, eps_nodes),
        ion_weight=ion_weight,
        rho=smeared_charge_density(grid.physical_points(), model.atoms, grid.physical_dim),
        boundary=_boundary_values(grid, model, boundary),
        off_solute=phi.values != 1.0,
        phi=phi,
        boundary_kind=boundary,
    )


def sharp_problem(grid: StructuredGrid, model: SolvationModel, shape: InterfaceShape, boundary: str = "zero") -> PBProblem:
    """Piecewise-constant eps with fraction-weighted harmonic faces; ions only outside G."""
    p = model.params
    theta = face_inside_fraction(shape, grid)
    eps_faces = [1.0 / (t / p.eps_p + (1.0 - t) / p.eps_w) for t in theta]
    outside = outside_fraction(shape, grid)
    ion_weight = grid.weights * outside if model.ionic.count else np.zeros(grid.shape)
    return PBProblem(
        grid=grid,
        model=model,
        eps_faces=eps_faces,
        ion_weight=ion_weight,
        rho=smeared_charge_density(grid.physical_points(), model.atoms, grid.physical_dim),
        boundary=_boundary_values(grid, model, boundary),
        off_solute=outside > 0.0,
        shape=shape,
        boundary_kind=boundary,
    )


# ── Solution ───────────────────────────────────────────────────────────────

@dataclass(eq=False)
class PBSolution:
    problem: PBProblem
    psi: ScalarField
    iterations: int
    residual_history: list[float] = field(default_factory=list)
    energy: float = 0.0
    max_psi: float = 0.0
    max_psi_off_solute: float = 0.0

    @property
    def free_energy(self) -> float:
        """F_ele = -min E."""
        return -self.energy

    @property
    def phi_digest(self) -> str:
        return self.problem.phi_digest

    def diagnostics(self) -> dict:
        return {
            "mode": self.problem.mode,
            "iterations": self.iterations,
            "residual_history": [float(r) for r in self.residual_history],
            "energy": self.energy,
            "free_energy": self.free_energy,
            "max_psi": self.max_psi,
            "max_psi_off_solute": self.max_psi_off_solute,
        }


def electrostatic_energy(problem: PBProblem, u: ScalarField) -> float:
    """E_phi[u]; u must equal psi_inf on the Dirichlet nodes."""
    if u.grid != problem.grid:
        raise ShapeMismatchError("trial potential lives on a different grid")
    flat = u.values.ravel()
    target = problem.boundary.ravel()[problem.dirichlet]
    gap = np.max(np.abs(flat[problem.dirichlet] - target), initial=0.0)
    if gap > 1e-10 * max(1.0, float(np.max(np.abs(target), initial=0.0))):
        raise AdmissibilityError(f"trial potential misses the boundary data by {gap:.3e}")
    return problem.energy(flat)


def _free_norms(problem: PBProblem, u: np.ndarray) -> tuple[np.ndarray, float, float]:
    F = problem.residual(u)[problem.free]
    if not np.all(np.isfinite(F)):
        return F, math.inf, math.inf
    return F, float(np.max(np.abs(F), initial=0.0)), float(np.linalg.norm(F))


def solve(problem: PBProblem, tol: float = PB_TOL, max_iters: int = MAX_NEWTON,
          c_bound: float = C_BOUND, initial: np.ndarray | None = None) -> PBSolution:
    """
    Damped Newton on the discrete weak form.

    Converged when ||F||_inf <= tol (||K||_inf ||u||_inf + ||b||_inf) after
    at least one step; each step backtracks on ||F||_2 by halving. A step
    that no halving improves ends the solve with NonConvergenceError.
    """
    free = problem.free
    u = problem.harmonic_extension() if initial is None else np.asarray(initial, dtype=float).ravel().copy()
    u[problem.dirichlet] = problem.boundary.ravel()[problem.dirichlet]
    K_norm = float(np.max(np.abs(problem.K).sum(axis=1), initial=0.0))
    b_norm = float(np.max(np.abs(problem.load), initial=0.0))

    F, f_inf, f_two = _free_norms(problem, u)
    history = [f_inf]
    converged = False
    iterations = 0
    while iterations < max_iters:
        J = problem.jacobian(u)[free][:, free].tocsc()
        step = spsolve(J, -F)
        iterations += 1

        damping = 1.0
        for _ in range(MAX_HALVINGS):
            trial = u.copy()
            trial[free] += damping * step
            F_new, inf_new, two_new = _free_norms(problem, trial)
            if two_new <= (1.0 - 1e-4 * damping) * f_two or two_new == 0.0:
                break
            damping *= 0.5
        else:
            raise NonConvergenceError(
                f"line search failed after {MAX_HALVINGS} halvings (residual {f_inf:.3e})", history + [inf_new]
            )
        u, F, f_inf, f_two = trial, F_new, inf_new, two_new
        history.append(f_inf)

        scale = K_norm * float(np.max(np.abs(u), initial=0.0)) + b_norm
        if f_inf <= tol * scale:
            converged = True
            break

    if not converged:
        raise NonConvergenceError(
            f"Newton did not converge in {max_iters} iterations (residual {history[-1]:.3e})", history
        )

    psi = u.reshape(problem.grid.shape)
    off = np.abs(psi[problem.off_solute])
    max_off = float(np.max(off, initial=0.0))
    if max_off > c_bound:
        raise BoundViolationError(f"max |psi| off the solute is {max_off:.3e} > {c_bound}")
    return PBSolution(
        problem=problem,
        psi=ScalarField(problem.grid, psi),
        iterations=iterations,
        residual_history=history,
        energy=problem.energy(u),
        max_psi=float(np.max(np.abs(psi))),
        max_psi_off_solute=max_off,
    )


def solve_sharp(shape: InterfaceShape, grid: StructuredGrid, model: SolvationModel,
                boundary: str = "zero", **kwargs) -> PBSolution:
    return solve(sharp_problem(grid, model, shape, boundary), **kwargs)


def contraction_ratios(history: list[float]) -> list[float]:
    """Successive residual ratios r_{k+1} / r_k."""
    return [b / a for a, b in zip(history[:-1], history[1:]) if a > 0]


def h1_norm(grid: StructuredGrid, values: np.ndarray) -> float:
    """Discrete H1 norm: node L2 plus face Dirichlet energy."""
    return math.sqrt(float(np.sum(grid.weights * values**2)) + 2.0 * dirichlet_energy(grid, values))


def continuity_probe(problem: PBProblem, phi_sequence: list[ScalarField]) -> list[dict]:
    """
    H1 and energy deltas between the solutions for each phi_k and the
    reference problem's solution.
    """
    reference = solve(problem)
    rows = []
    for k, phi in enumerate(phi_sequence):
        sol = solve(diffuse_problem(problem.grid, problem.model, phi, problem.boundary_kind))
        if problem.shape is not None:
            out = outside_fraction(problem.shape, problem.grid)
            l1 = float(np.sum(problem.grid.weights * ((1 - out) * np.abs(phi.values - 1) + out * np.abs(phi.values))))
        else:
            l1 = float(np.sum(problem.grid.weights * np.abs(phi.values - problem.phi.values)))
        rows.append({
            "k": k,
            "l1_phi": l1,
            "h1_delta": h1_norm(problem.grid, sol.psi.values - reference.psi.values),
            "energy_delta": abs(sol.energy - reference.energy),
            "reference_energy": reference.energy,
        })
        print(f"[pb] probe k={k}: h1={rows[-1]['h1_delta']:.3e}, dE={rows[-1]['energy_delta']:.3e}", flush=True)
    return rows


# ── Interface traces ───────────────────────────────────────────────────────

TRACE_OFFSETS = (3.0, 4.0, 5.0)


def _extrapolation_weights(offsets) -> np.ndarray:
    """Lagrange weights reproducing the value at 0 from samples at `offsets`."""
    x = np.asarray(offsets, dtype=float)
    return np.array([
        np.prod([-x[j] / (x[i] - x[j]) for j in range(len(x)) if j != i]) for i in range(len(x))
    ])


def interface_traces(solution: PBSolution, shape: InterfaceShape, points: np.ndarray, normals: np.ndarray) -> dict:
    """
    One-sided traces of psi, its normal derivative and its tangential
    gradient at interface points, by quadratic extrapolation of samples at
    3h, 4h, 5h along the normal on each side.
    """
    grid = solution.problem.grid
    h = grid.h
    weights = _extrapolation_weights(TRACE_OFFSETS)
    psi = solution.psi.values
    grad = gradient(solution.psi).values

    def sampled(values, pts):
        if grid.radial:
            r = np.linalg.norm(pts, axis=-1)
            return np.interp(r, grid.radius, values)
        return sample(values, grid, pts)

    def side(sign):
        value = np.zeros(len(points))
        g = np.zeros(points.shape)
        for w, off in zip(weights, TRACE_OFFSETS):
            pts = points + sign * off * h * normals
            value += w * sampled(psi, pts)
            if grid.radial:
                g += w * sampled(grad[..., 0], pts)[:, None] * normals
            else:
                g += w * np.stack([sampled(grad[..., k], pts) for k in range(grid.dim)], axis=-1)
        dn = np.sum(g * normals, axis=-1)
        tangential = g - dn[:, None] * normals
        return value, dn, tangential

    psi_in, dn_in, tan_in = side(-1.0)
    psi_out, dn_out, tan_out = side(+1.0)
    p = solution.problem.model.params
    return {
        "psi_in": psi_in, "psi_out": psi_out,
        "dn_in": dn_in, "dn_out": dn_out,
        "tangential_in": tan_in, "tangential_out": tan_out,
        "flux_in": p.eps_p * dn_in, "flux_out": p.eps_w * dn_out,
    }


# ── Radial oracles ─────────────────────────────────────────────────────────

def gaussian_enclosed_charge(r, charge: float, width: float):
    """Charge of a normalized 3D Gaussian inside radius r."""
    r = np.asarray(r, dtype=float)
    x = r / (math.sqrt(2.0) * width)
    return charge * (erf(x) - math.sqrt(2.0 / math.pi) * (r / width) * np.exp(-x**2))


def born_free_energy(charge: float, width: float, radius: float, eps_p: float, eps_w: float,
                     outer: float) -> float:
    """
    F_ele of a centered smeared charge in a dielectric ball, zero potential
    at `outer`, no ions: int_0^outer Q(r)^2 / (8 pi eps(r) r^2) dr.
    """
    def integrand(r, eps):
        return float(gaussian_enclosed_charge(r, charge, width)) ** 2 / (8.0 * math.pi * eps * r**2)

    inner, _ = quad(integrand, 0.0, radius, args=(eps_p,), epsabs=1e-14, limit=200)
    outer_part, _ = quad(integrand, radius, outer, args=(eps_w,), epsabs=1e-14, limit=200)
    return inner + outer_part


def smeared_yukawa_potential(r, charge: float, width: float, eps: float, kappa: float):
    """Screened potential of a 3D Gaussian charge in a uniform ionic medium."""
    r = np.asarray(r, dtype=float)
    a = width
    s = math.sqrt(2.0) * a
    with np.errstate(divide="ignore", invalid="ignore"):
        value = charge / (8.0 * math.pi * eps * r) * math.exp(0.5 * kappa**2 * a**2) * (
            np.exp(-kappa * r) * erfc((kappa * a**2 - r) / s)
            - np.exp(kappa * r) * erfc((kappa * a**2 + r) / s)
        )
    # r -> 0 limit of the bracket over r
    origin = charge / (4.0 * math.pi * eps) * (
        math.sqrt(2.0 / math.pi) / a - kappa * math.exp(0.5 * kappa**2 * a**2) * float(erfc(kappa * a / math.sqrt(2.0)))
    )
    return np.where(r > 0, value, origin)

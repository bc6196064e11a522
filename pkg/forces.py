"""
Forces of the phase-field and sharp-interface solvation models.

Diffuse side: the first variation delta F, the four force densities, the
four stress tensors, divergence residuals and weak pairings against
compactly supported test fields V. Sharp side: the boundary force
densities on the interface and their weak forms, plus the dielectric
force identity.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from energy import ConsistencyError, discrete_energy, nodal_gradient, sampled_U
from grid import (
    InterfaceShape, ScalarField, StructuredGrid, TensorField, UnsupportedShapeError, VectorField,
    contract, gradient, laplacian, outside_fraction, stiffness, surface_integral, surface_nodes,
    tensor_divergence,
)
from model import (
    SolvationModel, eval_B, eval_eps, eval_eps_prime, eval_U, eval_U_gradient, eval_W,
    eval_W_prime,
)
from pb import PBSolution, diffuse_problem, interface_traces, solve


class SupportViolationError(ValueError):
    """A vdW pairing was requested with an atom center inside supp(V)."""


class ResolutionError(RuntimeError):
    """The interface is too thin or too curved for one-sided trace extraction."""


TERMS = ("vol", "sur", "vdw", "ele")


# ── Shared nodal inputs ────────────────────────────────────────────────────

def _check_psi(phi: ScalarField, pb_solution: PBSolution | None, model: SolvationModel) -> np.ndarray:
    if pb_solution is None:
        if model.has_electrostatics:
            raise ConsistencyError("charged solute needs the PB solution for this phase field")
        return np.zeros(phi.grid.shape)
    if pb_solution.problem.phi is None or pb_solution.phi_digest != phi.digest():
        raise ConsistencyError("PB solution was computed for a different phase field")
    return pb_solution.psi.values


def _laplacian(phi: ScalarField) -> tuple[np.ndarray, bool]:
    """Exact Laplacian if attached; else the discrete one (the H2 surrogate)."""
    if phi.lap_hint is not None:
        return phi.lap_hint, False
    return laplacian(phi).values, True


def _identity(grid: StructuredGrid, scalar: np.ndarray) -> np.ndarray:
    if grid.radial:
        return np.stack([scalar, scalar], axis=-1)
    return scalar[..., None, None] * np.eye(grid.dim)


def _outer(grid: StructuredGrid, a: np.ndarray) -> np.ndarray:
    if grid.radial:
        return np.stack([a[..., 0] ** 2, np.zeros(a.shape[:-1])], axis=-1)
    return a[..., :, None] * a[..., None, :]


def capped_U_gradient(grid: StructuredGrid, model: SolvationModel) -> np.ndarray:
    """grad U in the grid's vector layout; zero where the cap is active."""
    points = grid.physical_points()
    U = eval_U(points, model.atoms)
    active = U < model.u_max
    grad = np.zeros(points.shape)
    if model.atoms and np.any(active):
        grad[active] = eval_U_gradient(points[active], model.atoms)
    return grad[..., :1] if grid.radial else grad


# ── First variation and force densities ───────────────────────────────────

def variation_delta_F(phi: ScalarField, xi: float, model: SolvationModel,
                      pb_solution: PBSolution | None = None, U: np.ndarray | None = None) -> ScalarField:
    """
    Nodal gradient of the discrete functional divided by the node weights:

        2 P0 phi + gamma0 [xi (-lap phi) + W'(phi)/xi] + 2 rho0 (phi - 1) U
            - 1/2 eps'(phi) |grad psi|^2 - 2 (phi - 1) B(psi)

    with -lap phi and the dielectric term taken face by face so that the
    result is exact for the functional the flow minimizes.
    """
    psi = _check_psi(phi, pb_solution, model)
    return ScalarField(phi.grid, variation_terms(phi.grid, phi.values, xi, model, psi, U))


def variation_terms(grid: StructuredGrid, values: np.ndarray, xi: float, model: SolvationModel,
                    psi: np.ndarray, U: np.ndarray | None = None, gradient_term: bool = True) -> np.ndarray:
    """Nodal delta F for given node values and potential; gradient_term=False drops gamma0 xi (-lap phi)."""
    p = model.params
    U = sampled_U(grid, model) if U is None else U
    w = grid.weights

    out = 2.0 * p.P0 * values + p.gamma0 * eval_W_prime(values) / xi
    if gradient_term:
        neg_lap = (stiffness(grid) @ values.ravel()).reshape(grid.shape) / w
        out = out + p.gamma0 * xi * neg_lap
    out = out + 2.0 * p.rho0 * (values - 1.0) * U

    if np.any(psi):
        eps = eval_eps(values, model.dielectric)
        slope = eval_eps_prime(values, model.dielectric)
        dielectric = np.zeros(grid.shape)
        for k, c in enumerate(grid.face_base):
            lo = [slice(None)] * grid.dim
            hi = [slice(None)] * grid.dim
            lo[k], hi[k] = slice(0, -1), slice(1, None)
            lo, hi = tuple(lo), tuple(hi)
            e_lo, e_hi = eps[lo], eps[hi]
            jump = 0.5 * c * (psi[hi] - psi[lo]) ** 2
            denom = (e_lo + e_hi) ** 2
            # d(harmonic mean)/d eps_i = 2 eps_j^2 / (eps_i + eps_j)^2
            dielectric[lo] += jump * 2.0 * e_hi**2 / denom * slope[lo]
            dielectric[hi] += jump * 2.0 * e_lo**2 / denom * slope[hi]
        out = out - dielectric / w
        if model.ionic.count:
            out = out - 2.0 * (values - 1.0) * eval_B(psi, model.ionic, p.kBT)
    return out


def force_densities(phi: ScalarField, xi: float, model: SolvationModel,
                    pb_solution: PBSolution | None = None, U: np.ndarray | None = None) -> dict:
    """f_vol, f_sur, f_vdw, f_ele as VectorFields, plus the total and the H2-surrogate flag."""
    grid = phi.grid
    p = model.params
    psi = _check_psi(phi, pb_solution, model)
    U = sampled_U(grid, model) if U is None else U
    values = phi.values
    grad = nodal_gradient(phi)
    lap, surrogate = _laplacian(phi)

    grad_psi = gradient(ScalarField(grid, psi)).values
    ele_coeff = -0.5 * eval_eps_prime(values, model.dielectric) * np.sum(grad_psi**2, axis=-1)
    if model.ionic.count:
        ele_coeff = ele_coeff - 2.0 * (values - 1.0) * eval_B(psi, model.ionic, p.kBT)

    coeffs = {
        "vol": 2.0 * p.P0 * values,
        "sur": p.gamma0 * (-xi * lap + eval_W_prime(values) / xi),
        "vdw": 2.0 * p.rho0 * (values - 1.0) * U,
        "ele": ele_coeff,
    }
    out = {term: VectorField(grid, c[..., None] * grad) for term, c in coeffs.items()}
    out["total"] = VectorField(grid, sum(out[t].values for t in TERMS))
    out["discrete_h2_surrogate"] = surrogate
    return out


# ── Stress tensors ─────────────────────────────────────────────────────────

@dataclass(eq=False)
class StressSet:
    T_vol: TensorField
    T_sur: TensorField
    T_vdW: TensorField
    T_ele: TensorField
    xi: float
    phi_digest: str
    psi_digest: str = ""

    def tensor(self, term: str) -> TensorField:
        return {"vol": self.T_vol, "sur": self.T_sur, "vdw": self.T_vdW, "ele": self.T_ele}[term]

    def total(self) -> TensorField:
        return TensorField(self.T_vol.grid, sum(self.tensor(t).values for t in TERMS))


def stress_set(phi: ScalarField, xi: float, model: SolvationModel,
               pb_solution: PBSolution | None = None, U: np.ndarray | None = None) -> StressSet:
    grid = phi.grid
    p = model.params
    psi = _check_psi(phi, pb_solution, model)
    U = sampled_U(grid, model) if U is None else U
    values = phi.values
    grad = nodal_gradient(phi)
    grad_sq = np.sum(grad**2, axis=-1)

    grad_psi = gradient(ScalarField(grid, psi)).values
    eps = eval_eps(values, model.dielectric)
    ions = (values - 1.0) ** 2 * eval_B(psi, model.ionic, p.kBT)

    T_vol = _identity(grid, p.P0 * values**2)
    T_sur = p.gamma0 * (_identity(grid, 0.5 * xi * grad_sq + eval_W(values) / xi) - xi * _outer(grid, grad))
    T_vdW = _identity(grid, p.rho0 * (values - 1.0) ** 2 * U)
    T_ele = eps[..., None] * _outer(grid, grad_psi) if grid.radial else eps[..., None, None] * _outer(grid, grad_psi)
    T_ele = T_ele - _identity(grid, 0.5 * eps * np.sum(grad_psi**2, axis=-1) + ions)
    return StressSet(
        TensorField(grid, T_vol), TensorField(grid, T_sur), TensorField(grid, T_vdW), TensorField(grid, T_ele),
        xi, phi.digest(), pb_solution.psi.digest() if pb_solution is not None else "",
    )


def divergence_residual(stresses: StressSet, densities: dict, phi: ScalarField, model: SolvationModel,
                        pb_solution: PBSolution | None = None, mask: np.ndarray | None = None) -> dict:
    """
    Sup and L2 norms of div T_vol - f_vol, div T_sur - f_sur,
    div T_vdw - rho0 (phi - 1)^2 grad U - f_vdw, div T_ele + rho grad psi - f_ele.
    """
    grid = phi.grid
    psi = _check_psi(phi, pb_solution, model)
    mask = grid.interior_mask(2) if mask is None else mask
    rho = pb_solution.problem.rho if pb_solution is not None else np.zeros(grid.shape)
    grad_psi = gradient(ScalarField(grid, psi)).values
    extras = {
        "vol": 0.0,
        "sur": 0.0,
        "vdw": -model.params.rho0 * ((phi.values - 1.0) ** 2)[..., None] * capped_U_gradient(grid, model),
        "ele": rho[..., None] * grad_psi,
    }
    out = {}
    for term in TERMS:
        r = tensor_divergence(stresses.tensor(term)).values + extras[term] - densities[term].values
        norm = np.linalg.norm(r, axis=-1)
        out[term] = {
            "sup": float(np.max(norm[mask], initial=0.0)),
            "l2": math.sqrt(float(np.sum(grid.weights[mask] * norm[mask] ** 2))),
        }
    return out


# ── Test fields ────────────────────────────────────────────────────────────

def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t**2), 30.0 * t**2 * (1.0 - t) ** 2


def cutoff(r, support) -> tuple[np.ndarray, np.ndarray]:
    """
    C2 radial cutoff and its derivative: 0 below r0, rising to 1 at r1,
    flat to r2, falling to 0 at r3. r0 = r1 = 0 removes the inner edge.
    """
    r0, r1, r2, r3 = support
    s, ds = _smoothstep((r3 - r) / (r3 - r2))
    chi, dchi = s, -ds / (r3 - r2)
    if r1 > 0:
        s_in, ds_in = _smoothstep((r - r0) / (r1 - r0))
        dchi = dchi * s_in + chi * ds_in / (r1 - r0)
        chi = chi * s_in
    return chi, dchi


TEST_FIELD_KINDS = ("constant", "radial", "rotational", "polynomial")


@dataclass(eq=False)
class TestField:
    """Compactly supported C1 vector field V with its gradient dV_i/dx_j."""
    __test__ = False

    name: str
    V: VectorField
    grad: TensorField
    center: tuple[float, ...]
    support: tuple[float, float, float, float]
    evaluate: object = field(repr=False, default=None)   # physical points -> V

    @property
    def grid(self) -> StructuredGrid:
        return self.V.grid

    def contains(self, point) -> bool:
        """True if V can be nonzero at `point` (physical coordinates)."""
        c = np.zeros(3) if self.grid.radial else np.asarray(self.center)
        r = float(np.linalg.norm(np.asarray(point, dtype=float)[: c.size] - c))
        r0, r1, _, r3 = self.support
        return (r0 < r if r1 > 0 else True) and r < r3

    def identity_tensor(self) -> TensorField:
        """chi I: the tensor test field whose pairing counts (n - 1) surface measure."""
        r = _radius(self.grid, self.center)
        chi, _ = cutoff(r, self.support)
        return TensorField(self.grid, _identity(self.grid, chi))

    def combine(self, alpha: float, other: "TestField") -> "TestField":
        """alpha V + other, for linearity checks."""
        def evaluate(points):
            return alpha * self.evaluate(points) + other.evaluate(points)
        return TestField(
            f"{alpha:g}*{self.name}+{other.name}",
            VectorField(self.grid, alpha * self.V.values + other.V.values),
            TensorField(self.grid, alpha * self.grad.values + other.grad.values),
            self.center, self.support, evaluate,
        )


def _radius(grid: StructuredGrid, center) -> np.ndarray:
    if grid.radial:
        return grid.radius
    return np.linalg.norm(grid.mesh - np.asarray(center), axis=-1)


def _cartesian_base(kind: str, n: int, scale: float, rng, direction):
    """f(y) and its Jacobian for y = x - center, vectorized over leading axes."""
    if kind == "constant":
        e = np.zeros(n)
        e[:] = direction if direction is not None else np.eye(n)[0]
        return lambda y: np.broadcast_to(e, y.shape).copy(), lambda y: np.zeros(y.shape + (n,))
    if kind == "radial":
        return lambda y: y.copy(), lambda y: np.broadcast_to(np.eye(n), y.shape + (n,)).copy()
    if kind == "rotational":
        if n < 2:
            raise ValueError("rotational test fields need at least two dimensions")
        J = np.zeros((n, n))
        J[0, 1], J[1, 0] = -1.0, 1.0
        return lambda y: y @ J.T, lambda y: np.broadcast_to(J, y.shape + (n,)).copy()
    if kind == "polynomial":
        b = rng.normal(size=n)
        A = rng.normal(size=(n, n))
        B = rng.normal(size=(n, n, n))

        def f(y):
            z = y / scale
            return b + z @ A.T + np.einsum("ijk,...j,...k->...i", B, z, z)

        def jac(y):
            z = y / scale
            return (A + np.einsum("ijk,...k->...ij", B + B.transpose(0, 2, 1), z)) / scale
        return f, jac
    raise ValueError(f"Unknown test field kind: {kind} (expected one of {TEST_FIELD_KINDS})")


def build_test_field(kind: str, grid: StructuredGrid, center=None, inner: float = 0.0,
                     plateau: float = 1.0, outer: float = 2.0, seed: int = 0,
                     inner_plateau: float | None = None, direction=None) -> TestField:
    """
    Test field f(x - center) chi(|x - center|) with chi the C2 cutoff of
    support (inner, inner_plateau, plateau, outer). On radial grids only
    radial kinds exist: v(r) = r chi(r) or r p(r) chi(r).
    """
    n = grid.physical_dim
    center = tuple(np.zeros(n)) if center is None else tuple(float(c) for c in center)
    inner_plateau = inner if inner_plateau is None else inner_plateau
    if inner > 0 and inner_plateau <= inner:
        inner_plateau = inner + 0.5 * (plateau - inner)
    support = (inner, inner_plateau if inner > 0 else 0.0, plateau, outer)
    if not (support[1] <= support[2] < support[3]):
        raise ValueError(f"test field support must be ordered, got {support}")
    rng = np.random.default_rng(seed)

    collar = 2.0 * grid.h
    if grid.radial:
        if outer > grid.upper[0] - collar:
            raise ValueError("test field support reaches the outer boundary collar")
        if kind == "radial":
            coeff = np.array([1.0, 0.0, 0.0])
        elif kind == "polynomial":
            coeff = np.concatenate([[1.0], rng.normal(size=2)])
        else:
            raise UnsupportedShapeError(f"radial grids support radial or polynomial test fields, not {kind}")

        def profile(r):
            z = r / outer
            p = coeff[0] + coeff[1] * z + coeff[2] * z**2
            dp = (coeff[1] + 2.0 * coeff[2] * z) / outer
            chi, dchi = cutoff(r, support)
            return r * p * chi, p * chi + r * dp * chi + r * p * dchi, p * chi

        r = grid.radius
        v, dv, v_over_r = profile(r)

        def evaluate(points):
            rr = np.linalg.norm(points, axis=-1)
            _, _, ratio = profile(rr)
            return ratio[..., None] * points

        return TestField(
            f"{kind}", VectorField(grid, v[..., None]),
            TensorField(grid, np.stack([dv, v_over_r], axis=-1)), center, support, evaluate,
        )

    c = np.asarray(center)
    if c.shape != (grid.dim,):
        raise ValueError(f"test field center {center} does not match grid dimension {grid.dim}")
    if np.any(c - outer < np.asarray(grid.lower) + collar) or np.any(c + outer > np.asarray(grid.upper) - collar):
        raise ValueError("test field support reaches the boundary collar")
    f, jac = _cartesian_base(kind, n, outer, rng, direction)

    def evaluate_with_grad(points):
        y = np.asarray(points, dtype=float) - c
        r = np.linalg.norm(y, axis=-1)
        chi, dchi = cutoff(r, support)
        base = f(y)
        with np.errstate(divide="ignore", invalid="ignore"):
            radial_dir = np.where(r[..., None] > 0, y / r[..., None], 0.0)
        V = base * chi[..., None]
        G = jac(y) * chi[..., None, None] + base[..., :, None] * (dchi[..., None] * radial_dir)[..., None, :]
        return V, G

    V, G = evaluate_with_grad(grid.mesh)
    return TestField(
        kind, VectorField(grid, V), TensorField(grid, G), center, support,
        lambda points: evaluate_with_grad(points)[0],
    )


# ── Weak pairings ──────────────────────────────────────────────────────────

def weak_pairing(T: TensorField, V: TestField, extra: np.ndarray | None = None) -> float:
    """-int T : grad V + int extra (extra a nodal density)."""
    grid = T.grid
    value = -float(np.sum(grid.weights * contract(grid, T.values, V.grad.values)))
    if extra is not None:
        value += float(np.sum(grid.weights * extra))
    return value


def tensor_pairing(T: TensorField, Psi: TensorField) -> float:
    """int T : Psi."""
    return float(np.sum(T.grid.weights * contract(T.grid, T.values, Psi.values)))


def force_pairing(f: VectorField, V: TestField) -> float:
    """int f . V."""
    return float(np.sum(f.grid.weights * np.sum(f.values * V.V.values, axis=-1)))


def check_vdw_support(V: TestField, model: SolvationModel) -> None:
    for atom in model.atoms:
        if atom.lj_energy != 0 and V.contains(atom.position):
            raise SupportViolationError(f"atom at {atom.position} lies inside supp(V) of '{V.name}'")


def weak_pairings(stresses: StressSet, V: TestField, phi: ScalarField, model: SolvationModel,
                  pb_solution: PBSolution | None = None) -> dict:
    """The four weak forms of int f . V; a V covering an atom center skips vdw."""
    grid = phi.grid
    psi = _check_psi(phi, pb_solution, model)
    out = {
        "vol": weak_pairing(stresses.T_vol, V),
        "sur": weak_pairing(stresses.T_sur, V),
    }
    try:
        check_vdw_support(V, model)
        dU = capped_U_gradient(grid, model)
        extra = -model.params.rho0 * (phi.values - 1.0) ** 2 * np.sum(dU * V.V.values, axis=-1)
        out["vdw"] = weak_pairing(stresses.T_vdW, V, extra)
    except SupportViolationError as exc:
        print(f"[forces] skipping vdw pairing: {exc}", flush=True)
        out["vdw"] = math.nan
    rho = pb_solution.problem.rho if pb_solution is not None else np.zeros(grid.shape)
    grad_psi = gradient(ScalarField(grid, psi)).values
    out["ele"] = weak_pairing(stresses.T_ele, V, rho * np.sum(grad_psi * V.V.values, axis=-1))
    out["total"] = sum(out[t] for t in TERMS)
    return out


# ── Sharp boundary forces ──────────────────────────────────────────────────

def _min_inside_extent(shape: InterfaceShape) -> float:
    if shape.kind == "ball":
        return shape.radius
    if shape.kind == "slab":
        return 0.5 * (shape.upper - shape.offset)
    return math.inf


def _radial_interface(solution: PBSolution, shape: InterfaceShape) -> tuple[float, float]:
    """(psi, eps d_nu psi) at r = R from the single-valued face fluxes."""
    problem = solution.problem
    grid = problem.grid
    r, h = grid.radius, grid.spacing[0]
    psi = solution.psi.values
    fluxes = problem.eps_faces[0] * np.diff(psi) / h
    r_face = 0.5 * (r[:-1] + r[1:])
    D = float(np.interp(shape.radius, r_face, fluxes))
    i = min(int(np.searchsorted(r, shape.radius, side="right")) - 1, len(r) - 2)
    theta = min((shape.radius - r[i]) / h, 1.0)
    p = problem.model.params
    trace = psi[i] + fluxes[i] * theta * h / p.eps_p
    return float(trace), D


@dataclass(eq=False)
class SharpForces:
    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    components: dict           # term -> (q, n) force densities on the interface

    def total(self) -> np.ndarray:
        return sum(self.components[t] for t in TERMS)

    def pairing(self, term: str, V: TestField) -> float:
        values = self.total() if term == "total" else self.components[term]
        return float(np.sum(self.weights * np.sum(values * V.evaluate(self.points), axis=-1)))

    def pairings(self, V: TestField) -> dict:
        return {t: self.pairing(t, V) for t in TERMS + ("total",)}


def sharp_boundary_force(shape: InterfaceShape, grid: StructuredGrid, model: SolvationModel,
                         sharp_pb: PBSolution | None = None, order: int = 32) -> SharpForces:
    """
    f0_vol = -P0 nu, f0_sur = -(n-1) gamma0 H nu, f0_vdw = rho0 U nu and
    f0_ele = [-1/2 (1/eps_p - 1/eps_w) (eps d_nu psi)^2
              - 1/2 (eps_w - eps_p) |grad_G psi|^2 - B(psi)] nu
    on surface quadrature nodes.
    """
    p = model.params
    n = grid.physical_dim
    points, normals, weights = surface_nodes(shape, grid, order)
    q = len(weights)
    comps = {
        "vol": -p.P0 * normals,
        "sur": -(n - 1) * p.gamma0 * shape.mean_curvature() * normals,
        "vdw": p.rho0 * eval_U(points, model.atoms, model.u_max)[:, None] * normals,
        "ele": np.zeros((q, n)),
    }
    if sharp_pb is not None:
        if grid.radial:
            psi_trace, D = _radial_interface(sharp_pb, shape)
            psi_s = np.full(q, psi_trace)
            D_s = np.full(q, D)
            tangential_sq = np.zeros(q)
        else:
            if _min_inside_extent(shape) < 6.0 * grid.h:
                raise ResolutionError(f"interface extent below 6h (h={grid.h:.3g}) for one-sided traces")
            traces = interface_traces(sharp_pb, shape, points, normals)
            psi_s = 0.5 * (traces["psi_in"] + traces["psi_out"])
            D_s = 0.5 * (traces["flux_in"] + traces["flux_out"])
            tangential = 0.5 * (traces["tangential_in"] + traces["tangential_out"])
            tangential_sq = np.sum(tangential**2, axis=-1)
        normal_force = (
            -0.5 * (1.0 / p.eps_p - 1.0 / p.eps_w) * D_s**2
            - 0.5 * (p.eps_w - p.eps_p) * tangential_sq
            - eval_B(psi_s, model.ionic, p.kBT)
        )
        comps["ele"] = normal_force[:, None] * normals
    return SharpForces(points, normals, weights, comps)


def sharp_surface_pairing(shape: InterfaceShape, grid: StructuredGrid, model: SolvationModel,
                          term: str, V: TestField) -> float:
    """int_G f0 . V for the analytic terms, by adaptive surface quadrature."""
    p = model.params
    n = grid.physical_dim
    if term == "vol":
        scale = lambda pts: -p.P0 * np.ones(len(pts))
    elif term == "sur":
        scale = lambda pts: -(n - 1) * p.gamma0 * shape.mean_curvature() * np.ones(len(pts))
    elif term == "vdw":
        scale = lambda pts: p.rho0 * eval_U(pts, model.atoms, model.u_max)
    else:
        raise ValueError(f"Unknown analytic boundary term: {term}")
    return surface_integral(shape, lambda pts, nu: scale(pts) * np.sum(nu * V.evaluate(pts), axis=-1), grid)


def surface_measure_pairing(shape: InterfaceShape, grid: StructuredGrid, Psi_fn) -> float:
    """int_G (I - nu nu) : Psi dS for a tensor function Psi(points) -> (q, n, n)."""
    def integrand(pts, nu):
        P = np.asarray(Psi_fn(pts))
        return np.einsum("qii->q", P) - np.einsum("qi,qij,qj->q", nu, P, nu)
    return surface_integral(shape, integrand, grid)


def dielectric_force_identity_check(shape: InterfaceShape, grid: StructuredGrid, model: SolvationModel,
                                    sharp_pb: PBSolution, V: TestField) -> tuple[float, float]:
    """
    (bulk, surface) = (int [T_ele(chi_G) : grad V - rho grad psi . V],
                       -int_G f0_ele . V). Dual cells cut by the interface
    are split into their inside and outside parts.
    """
    p = model.params
    problem = sharp_pb.problem
    w = grid.weights
    out = outside_fraction(shape, grid)
    psi = sharp_pb.psi.values
    B = eval_B(psi, model.ionic, p.kBT) if model.ionic.count else np.zeros(grid.shape)

    if grid.radial:
        h = grid.spacing[0]
        fluxes = problem.eps_faces[0] * np.diff(psi) / h
        D = np.zeros(grid.shape)
        D[1:-1] = 0.5 * (fluxes[:-1] + fluxes[1:])
        D[-1] = fluxes[-1]
        dv, v_over_r = V.grad.values[..., 0], V.grad.values[..., 1]
        v = V.V.values[..., 0]
        bulk_density = np.zeros(grid.shape)
        for eps, frac, ions in ((p.eps_p, 1.0 - out, 0.0), (p.eps_w, out, 1.0)):
            T_rr = 0.5 * D**2 / eps - ions * B
            T_tt = -0.5 * D**2 / eps - ions * B
            bulk_density += frac * (T_rr * dv + 2.0 * T_tt * v_over_r - problem.rho * (D / eps) * v)
        bulk = float(np.sum(w * bulk_density))
    else:
        grad_psi = gradient(sharp_pb.psi).values
        grad_sq = np.sum(grad_psi**2, axis=-1)
        outer = grad_psi[..., :, None] * grad_psi[..., None, :]
        bulk_density = np.zeros(grid.shape)
        for eps, frac, ions in ((p.eps_p, 1.0 - out, 0.0), (p.eps_w, out, 1.0)):
            T = eps * outer - (0.5 * eps * grad_sq + ions * B)[..., None, None] * np.eye(grid.dim)
            bulk_density += frac * contract(grid, T, V.grad.values)
        bulk_density -= problem.rho * np.sum(grad_psi * V.V.values, axis=-1)
        bulk = float(np.sum(w * bulk_density))

    forces = sharp_boundary_force(shape, grid, model, sharp_pb)
    surface = -forces.pairing("ele", V)
    return bulk, surface


# ── Domain variations ──────────────────────────────────────────────────────

def domain_variation_check(phi: ScalarField, phi_fn, xi: float, model: SolvationModel, V: TestField,
                           t: float = 1e-4, boundary: str = "zero") -> dict:
    """
    -d/dt F_xi[phi o (x + tV)] at t = 0 by central differences, against
    -int delta F (grad phi . V). phi_fn evaluates phi at grid-coordinate
    points; phi must carry its exact gradient.
    """
    grid = phi.grid

    def energy_at(values):
        field_t = ScalarField(grid, values)
        ele = 0.0
        if model.has_electrostatics:
            ele = solve(diffuse_problem(grid, model, field_t, boundary)).free_energy
        return discrete_energy(field_t, xi, model, ele).total

    displacement = V.V.values
    F_plus = energy_at(phi_fn(grid.mesh + t * displacement))
    F_minus = energy_at(phi_fn(grid.mesh - t * displacement))
    lhs = -(F_plus - F_minus) / (2.0 * t)

    base = phi.strip()
    pb_solution = solve(diffuse_problem(grid, model, base, boundary)) if model.has_electrostatics else None
    delta = variation_delta_F(base, xi, model, pb_solution)
    rate = np.sum(nodal_gradient(phi) * displacement, axis=-1)
    rhs = -float(np.sum(grid.weights * delta.values * rate))
    return {"lhs": lhs, "rhs": rhs, "rel_gap": abs(lhs - rhs) / max(abs(rhs), 1e-300), "t": t}

"""
Physical parameters and pointwise constitutive functions.

Everything here is a pure function of immutable records, vectorized over
numpy arrays: the double well W, the ionic function B, the dielectric
interpolation eps(phi), the Lennard-Jones potential U and the smeared
charge density rho.
"""
from dataclasses import dataclass, field

import numpy as np

from config import KBT, U_MAX


# Modelling assumptions, by violation category:
#   A1  domain, coefficients and solute data are given and admissible
#   A2  the solute-solvent potential is LJ: decaying, singular at the atoms
#   A3  the dielectric takes distinct positive values eps_p, eps_w monotonically
#   A4  the ionic function B is strictly convex with B(0) = 0 (neutral bulk)
ASSUMPTIONS = {
    "coefficients": "A1",
    "charge": "A1",
    "geometry": "A1",
    "lj": "A2",
    "dielectric": "A3",
    "ions": "A4",
}


def tag_violation(message: str) -> str:
    """'[dielectric] ...' -> '(A3) [dielectric] ...'; messages already tagged pass through."""
    if message.startswith("[") and "]" in message:
        label = ASSUMPTIONS.get(message[1:message.index("]")])
        if label:
            return f"({label}) {message}"
    return message


class AssumptionError(ValueError):
    """One or more modelling assumptions are violated; each message cites its assumption."""

    def __init__(self, violations: list[str]):
        self.violations = [tag_violation(v) for v in violations]
        super().__init__("; ".join(self.violations))


class SingularityError(ArithmeticError):
    """The LJ gradient was requested at an atom center."""


# ── Parameter records ──────────────────────────────────────────────────────

@dataclass(frozen=True)
class SolvationParams:
    P0: float
    gamma0: float
    rho0: float
    eps_p: float
    eps_w: float
    kBT: float = KBT

    def violations(self) -> list[str]:
        out = []
        for name in ("P0", "gamma0", "rho0"):
            if not getattr(self, name) > 0:
                out.append(f"[coefficients] {name} must be a positive number, got {getattr(self, name)}")
        if not (self.eps_p > 0 and self.eps_w > 0) or self.eps_p == self.eps_w:
            out.append(
                f"[dielectric] eps_p and eps_w must be positive and distinct, got {self.eps_p}, {self.eps_w}"
            )
        if not self.kBT > 0:
            out.append(f"[coefficients] kBT must be positive, got {self.kBT}")
        return out

    def __post_init__(self):
        if problems := self.violations():
            raise AssumptionError(problems)


@dataclass(frozen=True)
class Species:
    conc: float
    charge: float


@dataclass(frozen=True)
class IonicModel:
    """Mobile ion species. An empty tuple means no ions (B = 0)."""
    species: tuple[Species, ...] = ()

    @classmethod
    def none(cls) -> "IonicModel":
        return cls(())

    @classmethod
    def symmetric_salt(cls, conc: float, valence: float = 1.0) -> "IonicModel":
        return cls((Species(conc, valence), Species(conc, -valence)))

    @property
    def count(self) -> int:
        return len(self.species)

    def violations(self) -> list[str]:
        out = []
        for j, sp in enumerate(self.species):
            if not sp.conc > 0:
                out.append(f"[ions] species {j}: bulk concentration must be positive, got {sp.conc}")
            if sp.charge == 0:
                out.append(f"[ions] species {j}: charge must be nonzero")
        if self.species:
            net = sum(sp.conc * sp.charge for sp in self.species)
            scale = sum(abs(sp.conc * sp.charge) for sp in self.species)
            if abs(net) > 1e-12 * max(scale, 1e-300):
                out.append(f"[ions] ion species are not charge neutral: sum q_j c_j = {net:.3e}")
        return out

    def __post_init__(self):
        if problems := self.violations():
            raise AssumptionError(problems)


@dataclass(frozen=True)
class SoluteAtom:
    position: tuple[float, ...]
    charge: float = 0.0
    lj_energy: float = 0.0
    lj_length: float = 1.0
    smear_width: float = 0.5

    def violations(self) -> list[str]:
        out = []
        if not self.lj_length > 0:
            out.append(f"[lj] atom at {self.position}: LJ length must be positive")
        if not self.smear_width > 0:
            out.append(f"[charge] atom at {self.position}: charge smear width must be positive")
        if self.lj_energy < 0:
            out.append(f"[lj] atom at {self.position}: LJ well depth must be nonnegative")
        return out

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(x) for x in self.position))
        if problems := self.violations():
            raise AssumptionError(problems)


@dataclass(frozen=True)
class DielectricProfile:
    eps_p: float
    eps_w: float
    kind: str = "quintic"

    def __post_init__(self):
        problems = []
        if not (self.eps_p > 0 and self.eps_w > 0) or self.eps_p == self.eps_w:
            problems.append("[dielectric] eps_p and eps_w must be positive and distinct")
        if self.kind not in SMOOTHSTEPS:
            problems.append(f"[dielectric] unknown dielectric interpolation '{self.kind}'")
        if problems:
            raise AssumptionError(problems)


@dataclass(frozen=True)
class SolvationModel:
    """All physics of one experiment."""
    params: SolvationParams
    ionic: IonicModel = field(default_factory=IonicModel.none)
    atoms: tuple[SoluteAtom, ...] = ()
    dielectric_kind: str = "quintic"
    u_max: float = U_MAX

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        # raises on an unknown interpolation kind
        _ = self.dielectric

    @property
    def dielectric(self) -> DielectricProfile:
        return DielectricProfile(self.params.eps_p, self.params.eps_w, self.dielectric_kind)

    @property
    def has_electrostatics(self) -> bool:
        return any(a.charge != 0 for a in self.atoms)

    def check_geometry(self, grid) -> list[str]:
        """Atoms must lie strictly inside the box (at the origin for radial grids)."""
        out = []
        for atom in self.atoms:
            x = np.asarray(atom.position)
            if grid.radial:
                if x.shape != (3,) or np.any(x != 0.0):
                    out.append(f"[geometry] radial grids need atoms at the origin, got {atom.position}")
            elif x.shape != (grid.dim,):
                out.append(f"[geometry] atom {atom.position} does not match grid dimension {grid.dim}")
            elif np.any(x <= grid.lower) or np.any(x >= grid.upper):
                out.append(f"[geometry] atom {atom.position} is not interior to the box")
        return out


# ── Double well ────────────────────────────────────────────────────────────

def eval_W(phi):
    """W(phi) = 18 phi^2 (1 - phi)^2."""
    phi = np.asarray(phi, dtype=float)
    return 18.0 * phi**2 * (1.0 - phi) ** 2


def eval_W_prime(phi):
    phi = np.asarray(phi, dtype=float)
    return 36.0 * phi * (1.0 - phi) * (1.0 - 2.0 * phi)


def eval_W_second(phi):
    phi = np.asarray(phi, dtype=float)
    return 36.0 * (1.0 - 6.0 * phi + 6.0 * phi**2)


# ── Ionic function ─────────────────────────────────────────────────────────

def eval_B(s, ionic: IonicModel, kBT: float = KBT):
    """B(s) = kBT sum_j c_j (exp(-q_j s / kBT) - 1)."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    for sp in ionic.species:
        out = out + kBT * sp.conc * np.expm1(-sp.charge * s / kBT)
    return out


def eval_B_prime(s, ionic: IonicModel, kBT: float = KBT):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    for sp in ionic.species:
        out = out - sp.conc * sp.charge * np.exp(-sp.charge * s / kBT)
    return out


def eval_B_second(s, ionic: IonicModel, kBT: float = KBT):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    for sp in ionic.species:
        out = out + sp.conc * sp.charge**2 / kBT * np.exp(-sp.charge * s / kBT)
    return out


def debye_kappa(ionic: IonicModel, eps_w: float, kBT: float = KBT) -> float:
    """Inverse Debye length sqrt(B''(0) / eps_w); 0 without ions."""
    return float(np.sqrt(eval_B_second(0.0, ionic, kBT) / eps_w))


# ── Dielectric interpolation ───────────────────────────────────────────────

SMOOTHSTEPS = {
    "quintic": (
        lambda t: t**3 * (10.0 - 15.0 * t + 6.0 * t**2),
        lambda t: 30.0 * t**2 * (1.0 - t) ** 2,
    ),
    "cubic": (
        lambda t: t**2 * (3.0 - 2.0 * t),
        lambda t: 6.0 * t * (1.0 - t),
    ),
}


def eval_eps(phi, d: DielectricProfile):
    """eps_w for phi <= 0, eps_p for phi >= 1, smoothstep in between."""
    step, _ = SMOOTHSTEPS[d.kind]
    t = np.clip(np.asarray(phi, dtype=float), 0.0, 1.0)
    return d.eps_w + (d.eps_p - d.eps_w) * step(t)


def eval_eps_prime(phi, d: DielectricProfile):
    _, slope = SMOOTHSTEPS[d.kind]
    phi = np.asarray(phi, dtype=float)
    inside = (phi > 0.0) & (phi < 1.0)
    return np.where(inside, (d.eps_p - d.eps_w) * slope(np.clip(phi, 0.0, 1.0)), 0.0)


# ── Solute fields ──────────────────────────────────────────────────────────

def _offsets(points, atom: SoluteAtom):
    points = np.asarray(points, dtype=float)
    diff = points - np.asarray(atom.position)
    return diff, np.sqrt(np.sum(diff**2, axis=-1))


def eval_U(points, atoms, u_max: float | None = None):
    """
    Lennard-Jones potential sum_i 4 eps_i [(sigma_i/r)^12 - (sigma_i/r)^6].

    Atom centers evaluate to +inf, or to u_max when a cap is given.
    """
    points = np.asarray(points, dtype=float)
    total = np.zeros(points.shape[:-1])
    for atom in atoms:
        _, r = _offsets(points, atom)
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            sr6 = (atom.lj_length / r) ** 6
            u = 4.0 * atom.lj_energy * (sr6**2 - sr6)
        u = np.where(r == 0.0, np.inf, u)
        total = total + u
    if u_max is not None:
        total = np.minimum(total, u_max)
    return total


def eval_U_gradient(points, atoms):
    """Analytic gradient of U; raises SingularityError at atom centers."""
    points = np.asarray(points, dtype=float)
    grad = np.zeros(points.shape)
    for atom in atoms:
        diff, r = _offsets(points, atom)
        if np.any(r == 0.0):
            raise SingularityError(f"U gradient requested at atom center {atom.position}")
        sr6 = (atom.lj_length / r) ** 6
        dudr = 4.0 * atom.lj_energy * (-12.0 * sr6**2 + 6.0 * sr6) / r
        grad = grad + (dudr / r)[..., None] * diff
    return grad


def smeared_charge_density(points, atoms, dim: int):
    """Sum of normalized Gaussians Q_i G_{a_i}(x - x_i) in `dim` dimensions."""
    points = np.asarray(points, dtype=float)
    rho = np.zeros(points.shape[:-1])
    for atom in atoms:
        if atom.charge == 0:
            continue
        _, r = _offsets(points, atom)
        a2 = atom.smear_width**2
        rho = rho + atom.charge * (2.0 * np.pi * a2) ** (-dim / 2) * np.exp(-0.5 * r**2 / a2)
    return rho

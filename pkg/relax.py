"""
L2 gradient-flow relaxation phi_t = -delta F_xi[phi] with semi-implicit
steps, energy-based step acceptance and xi-continuation.

Usage:
    relaxer = FlowRelaxer(model, grid, xi)
    state = relaxer.minimize(phi0, tol=1e-3)
"""
import math
from dataclasses import dataclass, field

import numpy as np
import polars as pl
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from config import DT_GROWTH, DT_MIN, FLOW_SLACK, H_OVER_XI, MAX_FLOW_STEPS, PB_REFRESH, XI0
from energy import EnergyBreakdown, discrete_energy, sampled_U
from forces import variation_terms
from grid import ScalarField, StructuredGrid, atomic_write, resample, stiffness, write_binary
from model import SolvationModel
from pb import PBSolution, diffuse_problem, solve

LOG_COLUMNS = ["step", "t", "dt", "total", "volume", "surface", "vdw", "ele", "grad_norm"]


class StagnationError(RuntimeError):
    def __init__(self, message: str, state: "FlowState"):
        self.state = state
        super().__init__(message)


class FlowBoundError(RuntimeError):
    """max |phi| left the confinement bound of the flow."""


@dataclass(eq=False)
class FlowState:
    phi: ScalarField
    xi: float
    t: float = 0.0
    dt: float = 0.0
    step: int = 0
    breakdown: EnergyBreakdown | None = None
    grad_norm: float = math.inf
    energies: list[float] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    rejected: int = 0
    converged: bool = False
    partial: bool = False
    pb: PBSolution | None = field(default=None, repr=False)

    @property
    def energy(self) -> float:
        return self.breakdown.total


class FlowRelaxer:
    """Semi-implicit flow for one model on one grid at fixed xi."""

    def __init__(self, model: SolvationModel, grid: StructuredGrid, xi: float,
                 pb_refresh: int = PB_REFRESH, dt_max: float | None = None,
                 dt_min: float = DT_MIN, boundary: str = "zero", slack: float = FLOW_SLACK,
                 verbose: bool = False):
        if pb_refresh < 1:
            raise ValueError(f"pb_refresh must be >= 1, got {pb_refresh}")
        self.model = model
        self.grid = grid
        self.xi = xi
        self.pb_refresh = pb_refresh
        self.dt_max = dt_max if dt_max is not None else 64.0 * xi**2
        self.dt_min = dt_min
        self.boundary = boundary
        self.slack = slack
        self.verbose = verbose

        self.K = stiffness(grid)
        self.mass = grid.weights.ravel()
        self.U = sampled_U(grid, model)
        self.bound = math.inf
        self._force_psi = np.zeros(grid.shape)
        self._since_refresh = 0

    # ── energy evaluation ─────────────────────────────────────────────────

    def _solve_pb(self, phi: ScalarField, warm: PBSolution | None) -> PBSolution | None:
        if not self.model.has_electrostatics:
            return None
        initial = warm.psi.values if warm is not None else None
        return solve(diffuse_problem(self.grid, self.model, phi, self.boundary), initial=initial)

    def evaluate(self, phi: ScalarField, warm: PBSolution | None = None) -> tuple[EnergyBreakdown, PBSolution | None]:
        pb = self._solve_pb(phi, warm)
        ele = pb.free_energy if pb is not None else 0.0
        return discrete_energy(phi, self.xi, self.model, ele, self.U), pb

    def gradient_norm(self, phi: ScalarField, pb: PBSolution | None) -> float:
        """Discrete L2 norm of delta F with the current potential."""
        psi = pb.psi.values if pb is not None else np.zeros(self.grid.shape)
        delta = variation_terms(self.grid, phi.values, self.xi, self.model, psi, self.U)
        return math.sqrt(float(np.sum(self.grid.weights * delta**2)))

    # ── stepping ──────────────────────────────────────────────────────────

    def start(self, phi0: ScalarField, dt0: float | None = None) -> FlowState:
        phi0 = phi0.strip() if phi0.grid == self.grid else resample(phi0, self.grid)
        breakdown, pb = self.evaluate(phi0)
        self.bound = max(float(np.max(np.abs(phi0.values))), 1.0) + self.slack
        self._force_psi = pb.psi.values if pb is not None else np.zeros(self.grid.shape)
        self._since_refresh = 0
        state = FlowState(
            phi=phi0, xi=self.xi, dt=dt0 if dt0 is not None else self.xi**2,
            breakdown=breakdown, grad_norm=self.gradient_norm(phi0, pb),
            energies=[breakdown.total], pb=pb,
        )
        state.log.append(self._log_row(state))
        return state

    def _log_row(self, state: FlowState) -> dict:
        b = state.breakdown
        return {
            "step": state.step, "t": state.t, "dt": state.dt, "total": b.total,
            "volume": b.volume_term, "surface": b.surface_term, "vdw": b.vdw_term,
            "ele": b.ele_term, "grad_norm": state.grad_norm,
        }

    def _propose(self, phi: ScalarField, dt: float) -> np.ndarray:
        """(W + dt gamma0 xi K) phi_new = W phi - dt W r(phi)."""
        p = self.model.params
        rest = variation_terms(self.grid, phi.values, self.xi, self.model, self._force_psi, self.U,
                               gradient_term=False)
        A = sp.diags(self.mass) + dt * p.gamma0 * self.xi * self.K
        rhs = self.mass * (phi.values.ravel() - dt * rest.ravel())
        return spsolve(A.tocsc(), rhs).reshape(self.grid.shape)

    def flow_step(self, state: FlowState) -> FlowState:
        """One accepted step; rejected proposals halve dt."""
        dt = state.dt
        rejected = 0
        slack = 64.0 * np.finfo(float).eps * abs(state.energy)
        while True:
            if dt < self.dt_min:
                raise StagnationError(f"dt fell below {self.dt_min:g} at step {state.step}", state)
            values = self._propose(state.phi, dt)
            phi = ScalarField(self.grid, values)
            breakdown, pb = self.evaluate(phi, state.pb)
            if breakdown.total <= state.energy + slack:
                break
            dt *= 0.5
            rejected += 1

        peak = float(np.max(np.abs(phi.values)))
        if peak > self.bound:
            raise FlowBoundError(f"max|phi| = {peak:.4g} exceeds the flow bound {self.bound:.4g}")

        self._since_refresh += 1
        if pb is not None and self._since_refresh >= self.pb_refresh:
            self._force_psi = pb.psi.values
            self._since_refresh = 0

        new = FlowState(
            phi=phi, xi=self.xi, t=state.t + dt, dt=min(dt * DT_GROWTH, self.dt_max),
            step=state.step + 1, breakdown=breakdown, grad_norm=self.gradient_norm(phi, pb),
            energies=state.energies + [breakdown.total], log=list(state.log),
            rejected=state.rejected + rejected, pb=pb,
        )
        new.log.append(self._log_row(new) | {"dt": dt})
        if self.verbose and new.step % 50 == 0:
            print(f"[relax] xi={self.xi:g} step {new.step}: F={breakdown.total:.8g}, |dF|={new.grad_norm:.3e}", flush=True)
        return new

    def minimize(self, phi0: ScalarField, tol: float = 1e-3, max_steps: int = MAX_FLOW_STEPS,
                 dt0: float | None = None) -> FlowState:
        """Flow until the discrete L2 norm of delta F drops below tol or the budget runs out."""
        state = self.start(phi0, dt0)
        if math.isinf(tol) or state.grad_norm <= tol:
            state.converged = True
            return state
        while state.step < max_steps:
            state = self.flow_step(state)
            if state.grad_norm <= tol:
                state.converged = True
                return state
        state.partial = True
        print(f"[relax] budget of {max_steps} steps exhausted at |dF|={state.grad_norm:.3e} (xi={self.xi:g})", flush=True)
        return state


# ── Outputs ────────────────────────────────────────────────────────────────

def write_flow_log(state: FlowState, path: str, config_hash: str = "") -> None:
    frame = pl.DataFrame(state.log).select(LOG_COLUMNS)
    if config_hash:
        frame = frame.with_columns(pl.lit(config_hash).alias("config_hash"))
    atomic_write(path, frame.write_csv)


def checkpoint(state: FlowState, path: str, config_hash: str = "") -> None:
    write_binary(state.phi, path, config_hash)


# ── xi-continuation ────────────────────────────────────────────────────────

def check_schedule(schedule) -> tuple[float, ...]:
    schedule = tuple(float(x) for x in schedule)
    if not schedule:
        raise ValueError("xi schedule is empty")
    if any(not 0.0 < x <= XI0 for x in schedule):
        raise ValueError(f"xi schedule must lie in (0, {XI0}], got {schedule}")
    if any(b >= a for a, b in zip(schedule[:-1], schedule[1:])):
        raise ValueError(f"xi schedule must be strictly decreasing, got {schedule}")
    return schedule


def xi_continuation(model: SolvationModel, grid: StructuredGrid, schedule, phi0: ScalarField,
                    tol: float = 1e-3, max_steps: int = MAX_FLOW_STEPS, h_over_xi: float = H_OVER_XI,
                    dt0: float | None = None, **relaxer_options) -> list[FlowState]:
    """Minimize at each xi, warm-starting from the previous minimizer; refine when xi < h / h_over_xi."""
    states = []
    phi = phi0
    for xi in check_schedule(schedule):
        if grid.h > h_over_xi * xi * (1.0 + 1e-12):
            grid = grid.for_xi(xi, h_over_xi)
            print(f"[relax] xi={xi:g}: refined grid to cells {grid.cells}", flush=True)
        if phi.grid != grid:
            phi = resample(phi, grid)
        relaxer = FlowRelaxer(model, grid, xi, **relaxer_options)
        state = relaxer.minimize(phi, tol=tol, max_steps=max_steps, dt0=dt0)
        print(f"    ✓ xi={xi:g}: F={state.energy:.8g} after {state.step} steps", flush=True)
        states.append(state)
        phi = state.phi
    return states

"""
Config-driven runner for every study of the solvation laboratory.

Usage:
    solvate pb-solve --config configs/born.toml
    solvate energy-study --config configs/ball.toml --threads 4
    solvate counterexample --config configs/counterexample.toml --tol-scale 1.5
    solvate relax --config configs/relax.toml --out results/relax-run

Exit status: 0 when every check passes, 1 when a study fails its
tolerances (or its hypothesis gate), 2 when the config violates a
modelling assumption.
"""
import argparse
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from config import (
    H_OVER_XI, MAX_FLOW_STEPS, PB_REFRESH, STUDIES, TOLERANCES, U_MAX, ExperimentConfig, fields_dir,
    load_config, study_dir,
)
from converge import (
    ConvergenceReport, HypothesisUnmetError, StudySetup, ch_force_study, counterexample_study,
    energy_component_study, equipartition_study, rel_error, solvation_force_study,
)
from energy import coercivity_margin, total_F_0
from grid import InterfaceShape, ScalarField, StructuredGrid, write_binary
from model import (
    SMOOTHSTEPS, AssumptionError, IonicModel, SoluteAtom, SolvationModel, SolvationParams, Species,
)
from pb import (
    born_free_energy, contraction_ratios, continuity_probe, diffuse_problem, sharp_problem, solve,
    solve_sharp,
)
from profiles import beta_limit, canonical_profile, lift_profile, make_profile, recovery_phase_field
from relax import checkpoint, write_flow_log, xi_continuation
from report import render, write_outputs


# ── Building an experiment from its config ────────────────────────────────

@dataclass
class Experiment:
    config: ExperimentConfig
    model: SolvationModel
    grid: StructuredGrid
    shape: InterfaceShape | None
    h_over_xi: float

    @property
    def options(self) -> dict:
        return self.config.options

    @property
    def schedule(self) -> tuple[float, ...]:
        return self.config.schedule


def _collect(problems: list[str], build):
    try:
        return build()
    except AssumptionError as exc:
        problems.extend(exc.violations)
        return None


def build_model(section: dict) -> SolvationModel:
    """SolvationModel from the [model] section; every violated assumption is reported at once."""
    problems = []
    params = _collect(problems, lambda: SolvationParams(
        P0=float(section.get("P0", math.nan)),
        gamma0=float(section.get("gamma0", math.nan)),
        rho0=float(section.get("rho0", math.nan)),
        eps_p=float(section.get("eps_p", math.nan)),
        eps_w=float(section.get("eps_w", math.nan)),
        kBT=float(section.get("kBT", 1.0)),
    ))
    ions = section.get("ions", [])
    ionic = _collect(problems, lambda: IonicModel(tuple(Species(float(i["conc"]), float(i["charge"])) for i in ions)))
    atoms = []
    for spec in section.get("atoms", []):
        atom = _collect(problems, lambda spec=spec: SoluteAtom(**spec))
        if atom is not None:
            atoms.append(atom)
    kind = section.get("dielectric", "quintic")
    if kind not in SMOOTHSTEPS:
        problems.append(f"[dielectric] unknown dielectric interpolation '{kind}'")
    if problems:
        raise AssumptionError(problems)
    return SolvationModel(params, ionic, tuple(atoms), kind, float(section.get("u_max", U_MAX)))


def build_grid(section: dict, schedule) -> tuple[StructuredGrid, float]:
    """Fixed cells when given, otherwise a box resolved for the first xi."""
    radial = bool(section.get("radial", False))
    upper = [float(x) for x in np.atleast_1d(section["upper"])]
    lower = [float(x) for x in np.atleast_1d(section.get("lower", [0.0] * len(upper)))]
    h_over_xi = float(section.get("h_over_xi", H_OVER_XI))
    if "cells" in section:
        cells = [int(n) for n in np.atleast_1d(section["cells"])]
        return StructuredGrid(tuple(lower), tuple(upper), tuple(cells), radial), h_over_xi
    return StructuredGrid.box(lower, upper, h_over_xi * schedule[0], radial), h_over_xi


def build_shape(section: dict | None, grid: StructuredGrid) -> InterfaceShape | None:
    if section is None:
        return None
    match section.get("kind"):
        case "ball":
            default_center = [0.0] * (3 if grid.radial else grid.dim)
            return InterfaceShape.ball(section.get("center", default_center), float(section["radius"]))
        case "plane":
            return InterfaceShape.plane(section["normal"], float(section.get("offset", 0.0)))
        case "slab":
            return InterfaceShape.slab(section["normal"], float(section["lower"]), float(section["upper"]))
    raise ValueError(f"Unknown shape kind: {section.get('kind')} (expected ball, plane or slab)")


def build_experiment(config: ExperimentConfig) -> Experiment:
    """Model, grid and shape of a config; geometric assumptions are checked together."""
    model = build_model(config.model)
    grid, h_over_xi = build_grid(config.grid, config.schedule)
    shape = build_shape(config.shape, grid)
    problems = model.check_geometry(grid)
    if shape is not None:
        try:
            shape.check_inside(grid)
        except ValueError as exc:
            problems.append(f"[geometry] {exc}")
    if problems:
        raise AssumptionError(problems)
    return Experiment(config, model, grid, shape, h_over_xi)


def _setup(exp: Experiment, threads: int, tol_scale: float) -> StudySetup:
    if exp.shape is None:
        raise ValueError(f"study '{exp.config.study}' needs a [shape] section")
    return StudySetup(
        model=exp.model, grid=exp.grid, shape=exp.shape, h_over_xi=exp.h_over_xi,
        threads=threads, tol_scale=tol_scale, seed=exp.config.seed,
        boundary=exp.options.get("boundary", "zero"), tolerances=exp.options.get("tolerances", {}),
    )


# ── Studies ────────────────────────────────────────────────────────────────

def run_pb_solve(exp: Experiment, setup_args: dict, out: str) -> ConvergenceReport:
    """Diffuse, sharp or continuity-probe PB solves with a refined reference."""
    opts = exp.options
    boundary = opts.get("boundary", "zero")
    mode = opts.get("mode", "sharp" if exp.shape is not None else "diffuse")
    xi = float(opts.get("xi", exp.schedule[-1]))
    grid, model, shape = exp.grid, exp.model, exp.shape
    factor = 10 if grid.radial else 2
    report = ConvergenceReport("pb-solve", shape.describe() if shape else {}, [xi] if mode != "sharp" else [])
    tol = opts.get("tolerances", {}).get("pb", TOLERANCES["pb"]) * setup_args["tol_scale"]

    if mode == "probe":
        phis = [lift_profile(canonical_profile(x), shape, grid) for x in exp.schedule]
        rows = continuity_probe(sharp_problem(grid, model, shape, boundary), phis)
        report.schedule = list(exp.schedule)
        for x, row in zip(exp.schedule, rows):
            report.add("h1_delta", x, row["h1_delta"], 0.0)
            report.add("energy_delta", x, row["energy_delta"], 0.0)
            report.add("l1_phi", x, row["l1_phi"], 0.0)
        deltas = [row["h1_delta"] for row in rows]
        report.checks["continuity"] = {
            "quantity": "h1_delta", "rule": "last <= first", "value": deltas[-1],
            "tolerance": deltas[0], "passed": bool(deltas[-1] <= deltas[0]),
        }
        report.provenance = {"mode": mode, "boundary": boundary, "grid": grid.describe()}
        return report.finalize()

    if mode == "diffuse":
        kind = opts.get("profile_kind", "canonical")
        a = float(opts.get("well_scale", 1.0))
        if shape is not None:
            phi = lift_profile(make_profile(kind, xi, a), shape, grid)
            fine_phi = lift_profile(make_profile(kind, xi, a), shape, grid.refine(factor))
        else:
            phi = ScalarField(grid, np.zeros(grid.shape))
            fine_phi = ScalarField(grid.refine(factor), np.zeros(grid.refine(factor).shape))
        solution = solve(diffuse_problem(grid, model, phi, boundary))
        reference = solve(diffuse_problem(fine_phi.grid, model, fine_phi, boundary))
    elif mode == "sharp":
        if shape is None:
            raise ValueError("sharp PB solves need a [shape] section")
        solution = solve_sharp(shape, grid, model, boundary)
        reference = solve_sharp(shape, grid.refine(factor), model, boundary)
    else:
        raise ValueError(f"Unknown pb-solve mode: {mode} (expected sharp, diffuse or probe)")

    label = xi if mode == "diffuse" else "sharp"
    report.add("ele", label, solution.free_energy, reference.free_energy)
    report.checks["refined_reference"] = {
        "quantity": "ele", "final_rel_error": rel_error(solution.free_energy, reference.free_energy),
        "tolerance": tol, "measure": "final",
        "passed": bool(rel_error(solution.free_energy, reference.free_energy) <= tol),
    }
    born = _born_target(exp, boundary)
    if mode == "sharp" and born is not None:
        report.add("born", label, solution.free_energy, born)
        report.checks["born"] = {
            "quantity": "born", "final_rel_error": rel_error(solution.free_energy, born),
            "tolerance": tol, "measure": "final", "passed": bool(rel_error(solution.free_energy, born) <= tol),
        }
    ratios = contraction_ratios(solution.residual_history)[-3:]
    report.checks["newton_contraction"] = {
        "quantity": "contraction", "value": max(ratios, default=0.0), "tolerance": 0.3,
        "passed": bool(max(ratios, default=0.0) <= 0.3),
    }

    os.makedirs(fields_dir(out), exist_ok=True)
    write_binary(solution.psi, f"{fields_dir(out)}/psi.bin", exp.config.digest)
    write_binary(ScalarField(grid, solution.problem.rho), f"{fields_dir(out)}/rho.bin", exp.config.digest)
    report.provenance = {
        "mode": mode, "boundary": boundary, "grid": grid.describe(),
        "reference_grid": reference.problem.grid.describe(),
        "pb_diagnostics": solution.diagnostics(),
    }
    print(f"[pb-solve] F_ele = {solution.free_energy:.10g} after {solution.iterations} Newton steps", flush=True)
    return report.finalize()


def _born_target(exp: Experiment, boundary: str) -> float | None:
    """Closed-form F_ele for one centered charge in a radial ball without ions."""
    model, grid, shape = exp.model, exp.grid, exp.shape
    charged = [a for a in model.atoms if a.charge != 0]
    if not grid.radial or shape is None or model.ionic.count or boundary != "zero" or len(charged) != 1:
        return None
    atom = charged[0]
    p = model.params
    return born_free_energy(atom.charge, atom.smear_width, shape.radius, p.eps_p, p.eps_w, grid.upper[0])


def run_energy_study(exp, setup_args, out):
    setup = _setup(exp, **setup_args)
    return energy_component_study(setup, exp.schedule, exp.options.get("sequence", "recovery-lift"),
                                  float(exp.options.get("well_scale", 1.0)),
                                  flow_tol=float(exp.options.get("grad_tol", 1e-3)),
                                  max_steps=int(exp.options.get("max_steps", MAX_FLOW_STEPS)))


def run_equipartition(exp, setup_args, out):
    setup = _setup(exp, **setup_args)
    return equipartition_study(setup, exp.schedule, exp.options.get("sequence", "recovery-lift"),
                               float(exp.options.get("well_scale", 1.0)),
                               flow_tol=float(exp.options.get("grad_tol", 1e-3)),
                               max_steps=int(exp.options.get("max_steps", MAX_FLOW_STEPS)))


def run_ch_force(exp, setup_args, out):
    setup = _setup(exp, **setup_args)
    try:
        return ch_force_study(setup, exp.schedule, exp.options.get("sequence", "recovery-lift"),
                              float(exp.options.get("well_scale", 1.0)), exp.options.get("test_fields"))
    except HypothesisUnmetError as exc:
        return exc.report


def run_solvation_force(exp, setup_args, out):
    setup = _setup(exp, **setup_args)
    try:
        return solvation_force_study(setup, exp.schedule, exp.options.get("sequence", "recovery-lift"),
                                     exp.options.get("test_fields"))
    except HypothesisUnmetError as exc:
        return exc.report


def run_counterexample(exp, setup_args, out):
    setup = _setup(exp, **setup_args)
    return counterexample_study(setup, exp.schedule, float(exp.options.get("well_scale", 4.0)))


def run_relax(exp: Experiment, setup_args: dict, out: str) -> ConvergenceReport:
    """xi-continuation from the recovery field; one flow log and checkpoint per xi."""
    if exp.shape is None:
        raise ValueError("relax needs a [shape] section for its initial field")
    opts = exp.options
    schedule = exp.schedule
    grid = exp.grid.for_xi(schedule[0], exp.h_over_xi)
    kind = opts.get("profile_kind", "clamped")
    if kind == "clamped":
        phi0 = recovery_phase_field(exp.shape, schedule[0], grid)
    else:
        phi0 = lift_profile(make_profile(kind, schedule[0], float(opts.get("well_scale", 1.0))), exp.shape, grid)
    tol = float(opts.get("grad_tol", 1e-3))
    relaxer_options = {
        "pb_refresh": int(opts.get("pb_refresh", PB_REFRESH)),
        "boundary": opts.get("boundary", "zero"),
    }
    if "dt_max" in opts:
        relaxer_options["dt_max"] = float(opts["dt_max"])
    states = xi_continuation(exp.model, grid, schedule, phi0, tol=tol,
                             max_steps=int(opts.get("max_steps", MAX_FLOW_STEPS)),
                             h_over_xi=exp.h_over_xi, dt0=opts.get("dt0"), **relaxer_options)

    report = ConvergenceReport("relax", exp.shape.describe(), list(schedule))
    sharp_pb = solve_sharp(exp.shape, states[-1].phi.grid, exp.model) if exp.model.has_electrostatics else None
    reference = total_F_0(exp.shape, states[-1].phi.grid, exp.model, sharp_pb)
    monotone = True
    for xi, state in zip(schedule, states):
        write_flow_log(state, f"{out}/flow_{xi:g}.csv", exp.config.digest)
        checkpoint(state, f"{fields_dir(out)}/phi_{xi:g}.bin", exp.config.digest)
        report.add("total", xi, state.energy, reference.total)
        report.add("grad_norm", xi, state.grad_norm, 0.0, steps=state.step, partial=state.partial)
        slack = 64.0 * np.finfo(float).eps * np.abs(np.asarray(state.energies[:-1]))
        monotone &= bool(np.all(np.diff(state.energies) <= slack))
        if "c3" in opts and "c4" in opts:
            margin = coercivity_margin(state.breakdown, state.phi, float(opts["c3"]), float(opts["c4"]))
            report.add("coercivity_margin", xi, margin, 0.0)
            report.checks[f"coercivity_{xi:g}"] = {
                "quantity": "coercivity_margin", "value": margin, "tolerance": 0.0, "passed": bool(margin >= 0.0),
            }
    report.checks["energy_monotone"] = {"quantity": "total", "passed": monotone}
    report.checks["converged"] = {
        "quantity": "grad_norm", "value": states[-1].grad_norm, "tolerance": tol,
        "passed": bool(all(s.converged for s in states)),
    }
    report.notes.append("total targets are F_0 of the initial shape, for reference only")
    report.provenance = {
        "flow": "L2 gradient flow, semi-implicit (implicit gradient term), energy-accepted steps",
        "grid": grid.describe(), "h_over_xi": exp.h_over_xi, "grad_tol": tol,
        "initial_profile": kind, **relaxer_options,
    }
    return report.finalize()


def run_profile_dump(exp: Experiment, setup_args: dict, out: str) -> ConvergenceReport:
    """Tabulated profile to profile.csv with its line energy against the limit."""
    opts = exp.options
    kind = opts.get("profile_kind", "canonical")
    a = float(opts.get("well_scale", 1.0))
    xi = float(opts.get("xi", exp.schedule[-1]))
    profile = make_profile(kind, xi, a)
    profile.export_csv(f"{out}/profile.csv", config_hash=exp.config.digest)
    s, g = profile.tabulate()

    report = ConvergenceReport("profile-dump", {}, [xi])
    target = beta_limit(a) if kind == "gk" else 1.0
    energy = profile.line_energy()
    report.add("line_energy", xi, energy, target)
    report.checks["monotone"] = {"quantity": "profile", "passed": bool(np.all(np.diff(g) >= 0.0))}
    if kind == "canonical":
        residual = float(np.max(np.abs(profile.ode_residual(s))))
        report.add("ode_residual", xi, residual, 0.0)
        report.checks["line_energy"] = {
            "quantity": "line_energy", "final_rel_error": rel_error(energy, 1.0),
            "tolerance": 1e-8, "measure": "final", "passed": bool(rel_error(energy, 1.0) <= 1e-8),
        }
        report.checks["ode_residual"] = {
            "quantity": "ode_residual", "value": residual, "tolerance": 1e-12, "passed": bool(residual <= 1e-12),
        }
    report.provenance = {"kind": kind, "well_scale": a, "xi": xi, "width": profile.width, "nodes": len(s)}
    return report.finalize()


RUNNERS = {
    "pb-solve": run_pb_solve,
    "energy-study": run_energy_study,
    "equipartition": run_equipartition,
    "ch-force": run_ch_force,
    "solvation-force": run_solvation_force,
    "counterexample": run_counterexample,
    "relax": run_relax,
    "profile-dump": run_profile_dump,
}


# ── Entry points ───────────────────────────────────────────────────────────

def run(config_path: str, study: str | None = None, out: str | None = None, threads: int = 1,
        tol_scale: float = 1.0, seed: int | None = None, quiet: bool = False) -> int:
    """Run one config; returns the exit status."""
    config = load_config(config_path)
    if seed is not None:
        config.seed = seed
    study = study or config.study
    if study not in RUNNERS:
        raise ValueError(f"Unknown study: {study} (expected one of {STUDIES})")
    out_dir = study_dir(out or config.out, study)

    try:
        exp = build_experiment(config)
    except AssumptionError as exc:
        print(f"[solvate] invalid config {config_path}:", flush=True)
        for violation in exc.violations:
            print(f"  ✗ {violation}", flush=True)
        return 2

    print(f"[solvate] {study}: config {config_path} (hash {config.digest})", flush=True)
    os.makedirs(out_dir, exist_ok=True)
    report = RUNNERS[study](exp, {"threads": threads, "tol_scale": tol_scale}, out_dir)
    report.provenance["config_path"] = config_path
    report.provenance["config_hash"] = config.digest
    write_outputs(report, out_dir, config.digest)

    text, _ = render(report)
    if not quiet:
        print(text, flush=True)
    mark = "✓" if report.passed else "✗"
    print(f"  {mark} {study}: {report.status} → {out_dir}", flush=True)
    return 0 if report.passed else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="solvate", description="Phase-field solvation studies")
    parser.add_argument("study", choices=STUDIES)
    parser.add_argument("--config", required=True, help="TOML experiment config")
    parser.add_argument("--out", default=None, help="Output directory (default: results/<study>)")
    parser.add_argument("--threads", type=int, default=1, help="Workers for the xi schedule")
    parser.add_argument("--tol-scale", type=float, default=1.0, help="Multiplier on every tolerance")
    parser.add_argument("--seed", type=int, default=None, help="Override the config seed")
    args = parser.parse_args(argv)

    if args.threads < 1:
        parser.error("--threads must be >= 1")
    if not args.tol_scale > 0:
        parser.error("--tol-scale must be positive")
    return run(args.config, args.study, args.out, args.threads, args.tol_scale, args.seed)


if __name__ == "__main__":
    sys.exit(main())

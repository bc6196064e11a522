"""
Shared configuration for the solvation laboratory.
"""
import hashlib
import json
import os
import tomllib
from dataclasses import dataclass, field

# ── Units ───────────────────────────────────────────────────────────────────
KBT = 1.0           # thermal energy; lengths are in units of the LJ diameter

# ── Phase-field defaults ────────────────────────────────────────────────────
XI0 = 0.5                                    # largest admissible interface width
DEFAULT_SCHEDULE = (0.2, 0.14, 0.1, 0.07, 0.05)
H_OVER_XI = 1 / 8                            # grid spacing relative to xi
UNDERRESOLVED_H_OVER_XI = 1 / 4              # lifts flag fields coarser than this
U_MAX = 1e3                                  # LJ cap used when sampling on grids
PROFILE_NODES = 4096

# ── Solver tolerances ───────────────────────────────────────────────────────
PB_TOL = 1e-10      # normwise relative sup-norm residual
MAX_NEWTON = 30
MAX_HALVINGS = 30
C_BOUND = 50.0      # cap on |psi| off the solute, in kBT/e
QUAD_TOL = 1e-10    # surface quadrature order doubling

# ── Relaxation ──────────────────────────────────────────────────────────────
PB_REFRESH = 5
DT_GROWTH = 1.5
DT_MIN = 1e-14
FLOW_SLACK = 0.5    # allowed overshoot of max|phi| beyond max(initial, 1)
MAX_FLOW_STEPS = 2000

# ── Acceptance ──────────────────────────────────────────────────────────────
GATE_TOL = 0.05     # energy-convergence hypothesis gate
REL_FLOOR = 1e-12   # floor in |value - target| / max(|target|, floor)
TOLERANCES = {
    "volume": 0.01,
    "surface": 0.02,
    "vdw": 0.02,
    "ele": 0.03,
    "total": 0.03,
    "counterexample": 0.02,
    "ch_force": 0.03,
    "force": 0.03,
    "identity": 0.02,
    "pb": 0.005,          # against a 10x finer radial (2x Cartesian) solve
}
FIT_TOLERANCES = {      # on the fitted limit; other quantities reuse TOLERANCES
    "surface": 0.01,
}

# ── Paths ───────────────────────────────────────────────────────────────────
PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))
CONFIGS_DIR = f"{PROJECT_ROOT}/configs"
RESULTS_DIR = f"{PROJECT_ROOT}/results"

STUDIES = [
    "pb-solve", "energy-study", "equipartition", "ch-force",
    "solvation-force", "counterexample", "relax", "profile-dump",
]


def study_dir(out: str | None, name: str) -> str:
    """Path to the output directory of a study."""
    return out if out else f"{RESULTS_DIR}/{name}"


def report_path(out: str) -> str:
    return f"{out}/report.json"


def rows_path(out: str) -> str:
    return f"{out}/rows.csv"


def provenance_path(out: str) -> str:
    return f"{out}/provenance.txt"


def fields_dir(out: str) -> str:
    return f"{out}/fields"


# ── Experiment config files ────────────────────────────────────────────────
# Allowed keys per section; anything else is rejected at load.
TOP_KEYS = {"study", "seed", "out", "model", "grid", "shape", "schedule", "study_options"}
MODEL_KEYS = {"P0", "gamma0", "rho0", "eps_p", "eps_w", "kBT", "dielectric", "u_max", "atoms", "ions"}
ATOM_KEYS = {"position", "charge", "lj_energy", "lj_length", "smear_width"}
ION_KEYS = {"conc", "charge"}
GRID_KEYS = {"radial", "lower", "upper", "cells", "h_over_xi"}
SHAPE_KEYS = {"kind", "normal", "offset", "lower", "upper", "center", "radius"}
SCHEDULE_KEYS = {"xi"}
OPTION_KEYS = {
    "sequence", "well_scale", "test_fields", "boundary", "pb_refresh", "dt0",
    "dt_max", "max_steps", "grad_tol", "tolerances", "profile_kind", "xi", "mode",
    "c3", "c4",
}


@dataclass
class ExperimentConfig:
    """Parsed experiment config: raw sections plus provenance."""
    study: str
    seed: int
    out: str | None
    model: dict
    grid: dict
    shape: dict | None
    schedule: tuple[float, ...]
    options: dict = field(default_factory=dict)
    source: str = ""
    digest: str = ""


def config_hash(parsed: dict) -> str:
    """Short sha256 of the canonical JSON form of a parsed config."""
    canonical = json.dumps(parsed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _check_keys(section: str, given: dict, allowed: set[str]) -> list[str]:
    unknown = sorted(set(given) - allowed)
    return [f"[{section}] unknown key '{k}'" for k in unknown]


def parse_config(parsed: dict, source: str = "<memory>") -> ExperimentConfig:
    """
    Validate section keys of an already-parsed TOML document.

    Physical assumptions are checked when the model is built from the
    returned sections (see solvate.build_experiment).
    """
    # `[study]` would collide with the top-level `study` name, so options live in [options]
    parsed = dict(parsed)
    if "options" in parsed:
        parsed["study_options"] = parsed.pop("options")

    problems = _check_keys("top", parsed, TOP_KEYS)
    model = parsed.get("model", {})
    problems += _check_keys("model", model, MODEL_KEYS)
    for i, atom in enumerate(model.get("atoms", [])):
        problems += _check_keys(f"model.atoms[{i}]", atom, ATOM_KEYS)
    for i, ion in enumerate(model.get("ions", [])):
        problems += _check_keys(f"model.ions[{i}]", ion, ION_KEYS)
    grid = parsed.get("grid", {})
    problems += _check_keys("grid", grid, GRID_KEYS)
    shape = parsed.get("shape")
    if shape is not None:
        problems += _check_keys("shape", shape, SHAPE_KEYS)
    schedule = parsed.get("schedule", {})
    problems += _check_keys("schedule", schedule, SCHEDULE_KEYS)
    options = parsed.get("study_options", {})
    problems += _check_keys("options", options, OPTION_KEYS)

    study = parsed.get("study")
    if study not in STUDIES:
        problems.append(f"[top] unknown study '{study}' (expected one of {STUDIES})")
    if problems:
        raise ValueError("Invalid config " + source + ":\n  " + "\n  ".join(problems))

    return ExperimentConfig(
        study=study,
        seed=int(parsed.get("seed", 0)),
        out=parsed.get("out"),
        model=model,
        grid=grid,
        shape=shape,
        schedule=tuple(float(x) for x in schedule.get("xi", DEFAULT_SCHEDULE)),
        options=options,
        source=source,
        digest=config_hash(parsed),
    )


def load_config(path: str) -> ExperimentConfig:
    """Load and key-check a TOML experiment config."""
    with open(path, "rb") as f:
        parsed = tomllib.load(f)
    return parse_config(parsed, source=path)

import json

import polars as pl
import pytest

from config import load_config
from model import AssumptionError
from solvate import build_experiment, main

MODEL = """
[model]
P0 = 0.01
gamma0 = 0.1
rho0 = 0.03
eps_p = {eps_p}
eps_w = 80.0
"""

PROFILE = """
study = "profile-dump"
{model}
[grid]
lower = [-1.0]
upper = [1.0]
cells = [64]

[options]
profile_kind = "canonical"
xi = 0.05
"""


def write_config(tmp_path, text: str, name: str = "run.toml") -> str:
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def profile_config(tmp_path, eps_p: float = 1.0) -> str:
    return write_config(tmp_path, PROFILE.format(model=MODEL.format(eps_p=eps_p)))


def test_profile_dump_writes_its_outputs(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["profile-dump", "--config", profile_config(tmp_path), "--out", str(out)]) == 0
    with open(out / "report.json") as f:
        report = json.load(f)
    assert report["status"] == "pass"
    profile = pl.read_csv(out / "profile.csv", schema_overrides={"config_hash": pl.Utf8})
    assert profile.columns == ["s", "g", "config_hash"]
    assert set(profile["config_hash"].to_list()) == {report["config_hash"]}
    assert report["provenance"]["config_hash"] == report["config_hash"]
    assert (out / "provenance.txt").exists()
    assert "✓ profile-dump: pass" in capsys.readouterr().out


def test_equal_permittivities_are_rejected(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["profile-dump", "--config", profile_config(tmp_path, eps_p=80.0), "--out", str(out)]) == 2
    assert "(A3) [dielectric] eps_p and eps_w must be positive and distinct" in capsys.readouterr().out
    assert not (out / "report.json").exists()


def test_every_violation_is_reported(tmp_path):
    text = PROFILE.format(model=MODEL.format(eps_p=1.0)) + """
[[model.atoms]]
position = [2.0]
charge = 1.0
"""
    text = text.replace("[options]", "[shape]\nkind = \"plane\"\nnormal = [1.0]\noffset = 3.0\n\n[options]")
    config = load_config(write_config(tmp_path, text))
    with pytest.raises(AssumptionError) as info:
        build_experiment(config)
    violations = info.value.violations
    assert len(violations) == 2
    assert all(v.startswith("(A1) [geometry]") for v in violations)
    assert any("not interior" in v for v in violations)
    assert any("does not cut the box" in v for v in violations)


def test_unknown_keys_fail_at_load(tmp_path):
    text = PROFILE.format(model=MODEL.format(eps_p=1.0)).replace("xi = 0.05", "xi = 0.05\nwidth = 2")
    with pytest.raises(ValueError, match="unknown key 'width'"):
        load_config(write_config(tmp_path, text))


def test_reruns_are_identical(tmp_path):
    config = profile_config(tmp_path)
    for name in ("a", "b"):
        assert main(["profile-dump", "--config", config, "--out", str(tmp_path / name), "--seed", "3"]) == 0
    first = pl.read_csv(tmp_path / "a" / "rows.csv")
    second = pl.read_csv(tmp_path / "b" / "rows.csv")
    assert first.equals(second)
    assert (tmp_path / "a" / "profile.csv").read_bytes() == (tmp_path / "b" / "profile.csv").read_bytes()


def test_argument_validation(tmp_path):
    config = profile_config(tmp_path)
    with pytest.raises(SystemExit) as info:
        main(["profile-dump", "--config", config, "--threads", "0"])
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        main(["no-such-study", "--config", config])


# ── Every study through main ───────────────────────────────────────────────

LINE = """
study = "{study}"
{model}
[grid]
lower = [-1.0]
upper = [1.0]
h_over_xi = 0.0625

[shape]
kind = "plane"
normal = [1.0]
offset = 0.0

[schedule]
xi = {schedule}

[options]
{options}
"""

BALL = """
study = "{study}"
{model}{atoms}
[grid]
radial = true
upper = [{upper}]
{cells}
[shape]
kind = "ball"
radius = {radius}

[schedule]
xi = {schedule}

[options]
{options}
"""


def run_study(tmp_path, template: str, *flags: str, **fields) -> tuple[int, dict, str]:
    fields.setdefault("model", MODEL.format(eps_p=1.0))
    fields.setdefault("options", "")
    study = fields["study"]
    config = write_config(tmp_path, template.format(**fields), name=f"{study}.toml")
    out = tmp_path / study
    code = main([study, "--config", config, "--out", str(out), *flags])
    with open(out / "report.json") as f:
        return code, json.load(f), str(out)


def ball(study: str, schedule, options: str = "", atoms: str = "", upper: float = 3.0,
         radius: float = 1.0, cells: str = "") -> dict:
    return {"study": study, "schedule": schedule, "options": options, "atoms": atoms,
            "upper": upper, "radius": radius, "cells": cells}


def test_pb_solve_matches_born_and_its_refined_reference(tmp_path):
    atoms = "\n[[model.atoms]]\nposition = [0.0, 0.0, 0.0]\ncharge = 1.0\nsmear_width = 0.5\n"
    fields = ball("pb-solve", [0.1], 'mode = "sharp"', atoms, upper=8.0, radius=2.0, cells="cells = [512]\n")
    code, report, out = run_study(tmp_path, BALL, **fields)
    assert code == 0
    assert report["status"] == "pass"
    assert report["checks"]["born"]["passed"]
    assert report["checks"]["refined_reference"]["passed"]
    assert report["checks"]["newton_contraction"]["passed"]
    assert report["provenance"]["reference_grid"]["cells"] == [5120]
    assert (tmp_path / "pb-solve" / "fields" / "psi.bin").exists()


def test_energy_study_passes(tmp_path):
    code, report, _ = run_study(tmp_path, BALL, **ball("energy-study", [0.04, 0.02, 0.01]))
    assert code == 0
    assert report["checks"]["volume"]["tolerance"] == 0.01


def test_failed_tolerances_exit_with_one(tmp_path):
    fields = {"study": "counterexample", "schedule": [0.02, 0.01, 0.005], "options": "well_scale = 4.0"}
    code, report, _ = run_study(tmp_path, LINE, **fields)
    assert code == 0 and report["status"] == "pass"

    code, report, _ = run_study(tmp_path, LINE, "--tol-scale", "1e-9", **fields)
    assert code == 1
    assert report["status"] == "fail"
    assert not report["checks"]["surface"]["passed"]


def test_equipartition_of_canonical_lifts(tmp_path):
    code, report, _ = run_study(tmp_path, LINE, study="equipartition", schedule=[0.1, 0.05, 0.025])
    assert code == 0
    assert report["checks"]["discrepancy_vanishes"]["passed"]


def test_ch_force_reports_an_unmet_hypothesis(tmp_path):
    fields = {"study": "ch-force", "schedule": [0.02, 0.01, 0.005],
              "options": 'sequence = "gk"\nwell_scale = 4.0'}
    code, report, _ = run_study(tmp_path, LINE, **fields)
    assert code == 1
    assert report["status"] == "hypothesis unmet"
    assert not report["checks"]["hypothesis"]["passed"]


def test_solvation_force_waits_for_energy_convergence(tmp_path):
    code, report, _ = run_study(tmp_path, BALL, "--tol-scale", "1e-9", **ball("solvation-force", [0.2, 0.1, 0.05]))
    assert code == 1
    assert report["status"] == "hypothesis unmet"
    assert report["checks"]["hypothesis"]["value"] == "fail"
    assert report["rows"] == []


def test_relax_writes_logs_and_checkpoints(tmp_path):
    fields = ball("relax", [0.2, 0.1], "max_steps = 3\ngrad_tol = 1e-12")
    code, report, out = run_study(tmp_path, BALL, **fields)
    assert code == 1
    assert not report["checks"]["converged"]["passed"]
    assert report["checks"]["energy_monotone"]["passed"]
    for xi in ("0.2", "0.1"):
        log = pl.read_csv(f"{out}/flow_{xi}.csv", schema_overrides={"config_hash": pl.Utf8})
        assert set(log["config_hash"].to_list()) == {report["config_hash"]}
        assert (tmp_path / "relax" / "fields" / f"phi_{xi}.bin").exists()

"""
Human-readable tables and on-disk outputs for ConvergenceReport.
"""
import json
import math
import os
import sys

import polars as pl

from config import provenance_path, report_path, rows_path
from converge import ConvergenceReport, richardson_fit
from grid import atomic_write


class Tee:
    """Mirror stdout into a log file while the context is open."""
    def __init__(self, filename: str):
        self.filename = filename
        self.terminal = sys.stdout
        self.log = None

    def __enter__(self) -> "Tee":
        self.terminal = sys.stdout
        self.log = open(self.filename, "w")
        sys.stdout = self
        return self

    def __exit__(self, *exc) -> None:
        sys.stdout = self.terminal
        self.log.close()

    def write(self, message: str) -> None:
        self.terminal.write(message)
        self.log.write(message)

    def flush(self) -> None:
        self.terminal.flush()
        self.log.flush()


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value:.6g}"


def quantity_frame(report: ConvergenceReport, quantity: str) -> pl.DataFrame:
    """Rows of one quantity, with the running fit exponent once three points exist."""
    rows = [r for r in report.rows if r["quantity"] == quantity]
    numeric = [r for r in rows if r["xi"] != "sharp"]
    ordered = numeric + [r for r in rows if r["xi"] == "sharp"]
    frame = pl.DataFrame({
        "xi": [str(r["xi"]) for r in ordered],
        "value": [r["value"] for r in ordered],
        "target": [r["target"] for r in ordered],
        "rel_error": [r["rel_error"] for r in ordered],
    })
    if len(numeric) >= 3:
        xis, values = [r["xi"] for r in numeric], [r["value"] for r in numeric]
        exponents = [richardson_fit(xis[: k + 1], values[: k + 1])[1] if k >= 2 else None for k in range(len(numeric))]
        exponents += [None] * (frame.height - len(exponents))
        frame = frame.with_columns(pl.Series("fit_exponent", exponents, dtype=pl.Float64))
    return frame


def render(report: ConvergenceReport) -> tuple[str, pl.DataFrame]:
    """Plain-text table per quantity, followed by the checks; plus the tidy rows frame."""
    lines = [f"Study: {report.study}", f"Shape: {report.shape}", f"Status: {report.status}", ""]
    for quantity in report.quantities():
        frame = quantity_frame(report, quantity)
        has_fit = "fit_exponent" in frame.columns
        header = f"{'xi':<10} {'value':<14} {'target':<14} {'rel-err':<12}" + (f" {'p':<8}" if has_fit else "")
        lines += [quantity, "-" * len(header), header, "-" * len(header)]
        for row in frame.iter_rows(named=True):
            line = f"{row['xi']:<10} {_fmt(row['value']):<14} {_fmt(row['target']):<14} {_fmt(row['rel_error']):<12}"
            if has_fit:
                line += f" {_fmt(row['fit_exponent']):<8}"
            lines.append(line)
        lines.append("")

    if report.checks:
        lines.append("Checks")
        lines.append("-" * 50)
        for name, check in report.checks.items():
            mark = "✓" if check["passed"] else "✗"
            detail = check.get("measure", check.get("rule", ""))
            value = check.get("fit_rel_error") if check.get("measure") == "fit" else check.get("final_rel_error", check.get("value"))
            line = f"  {mark} {name:<28} {_fmt(value):<12} tol {_fmt(check.get('tolerance'))}  {detail}"
            if check.get("measure") == "final+fit":
                line += f" (fit {_fmt(check['fit_rel_error'])} tol {_fmt(check['fit_tolerance'])})"
            lines.append(line)
    for note in report.notes:
        lines.append(f"  note: {note}")
    return "\n".join(lines) + "\n", report.rows_frame()


def provenance_text(report: ConvergenceReport, config_hash: str) -> str:
    lines = [f"config_hash: {config_hash}", f"study: {report.study}", f"status: {report.status}"]
    for key, value in sorted(report.to_dict()["provenance"].items()):
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"


def write_outputs(report: ConvergenceReport, out_dir: str, config_hash: str = "") -> dict:
    """report.json, rows.csv and provenance.txt under out_dir, each written atomically."""
    os.makedirs(out_dir, exist_ok=True)
    frame = report.rows_frame()
    if config_hash:
        frame = frame.with_columns(pl.lit(config_hash).alias("config_hash"))
    payload = report.to_dict() | {"config_hash": config_hash}

    paths = {"report": report_path(out_dir), "rows": rows_path(out_dir), "provenance": provenance_path(out_dir)}
    atomic_write(paths["report"], lambda tmp: _write_text(tmp, json.dumps(payload, sort_keys=True, indent=2)))
    atomic_write(paths["rows"], frame.write_csv)
    atomic_write(paths["provenance"], lambda tmp: _write_text(tmp, provenance_text(report, config_hash)))
    return paths


def _write_text(path: str, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)

"""
Step 1: Run every experiment config through the study runner.

Usage:
    python 1_run_studies.py
    python 1_run_studies.py --only counterexample
    python 1_run_studies.py --configs my_configs --threads 4
"""
import argparse
import glob
import os

from config import CONFIGS_DIR, RESULTS_DIR
from solvate import run


def main():
    parser = argparse.ArgumentParser(description="Run all experiment configs")
    parser.add_argument("--configs", default=CONFIGS_DIR, help="Directory of TOML configs")
    parser.add_argument("--only", default=None, help="Run a single config by file stem")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--tol-scale", type=float, default=1.0)
    args = parser.parse_args()

    paths = sorted(glob.glob(f"{args.configs}/*.toml"))
    if args.only:
        paths = [p for p in paths if os.path.splitext(os.path.basename(p))[0] == args.only]
    if not paths:
        print(f"No configs found in {args.configs}")
        return

    print(f"Running {len(paths)} config(s)...\n")
    failures = []
    for path in paths:
        name = os.path.splitext(os.path.basename(path))[0]
        print(f"  Config={name}...", flush=True)
        status = run(path, out=f"{RESULTS_DIR}/{name}", threads=args.threads,
                     tol_scale=args.tol_scale, quiet=True)
        if status == 0:
            print(f"    ✓ {name} passed")
        else:
            print(f"    ✗ {name} exited with status {status}")
            failures.append(name)

    if failures:
        print(f"\n{len(failures)} failing: {', '.join(failures)}")
    print("\nDone. Run step 2 to collect the reports.")


if __name__ == "__main__":
    main()

"""
Step 2: Render every saved report into one summary file.

Usage:
    python 2_summarize.py
    python 2_summarize.py --results results
"""
import argparse
import glob
import json
import os

from config import RESULTS_DIR
from converge import ConvergenceReport
from report import Tee, render


def main():
    parser = argparse.ArgumentParser(description="Summarize study reports")
    parser.add_argument("--results", default=RESULTS_DIR)
    args = parser.parse_args()

    paths = sorted(glob.glob(f"{args.results}/**/report.json", recursive=True))
    if not paths:
        print(f"No reports found under {args.results}")
        return

    with Tee(f"{args.results}/summary.txt"):
        statuses = []
        for path in paths:
            with open(path) as f:
                report = ConvergenceReport.from_dict(json.load(f))
            text, _ = render(report)
            print("=" * 60)
            print(os.path.relpath(os.path.dirname(path), args.results))
            print("=" * 60)
            print(text)
            statuses.append((os.path.dirname(path), report.status))

        print("\nSummary")
        print("-" * 60)
        print(f"{'Study':<40} {'Status':<16}")
        print("-" * 60)
        for directory, status in statuses:
            mark = "✓" if status == "pass" else "✗"
            print(f"{mark} {os.path.relpath(directory, args.results):<38} {status:<16}")
        print("\nDone.")


if __name__ == "__main__":
    main()

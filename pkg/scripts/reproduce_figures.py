#!/usr/bin/env python3
"""Reproduce the headline experiment artifacts.

Runs the clean baseline and the graph-based poisoning attack against the
cosine-threshold filter, then emits the figure data CSVs for each run:

    fig4_data.csv  round, accuracy, asr        (attack impact over time)
    fig5_data.csv  round, per-client cosine, threshold  (filter view)

Usage:
    python scripts/reproduce_figures.py [--out runs/figures]
"""

import argparse
import os
import sys

from fedpoison import cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=os.path.join("runs", "figures"))
    args = ap.parse_args()

    jobs = [
        ("baseline_clean", os.path.join(args.out, "baseline_clean")),
        ("grmp_vs_cosine", os.path.join(args.out, "grmp_vs_cosine")),
    ]
    for scenario, out_dir in jobs:
        code = cli.main(["scenario", scenario, "--out", out_dir])
        if code != 0:
            return code
        code = cli.main(["plotdata", out_dir])
        if code != 0:
            return code
        print(f"figure data written to {out_dir}/fig4_data.csv and fig5_data.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""Time the full pipeline on a small-community-scale dataset.

Generates 36 taxa / 5 habitats / 12 samples per habitat, then runs
simulate -> cv -> network -> diffnet through the CLI and reports wall time
and failed-cell counts.
"""

import argparse
import sys
import time
from pathlib import Path

from fusenet.cli import main as cli_main


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--jobs", type=int, default=2)
    args = parser.parse_args(argv)

    out = Path(args.out)
    common = ["--k-folds", "3", "--inner-folds", "3", "--n-lambda", "12",
              "--n-gamma", "5", "--threads", str(args.jobs),
              "--min-prevalence", "0.0", "--seed", str(args.seed)]
    start = time.monotonic()
    steps = [
        ["simulate", "--groups", "5", "--taxa", "36", "--per-group", "12",
         "--shared-density", "0.10", "--specific-density", "0.05",
         "--out", str(out / "sim")] + common,
        ["cv", "--input", str(out / "sim" / "abundance.csv"),
         "--metadata", str(out / "sim" / "metadata.csv"),
         "--out", str(out / "cv"),
         "--algorithms",
         "fused_all,lasso_same,lasso_all,featureless_same,featureless_all"] + common,
        ["network", "--input", str(out / "sim" / "abundance.csv"),
         "--metadata", str(out / "sim" / "metadata.csv"),
         "--out", str(out / "networks"), "--algorithm", "fused_all"] + common,
        ["diffnet", "--input", str(out / "sim" / "abundance.csv"),
         "--metadata", str(out / "sim" / "metadata.csv"),
         "--out", str(out / "networks"), "--algorithm", "fused_all"] + common,
    ]
    for step in steps:
        t0 = time.monotonic()
        code = cli_main(step)
        print(f"{step[0]:10s} exit={code}  {time.monotonic() - t0:6.1f}s")
        if code != 0:
            return code
    print(f"total: {time.monotonic() - start:.1f}s")
    provenance = (out / "cv" / "provenance.txt").read_text()
    for line in provenance.splitlines():
        if line.startswith(("n_records", "n_failed_cells")):
            print(line)
    return 0


if __name__ == "__main__":
    sys.exit(main())

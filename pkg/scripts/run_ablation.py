"""Full ablation grid: all variants over five seeds, plus depth and width sweeps of cyctr.

    python scripts/run_ablation.py --out runs/ablation --workers 1

Thin wrapper around ``cyctr ablate`` with the defaults used for the results
table in the README.
"""

import sys

from cyctr.cli import main

if __name__ == "__main__":
    args = sys.argv[1:]
    if "--out" not in args:
        args += ["--out", "runs/ablation"]
    sys.exit(main(["ablate", "--seeds", "5", "--sweep-L", "1,2,3", "--sweep-d", "16,32,48", *args]))

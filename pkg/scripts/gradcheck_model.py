"""Gradient check of the default model for every variant.

    python scripts/gradcheck_model.py [probes]
"""

import json
import sys

from cyctr.gradchecks import check_model, gradcheck_episode
from cyctr.model import VARIANTS, CyCTRConfig, CyCTRModel

if __name__ == "__main__":
    probes = int(sys.argv[1]) if len(sys.argv) > 1 else 200
    episode = gradcheck_episode()
    summary = {}
    for variant in VARIANTS:
        report = check_model(CyCTRModel(CyCTRConfig(), variant, 0), episode, probes=probes)
        summary[variant] = {"max_rel_error": report["max_rel_error"], "passed": report["passed"]}
        print(variant, f"{report['max_rel_error']:.2e}", "ok" if report["passed"] else "FAIL", file=sys.stderr)
    print(json.dumps(summary, indent=2))
    sys.exit(0 if all(v["passed"] for v in summary.values()) else 1)

#!/usr/bin/env python3
"""Quick end-to-end check: every pipeline on the bundled smoke scenario.

Writes report.json, summary.txt and all figure series to out/smoke/.
"""

import sys

from p2ptrack.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "out/smoke"
    sys.exit(main(["run", "--scenario", "scenarios/smoke.yaml",
                   "--pipeline", "all", "--out", out]))

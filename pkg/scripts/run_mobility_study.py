#!/usr/bin/env python3
"""Mobility study over 2000 users with exact planted location changes
(40% city / 19% AS / 4% country among the 95% ever seen online).

Emits the three availability/mobility figure series alongside the report.
"""

import sys

from p2ptrack.cli import main

if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "out/mobility"
    sys.exit(main(["run", "--scenario", "scenarios/mobility.yaml",
                   "--pipeline", "mobility", "--out", out]))

#!/usr/bin/env python3
"""Run the four-setting ablation at desk scale and print the comparison.

Usage: python3 scripts/run_desk_ablation.py [OUT_DIR]
"""

import sys
from pathlib import Path

from pvae.cli import main

ROOT = Path(__file__).resolve().parent.parent


def run(out_dir: str) -> int:
    rc = main(["ablation", "--config", str(ROOT / "configs" / "desk.cfg"),
               "--settings", "1,2,3,4", "--out", out_dir])
    if rc == 0:
        print((Path(out_dir) / "comparison.csv").read_text())
    return rc


if __name__ == "__main__":
    sys.exit(run(sys.argv[1] if len(sys.argv) > 1 else "desk_ablation_out"))

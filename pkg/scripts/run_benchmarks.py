#!/usr/bin/env python3
"""Run both benchmark tables on a config and print them.

    python scripts/run_benchmarks.py                        # configs/default.yaml -> <output_dir>/{integration,shift}
    python scripts/run_benchmarks.py --config my.yaml --workers 4
"""

import argparse
from pathlib import Path

from weakstrong.cli import TABLES, cmd_benchmark

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "default.yaml")
    ap.add_argument("--workers", type=int)
    args = ap.parse_args()
    for table in TABLES:
        out = cmd_benchmark(args.config, table, args.workers)
        print((out / "table.txt").read_text())


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Run the full synthetic benchmark: data, model, calibration, then every
requested method over every seed, ending in the aggregate report.

Equivalent to calling the `mpdrive` stages by hand; this script just
sequences them and stops at the first failure.

    python3 scripts/run_benchmark.py --out runs/bench
    python3 scripts/run_benchmark.py --out runs/quick --methods mpur,vg \
        --seeds 0,1 --config configs/benchmark.json
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mpdrive.cli import main as mpdrive

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "benchmark.json"


def run(stage_args):
    print(f"$ mpdrive {' '.join(stage_args)}", flush=True)
    rc = mpdrive(stage_args)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="artifact directory")
    ap.add_argument("--config", default=str(DEFAULT_CONFIG))
    ap.add_argument("--seeds", default="0,1,2", help="comma-separated policy seeds")
    ap.add_argument("--methods", default="mpur,svg,vg,mper,il1,noop",
                    help="comma-separated subset of methods")
    ap.add_argument("--rollout", type=int, default=None,
                    help="override the configured rollout length")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    methods = [m for m in args.methods.split(",") if m != ""]
    base = ["--config", args.config, "--out", args.out]
    t0 = time.time()

    run(["gen-data"] + base)
    run(["train-model"] + base)
    run(["calibrate"] + base)
    for method in methods:
        for seed in seeds:
            extra = ["--method", method, "--seed", str(seed)]
            if args.rollout is not None:
                extra += ["--rollout", str(args.rollout)]
            run(["train-policy"] + base + extra)
            run(["evaluate"] + base + extra)
    run(["report"] + base)
    print(f"benchmark finished in {time.time() - t0:.0f}s; "
          f"see {args.out}/report/summary.csv")


if __name__ == "__main__":
    main()

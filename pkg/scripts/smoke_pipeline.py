"""Run the whole CLI workflow on the 50-scene smoke config and print the AP table.

    python3 scripts/smoke_pipeline.py --out /tmp/smoke
"""
import argparse
import sys
import time
from pathlib import Path

from wordet.cli import main as wordet

STEPS = [["gen-data"], ["cluster"], ["make-labels"], ["train", "--stage", "a"], ["train", "--stage", "b"],
         ["train", "--stage", "c"], ["train", "--stage", "d"], ["extract-features"], ["train-svm"],
         ["train-bbox"], ["detect"], ["eval"]]


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--out", default="smoke_run")
    ap.add_argument("--config", default=str(Path(__file__).resolve().parent.parent / "configs" / "smoke.json"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    t0 = time.perf_counter()
    for step in STEPS:
        code = wordet([*step, "--config", args.config, "--out", args.out, "--seed", str(args.seed)])
        if code:
            print(f"step {' '.join(step)} failed with exit code {code}", file=sys.stderr)
            return code
    print(f"finished in {time.perf_counter() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

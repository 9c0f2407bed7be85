"""Search random window/gt pairs (IoU >= 0.37, aspect in [1/3, 3]) for crops at
scale 2.7 that cover at most half of the gt.

    python3 scripts/coverage_search.py --pairs 1000000 --seed 0
"""
import argparse
import logging
import time

from wordet.geometry import coverage_search


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--pairs", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scale", type=float, default=2.7)
    ap.add_argument("--min-iou", type=float, default=0.37)
    ap.add_argument("--max-aspect", type=float, default=3.0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    worst, violations = coverage_search(args.pairs, args.seed, args.scale, args.min_iou, args.max_aspect)
    print(f"pairs {args.pairs}  scale {args.scale}  min coverage {worst:.4f}  violations {len(violations)}  "
          f"({time.perf_counter() - t0:.1f}s)")
    return 1 if violations else 0


if __name__ == "__main__":
    raise SystemExit(main())

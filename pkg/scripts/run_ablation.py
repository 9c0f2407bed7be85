"""Run an ablation grid over several seeds and print the mean/median mAP table.

    python3 scripts/run_ablation.py --grid acceptance --seeds 5 --out results/
    python3 scripts/run_ablation.py --grid supervision --seeds 1 --config configs/smoke.json

Writes ``<grid>_summary.csv`` and ``<grid>_per_seed.csv`` to ``--out``.
"""
import argparse
import logging
import time
from pathlib import Path

from wordet.ablation import GRIDS, per_seed_csv, run_grid, summary_csv, summary_rows
from wordet.config import load_config
from wordet.synthdata import CLASS_NAMES


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--grid", default="supervision", choices=sorted(GRIDS))
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--config", help="JSON run config")
    ap.add_argument("--variants", help="comma-separated subset of variant names")
    ap.add_argument("--out", default="results")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    names = args.variants.split(",") if args.variants else None
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    t0 = time.perf_counter()

    def progress(r):
        logging.info("seed %d  %-32s mAP %.4f  median AP %.4f", r.seed, r.name, r.mean_ap, r.median_ap)

    results = run_grid(cfg, args.grid, seeds, names, progress)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.grid}_summary.csv").write_text(summary_csv(results))
    (out / f"{args.grid}_per_seed.csv").write_text(per_seed_csv(results, CLASS_NAMES[: cfg.data.n_classes]))
    print(f"\n{'config':34s} {'mAP':>7s} {'medAP':>7s} {'std':>6s}")
    for row in summary_rows(results):
        print(f"{row['config']:34s} {row['mean_ap']:7.4f} {row['median_ap']:7.4f} {row['mean_ap_std']:6.4f}")
    print(f"\n{len(seeds)} seed(s), {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()

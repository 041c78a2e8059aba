"""SCFC vs kNN accuracy on the five standard digit pairs, over several seeds.

    python scripts/run_pair_benchmark.py --seeds 0 1 2 --episodes 300 --out results/pairs.csv

Writes one CSV row per (pair, seed) and prints per-pair means.
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from scfc import baselines, mnist
from scfc.baselines import KnnConfig
from scfc.engine import EngineConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--episodes", type=int, default=300)
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--per-class", type=int, default=500)
    ap.add_argument("--k", type=int, default=3)
    ap.add_argument("--out", type=Path, default=Path("results/pairs.csv"))
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    images = mnist.load_default()
    knn_cfg = KnnConfig(k=args.k)
    rows = []
    for seed in args.seeds:
        cfg = EngineConfig(pretrain_steps=args.n, episodes=args.episodes, seed=seed)
        datasets = [mnist.pair_dataset(images, p, per_class=args.per_class, seed=seed) for p in mnist.STANDARD_PAIRS]
        start = time.perf_counter()
        rows += baselines.benchmark_table(datasets, cfg, knn_cfg)
        logging.info("seed %d done in %.0fs", seed, time.perf_counter() - start)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    header = json.dumps({"seeds": args.seeds, "per_class": args.per_class, "k": args.k})
    baselines.write_table_csv(args.out, rows, header)
    print(baselines.format_table(rows))
    print()
    for name in dict.fromkeys(r.dataset for r in rows):
        mine = [r for r in rows if r.dataset == name]
        s = np.mean([r.scfc_acc for r in mine])
        k = np.mean([r.knn_acc for r in mine])
        print(f"{name:<16} mean SCFC {100 * s:6.2f}%  kNN {100 * k:6.2f}%  ({len(mine)} seeds)")


if __name__ == "__main__":
    main()

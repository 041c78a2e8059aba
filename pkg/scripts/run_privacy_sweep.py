"""Accuracy of the digit 0/1 clustering as images are max-pool degraded.

    python scripts/run_privacy_sweep.py --windows 1 2 4 8 12 16 20 --out results/sweep

Writes ``sweep.csv`` and one degraded sample per window.
"""

import argparse
import logging
from pathlib import Path

from scfc import baselines, mnist
from scfc.engine import EngineConfig
from scfc.images import write_image


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--windows", type=int, nargs="+", default=[1, 2, 4, 8, 12, 16, 20])
    ap.add_argument("--digits", type=int, nargs=2, default=[0, 1])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--episodes", type=int, default=300)
    ap.add_argument("--per-class", type=int, default=500)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("results/sweep"))
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    ds = mnist.pair_dataset(mnist.load_default(), tuple(args.digits), per_class=args.per_class, seed=args.seed)
    cfg = EngineConfig(episodes=args.episodes, seed=args.seed)
    result = baselines.privacy_sweep(ds, args.windows, cfg, workers=args.workers)

    args.out.mkdir(parents=True, exist_ok=True)
    result.write_csv(args.out / "sweep.csv", header_comment=f"{ds.name} seed={args.seed} N={args.episodes}")
    for w, img in result.samples.items():
        write_image(args.out / f"sample-w{w:02d}.png", img)
    for row in result.rows():
        acc = "failed" if row["accuracy"] is None else f"{100 * row['accuracy']:.2f}%"
        print(f"window {row['window']:>2}: {acc} {row['error']}")


if __name__ == "__main__":
    main()

"""Five-way digit clustering with one-vs-all runs and majority voting.

    python scripts/run_kway.py --digits 0 1 2 3 4 --per-class 100
"""

import argparse

from scfc import engine, mnist
from scfc.baselines import accuracy
from scfc.engine import EngineConfig


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--digits", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--per-class", type=int, default=100)
    ap.add_argument("--episodes", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    exemplars, queries, truth = mnist.kway_fixture(
        mnist.load_default(), tuple(args.digits), per_class=args.per_class, seed=args.seed
    )
    cfg = EngineConfig(episodes=args.episodes, seed=args.seed)
    runs = engine.train_one_vs_all(exemplars, queries, cfg)
    labels = engine.kway_cluster(runs, queries)
    acc = accuracy(labels, truth)
    print(f"{len(args.digits)}-way accuracy {100 * acc:.2f}% (chance {100 / len(args.digits):.1f}%)")


if __name__ == "__main__":
    main()

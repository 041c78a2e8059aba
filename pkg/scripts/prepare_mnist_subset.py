"""Write the 5000-image MNIST subset bundled with mlxtend as IDX files.

The subset holds 500 training digits per class.  Full MNIST downloads can be
used instead; point SCFC_MNIST_DIR (or --out) at any directory holding
``images-idx3-ubyte`` and ``labels-idx1-ubyte``.

    python scripts/prepare_mnist_subset.py --out data/mnist5k
"""

import argparse
import gzip
import sys
from importlib import resources
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from scfc.images import write_idx  # noqa: E402
from scfc.mnist import DEFAULT_DATA_DIR, IMAGES_FILE, LABELS_FILE  # noqa: E402


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=DEFAULT_DATA_DIR)
    ap.add_argument("--csv", type=Path, default=None, help="explicit path to mnist_5k.csv.gz")
    args = ap.parse_args(argv)

    src = args.csv or resources.files("mlxtend.data") / "data" / "mnist_5k.csv.gz"
    with gzip.open(src, "rt") as fh:
        table = np.loadtxt(fh, delimiter=",")
    pixels = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)

    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / IMAGES_FILE, args.out / LABELS_FILE, pixels, labels)
    print(f"wrote {len(labels)} images to {args.out} (per class: {np.bincount(labels).tolist()})")


if __name__ == "__main__":
    main()

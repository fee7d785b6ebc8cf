"""Write a 5000-digit MNIST subset as gzipped IDX files under data/.

The source is the 5k-sample CSV shipped inside the ``mlxtend`` wheel
(``pip download mlxtend --no-deps``). Records are sorted by label there, so
they are shuffled once with a fixed seed and split 4000 train / 1000 test.

    python scripts/make_mnist_subset.py path/to/mnist_5k.csv.gz
"""
import argparse
import gzip
from pathlib import Path

import numpy as np

from onedconv.data import save_idx_images, save_idx_labels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv")
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    with gzip.open(args.csv, "rt") as f:
        raw = np.loadtxt(f, delimiter=",", dtype=np.int64)
    pixels = raw[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = raw[:, -1].astype(np.uint8)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    pixels, labels = pixels[order], labels[order]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, sl in (("train", slice(0, 4000)), ("t10k", slice(4000, None))):
        save_idx_images(out / f"mnist5k-{split}-images-idx3-ubyte.gz", pixels[sl])
        save_idx_labels(out / f"mnist5k-{split}-labels-idx1-ubyte.gz", labels[sl])
        print(split, pixels[sl].shape)


if __name__ == "__main__":
    main()

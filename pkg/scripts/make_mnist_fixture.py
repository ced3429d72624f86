"""Build the small MNIST IDX fixture used by the smoke-learning test.

Source: the 5,000-image MNIST sample shipped inside the mlxtend wheel
(``mlxtend/data/data/mnist_5k.csv.gz``: 784 pixel columns then the label).

    python scripts/make_mnist_fixture.py path/to/mnist_5k.csv.gz tests/data
"""

import argparse
import gzip
import io
from pathlib import Path

import numpy as np

from srnn.tasks import write_mnist_idx


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("csv_gz")
    ap.add_argument("out_dir")
    ap.add_argument("--count", type=int, default=2500)
    args = ap.parse_args()
    raw = gzip.decompress(Path(args.csv_gz).read_bytes())
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    # the sample is not class-shuffled; take a fixed stride through it
    idx = np.linspace(0, len(table) - 1, args.count).round().astype(int)
    rng = np.random.default_rng(20170101)
    idx = idx[rng.permutation(len(idx))]
    images = table[idx, :784].reshape(-1, 28, 28)
    labels = table[idx, 784]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_mnist_idx(out / "mnist-2500-images-idx3-ubyte.gz", out / "mnist-2500-labels-idx1-ubyte.gz",
                    images, labels)
    print(np.bincount(labels.astype(int), minlength=10))


if __name__ == "__main__":
    main()

"""Build the bundled 5k MNIST subset (IDX, gzipped) from the mlxtend wheel.

    pip download --no-deps mlxtend -d /tmp/wheels
    python tools/make_mnist_subset.py /tmp/wheels/mlxtend-*.whl src/muxformer/_data

mlxtend ships 5000 MNIST training digits as CSV (784 pixels + label per row).
Rows are written in a fixed seeded shuffle so any prefix is class-balanced.
"""

import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from muxformer.data import write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("wheel")
    ap.add_argument("out_dir")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    with zipfile.ZipFile(args.wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1], table[:, -1]
    order = np.random.default_rng(args.seed).permutation(len(labels))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(pixels[order].reshape(-1, 28, 28), labels[order],
              out / "mnist5k-images-idx3-ubyte.gz", out / "mnist5k-labels-idx1-ubyte.gz")
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main()

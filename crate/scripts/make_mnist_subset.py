"""Build the small MNIST subset under data/mnist-subset as gzipped IDX files.

Source: the per-digit JSON files of the `mnist` npm package (1001 images per
digit, 28x28, intensities in [0, 1]). Usage:

    python3 scripts/make_mnist_subset.py path/to/package/src/digits
"""

import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np

SEED = 20240611
N_TRAIN = 8000
N_TEST = 2000


def write_idx(path, array):
    codes = {1: 0x08}
    header = struct.pack(">BBBB", 0, 0, codes[array.dtype.itemsize], array.ndim)
    header += b"".join(struct.pack(">I", n) for n in array.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + array.tobytes())


def main():
    src = Path(sys.argv[1])
    out = Path(__file__).resolve().parent.parent / "data" / "mnist-subset"
    out.mkdir(parents=True, exist_ok=True)
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads((src / f"{digit}.json").read_text())["data"])
        imgs = np.rint(flat.reshape(-1, 28, 28) * 255).clip(0, 255).astype(np.uint8)
        images.append(imgs)
        labels.append(np.full(len(imgs), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(SEED).permutation(len(images))
    test, train = order[:N_TEST], order[N_TEST : N_TEST + N_TRAIN]
    write_idx(out / "train-images-idx3-ubyte.gz", images[train])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[train])
    write_idx(out / "t10k-images-idx3-ubyte.gz", images[test])
    write_idx(out / "t10k-labels-idx1-ubyte.gz", labels[test])
    print(f"{len(train)} train, {len(test)} test images written to {out}")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Rebuild data/mnist/ from the 10,000 MNIST digits bundled in the npm `mnist` package.

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist

The npm package stores pixels as x/255 rounded to three decimals, so round(v*255)
recovers the original bytes exactly. Every tenth digit (after a fixed shuffle)
goes to the test split: 9,000 train / 1,000 test.
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main(src, dst):
    images, labels = [], []
    for digit in range(10):
        data = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        a = np.asarray(data, dtype=np.float64).reshape(-1, 784)
        b = np.round(a * 255.0)
        assert np.abs(b / 255.0 - a).max() < 1e-3
        images.append(b.astype(np.uint8))
        labels.append(np.full(len(b), digit, dtype=np.uint8))
    x = np.concatenate(images)
    y = np.concatenate(labels)
    order = np.random.RandomState(20170101).permutation(len(x))
    x, y = x[order], y[order]
    test = np.arange(len(x)) % 10 == 9
    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    for name, mask in (("train", ~test), ("t10k", test)):
        xs, ys = x[mask], y[mask]
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, (len(xs), 28, 28), xs.tobytes())
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(ys),), ys.tobytes())
        print(name, len(xs))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])

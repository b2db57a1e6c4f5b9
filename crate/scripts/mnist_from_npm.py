"""Rebuild data/mnist/*.gz from the `mnist` npm package (cazala/mnist, MIT).

The package ships 10,000 MNIST digits as grey levels x/255 rounded to three
decimals; rounding back to bytes is exact. Digits are split per class with a
fixed seed: 80% train (8000), 20% test (2000).

usage: npm pack mnist && tar xzf mnist-*.tgz && python3 scripts/mnist_from_npm.py package/dist/mnist.js
"""
import gzip
import json
import re
import struct
import sys

import numpy as np


def write_idx(path, arr, magic):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for dim in arr.shape:
            f.write(struct.pack(">I", dim))
        f.write(arr.astype(np.uint8).tobytes())


def main(src):
    text = open(src).read()
    chunks = re.findall(r'module\.exports=(\{ "data": \[.*?\]\s*\})', text, re.S)
    assert len(chunks) == 10
    rng = np.random.default_rng(20200101)
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for digit, chunk in enumerate(chunks):
        grey = np.array(json.loads(chunk)["data"], dtype=float).reshape(-1, 784)
        pixels = np.rint(grey * 255).astype(np.uint8)
        assert np.allclose(np.round(pixels / 255, 3), grey)
        order = rng.permutation(len(pixels))
        n_test = round(0.2 * len(pixels))
        te_x.append(pixels[order[:n_test]])
        tr_x.append(pixels[order[n_test:]])
        te_y.append(np.full(n_test, digit))
        tr_y.append(np.full(len(pixels) - n_test, digit))
    for name, xs, ys in (("train", tr_x, tr_y), ("t10k", te_x, te_y)):
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        perm = rng.permutation(len(x))
        x, y = x[perm].reshape(-1, 28, 28), y[perm]
        write_idx(f"data/mnist/{name}-images-idx3-ubyte.gz", x, 0x00000803)
        write_idx(f"data/mnist/{name}-labels-idx1-ubyte.gz", y, 0x00000801)
        print(name, len(x), np.bincount(y))


if __name__ == "__main__":
    main(sys.argv[1])

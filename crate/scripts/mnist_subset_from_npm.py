#!/usr/bin/env python3
"""Rebuild data/mnist-subset/ from the `mnist` npm package (MIT, 10,000 digits).

Usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_subset_from_npm.py package/src/digits data/mnist-subset

Writes the four standard gzipped IDX files. Digits are shuffled with a fixed
seed, then the first 8,500 go to the training file and the rest to t10k.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN_COUNT = 8500


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main(src, dst):
    items = []
    for digit in range(10):
        flat = json.loads((Path(src) / f"{digit}.json").read_text())["data"]
        for i in range(0, len(flat), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[i : i + 784])
            items.append((pixels, digit))
    random.Random(1603).shuffle(items)
    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", items[:TRAIN_COUNT]), ("t10k", items[TRAIN_COUNT:])):
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, (len(part), 28, 28),
                  b"".join(p for p, _ in part))
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(part),),
                  bytes(l for _, l in part))
        print(name, len(part))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])

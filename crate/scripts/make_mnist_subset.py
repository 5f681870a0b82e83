#!/usr/bin/env python3
"""Build the balanced 1000/1000 MNIST subset used by the desk-scale training gate.

Source: the `mnist` npm package (10,000 MNIST digits stored as JSON floats
quantised to k/255). Pixels are recovered as bytes and written as gzipped IDX.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist-subset
"""
import gzip
import json
import struct
import sys
from pathlib import Path

PER_CLASS = 100


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + bytes(payload))


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    splits = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        images = [data[i : i + 784] for i in range(0, len(data), 784)]
        for idx, img in enumerate(images[: 2 * PER_CLASS]):
            split = "train" if idx < PER_CLASS else "t10k"
            pixels = [min(255, max(0, round(v * 255))) for v in img]
            splits[split][0].append(pixels)
            splits[split][1].append(digit)
    for split, (imgs, labels) in splits.items():
        # interleave classes so any prefix is roughly balanced
        order = sorted(range(len(labels)), key=lambda i: (i % PER_CLASS, labels[i]))
        imgs = [imgs[i] for i in order]
        labels = [labels[i] for i in order]
        flat = [p for img in imgs for p in img]
        write_idx(dst / f"{split}-images-idx3-ubyte.gz", 0x803, [len(imgs), 28, 28], flat)
        write_idx(dst / f"{split}-labels-idx1-ubyte.gz", 0x801, [len(labels)], labels)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])

#!/usr/bin/env python3
"""Convert the 5000-sample MNIST subset bundled with mlxtend into IDX files.

The mlxtend wheel ships ``mlxtend/data/data/mnist_5k.csv.gz`` (784 pixel
columns followed by the label, 500 samples per digit, grouped by class).
This script shuffles it with a fixed seed and writes a 4000/1000
train/test split in the standard IDX layout:

    python3 tools/make_mnist_subset.py mnist_5k.csv.gz data/mnist5k
"""

import argparse
import gzip
import random
import struct
from pathlib import Path


def write_idx_ubyte(path, dims, payload):
    header = struct.pack(">BBBB", 0, 0, 0x08, len(dims))
    header += b"".join(struct.pack(">I", d) for d in dims)
    path.write_bytes(header + bytes(payload))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("csv_gz")
    parser.add_argument("out_dir")
    parser.add_argument("--train", type=int, default=4000)
    parser.add_argument("--seed", type=int, default=20240501)
    args = parser.parse_args()

    rows = []
    with gzip.open(args.csv_gz, "rt") as fh:
        for line in fh:
            fields = [int(float(v)) for v in line.strip().split(",")]
            if len(fields) != 785:
                raise SystemExit(f"unexpected row width {len(fields)}")
            rows.append((fields[:784], fields[784]))

    random.Random(args.seed).shuffle(rows)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": rows[: args.train], "test": rows[args.train :]}
    for name, part in splits.items():
        pixels = [p for image, _ in part for p in image]
        labels = [label for _, label in part]
        write_idx_ubyte(out / f"{name}-images.idx", [len(part), 28, 28], pixels)
        write_idx_ubyte(out / f"{name}-labels.idx", [len(part)], labels)
        print(f"{name}: {len(part)} samples")


if __name__ == "__main__":
    main()

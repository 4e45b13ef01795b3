#!/usr/bin/env python3
"""Build a small class-balanced MNIST subset in IDX format.

Reads the per-digit JSON files shipped by the `mnist` npm package
(src/digits/<d>.json, each {"data": [784 * n floats in [0, 1]]}) and writes
train/validation IDX files plus the manifest the tso learner expects.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 tools/mnist_subset.py package/src/digits data/mnist-2k
"""

import argparse
import json
import random
import struct
from pathlib import Path

PIXELS = 784


def write_idx(path, dims, payload):
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, 0x08, len(dims)))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--val-per-class", type=int, default=100)
    ap.add_argument("--batch-size", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    train, val = [], []
    for digit in range(10):
        flat = json.loads((args.digits / f"{digit}.json").read_text())["data"]
        images = [flat[i : i + PIXELS] for i in range(0, len(flat), PIXELS)]
        need = args.train_per_class + args.val_per_class
        if len(images) < need:
            raise SystemExit(f"digit {digit}: {len(images)} images, need {need}")
        pixels = [[round(v * 255) for v in img] for img in images[:need]]
        train += [(p, digit) for p in pixels[: args.train_per_class]]
        val += [(p, digit) for p in pixels[args.train_per_class :]]

    # mixed-class batches; the learner never reshuffles within a batch
    random.Random(args.seed).shuffle(train)

    args.out.mkdir(parents=True, exist_ok=True)
    for name, rows in (("train", train), ("val", val)):
        write_idx(args.out / f"{name}-images-idx3-ubyte", [len(rows), 28, 28],
                  [v for p, _ in rows for v in p])
        write_idx(args.out / f"{name}-labels-idx1-ubyte", [len(rows)], [d for _, d in rows])
    manifest = {
        "n_items": len(train),
        "batch_size": args.batch_size,
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "val_images": "val-images-idx3-ubyte",
        "val_labels": "val-labels-idx1-ubyte",
        "item_order": None,
    }
    (args.out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Fetch MNIST-style IDX files into a data directory.

Two sources are supported:

  official  the canonical MNIST / Fashion-MNIST IDX archives (needs internet)
  mlxtend   the 5000-sample MNIST subset bundled in the `mlxtend` wheel,
            re-packed as IDX files (4000 train / 1000 test, stratified);
            works anywhere the Python package index is reachable

The Rust loaders read `.gz` files transparently, so archives are written
compressed.
"""

import argparse
import gzip
import io
import os
import struct
import subprocess
import sys
import tempfile
import urllib.request
import zipfile

OFFICIAL = {
    "mnist": "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "fashion-mnist": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
}
FILES = [
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
]


def fetch_official(name, out_dir):
    base = OFFICIAL[name]
    for f in FILES:
        dest = os.path.join(out_dir, f)
        print(f"downloading {base + f}")
        urllib.request.urlretrieve(base + f, dest)


def idx_images(images):
    n = len(images)
    head = struct.pack(">IIII", 0x00000803, n, 28, 28)
    return head + bytes(b for img in images for b in img)


def idx_labels(labels):
    return struct.pack(">II", 0x00000801, len(labels)) + bytes(labels)


def write_gz(path, payload):
    # mtime=0 keeps the archives byte-stable across regenerations
    with open(path, "wb") as raw:
        with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
            gz.write(payload)


def fetch_mlxtend(out_dir, seed):
    import random

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.check_call(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--timeout", "120",
             "mlxtend==0.24.0", "-d", tmp]
        )
        wheel = next(os.path.join(tmp, f) for f in os.listdir(tmp) if f.endswith(".whl"))
        raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = []
    for line in io.StringIO(gzip.decompress(raw).decode()):
        vals = [int(float(v)) for v in line.strip().split(",")]
        rows.append((vals[:-1], vals[-1]))
    by_class = {}
    for img, label in rows:
        by_class.setdefault(label, []).append(img)
    rng = random.Random(seed)
    train, test = [], []
    for label in sorted(by_class):
        imgs = by_class[label]
        rng.shuffle(imgs)
        cut = len(imgs) * 4 // 5
        train += [(i, label) for i in imgs[:cut]]
        test += [(i, label) for i in imgs[cut:]]
    rng.shuffle(train)
    rng.shuffle(test)
    for prefix, part in (("train", train), ("t10k", test)):
        write_gz(os.path.join(out_dir, f"{prefix}-images-idx3-ubyte.gz"), idx_images([i for i, _ in part]))
        write_gz(os.path.join(out_dir, f"{prefix}-labels-idx1-ubyte.gz"), idx_labels([l for _, l in part]))
    print(f"wrote {len(train)} train / {len(test)} test samples to {out_dir}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dataset", default="mnist", choices=sorted(OFFICIAL))
    ap.add_argument("--source", default="official", choices=["official", "mlxtend"])
    ap.add_argument("--data-dir", default=os.environ.get("BOFNET_DATA_DIR", "data"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out_dir = os.path.join(args.data_dir, args.dataset)
    os.makedirs(out_dir, exist_ok=True)
    if args.source == "official":
        fetch_official(args.dataset, out_dir)
    else:
        if args.dataset != "mnist":
            sys.exit("the mlxtend source only carries MNIST")
        fetch_mlxtend(out_dir, args.seed)


if __name__ == "__main__":
    main()

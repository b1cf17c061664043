#!/usr/bin/env python3
"""Fetch MNIST into IDX files under a data directory.

Tries the canonical IDX mirrors first (full 60k/10k split). When those are
unreachable, falls back to a redistributed 10,000-digit MNIST subset
shipped inside the npm package ``mnist`` (JSON pixel arrays that recover
bit-exactly to the original uint8 images) and writes a balanced 5,000
train / 5,000 test split in standard IDX gzip files.

Usage:
    python scripts/fetch_mnist.py --out data/mnist [--source auto|official|subset]
"""

import argparse
import json
import subprocess
import sys
import tarfile
import tempfile
import urllib.request
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))
from feddw.data import save_idx_images, save_idx_labels  # noqa: E402

MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)
FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)
NPM_PACKAGE = "mnist@1.1.0"
TRAIN_PER_CLASS = 500


def fetch_official(out: Path) -> bool:
    for mirror in MIRRORS:
        try:
            for name in FILES:
                with urllib.request.urlopen(mirror + name, timeout=30) as resp:
                    (out / name).write_bytes(resp.read())
            print(f"downloaded official files from {mirror}")
            return True
        except OSError as exc:
            print(f"mirror {mirror} unreachable: {exc}")
    return False


def fetch_subset(out: Path) -> bool:
    with tempfile.TemporaryDirectory() as tmp:
        try:
            subprocess.run(
                ["npm", "pack", NPM_PACKAGE, "--pack-destination", tmp],
                check=True, capture_output=True, text=True,
            )
        except (OSError, subprocess.CalledProcessError) as exc:
            print(f"npm fallback failed: {exc}")
            return False
        tarball = next(Path(tmp).glob("mnist-*.tgz"))
        with tarfile.open(tarball) as tf:
            tf.extractall(tmp)
        digits_dir = Path(tmp) / "package" / "src" / "digits"
        per_class = []
        for digit in range(10):
            flat = json.loads((digits_dir / f"{digit}.json").read_text())["data"]
            arr = np.asarray(flat, dtype=np.float64).reshape(-1, 28, 28)
            per_class.append(np.rint(arr * 255.0).astype(np.uint8))

        train_images, train_labels = [], []
        for i in range(TRAIN_PER_CLASS):  # round-robin: any prefix is balanced
            for digit in range(10):
                train_images.append(per_class[digit][i])
                train_labels.append(digit)
        test_images, test_labels = [], []
        cursors = [TRAIN_PER_CLASS] * 10
        remaining = True
        while remaining:
            remaining = False
            for digit in range(10):
                if cursors[digit] < len(per_class[digit]):
                    test_images.append(per_class[digit][cursors[digit]])
                    test_labels.append(digit)
                    cursors[digit] += 1
                    remaining = True

        save_idx_images(out / FILES[0], np.stack(train_images))
        save_idx_labels(out / FILES[1], np.array(train_labels, dtype=np.uint8))
        save_idx_images(out / FILES[2], np.stack(test_images))
        save_idx_labels(out / FILES[3], np.array(test_labels, dtype=np.uint8))
        print(f"wrote {len(train_labels)} train / {len(test_labels)} test samples "
              f"from the redistributed subset")
        return True


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("data/mnist"))
    parser.add_argument("--source", choices=("auto", "official", "subset"), default="auto")
    args = parser.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    if args.source in ("auto", "official") and fetch_official(args.out):
        return 0
    if args.source == "official":
        print("official mirrors unreachable", file=sys.stderr)
        return 1
    if fetch_subset(args.out):
        return 0
    print("no MNIST source reachable", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())

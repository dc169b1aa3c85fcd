#!/usr/bin/env python3
"""Build the bundled 10k-image MNIST subset in IDX format.

Source: the `mnist` npm package (https://www.npmjs.com/package/mnist), which
ships 10 000 genuine MNIST images as per-digit JSON arrays of 784 floats in
[0, 1] (pixel/255 rounded to three decimals, losslessly invertible).

Output: data/mnist10k/{train,t10k}-{images-idx3,labels-idx1}-ubyte — a
deterministic, class-stratified 8000/2000 split in the standard IDX encoding
(big-endian magic + dims, u8 payload).

Usage: python3 scripts/make_mnist_subset.py <digits-dir> <output-dir>
"""

import json
import random
import struct
import sys
from pathlib import Path

SEED = 20260814
TRAIN_TOTAL = 8000
ROWS = COLS = 28


def load_digit(path: Path) -> list[bytes]:
    """One digit file -> list of 784-byte images (stored as one flat array)."""
    with open(path) as fh:
        flat = json.load(fh)["data"]
    if len(flat) % (ROWS * COLS) != 0:
        raise ValueError(f"{path}: {len(flat)} values is not a whole image count")
    pixels = bytes(round(v * 255) for v in flat)
    return [pixels[i : i + ROWS * COLS] for i in range(0, len(pixels), ROWS * COLS)]


def write_idx_images(path: Path, images: list[bytes]) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, len(images), ROWS, COLS))
        for img in images:
            fh.write(img)


def write_idx_labels(path: Path, labels: list[int]) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, len(labels)))
        fh.write(bytes(labels))


def main() -> None:
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    digits_dir, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)

    per_class = {d: load_digit(digits_dir / f"{d}.json") for d in range(10)}
    total = sum(len(v) for v in per_class.values())

    # Largest-remainder apportionment of the train budget across classes,
    # so the split is stratified and sums to exactly TRAIN_TOTAL.
    quotas = {d: TRAIN_TOTAL * len(v) / total for d, v in per_class.items()}
    take = {d: int(q) for d, q in quotas.items()}
    leftover = TRAIN_TOTAL - sum(take.values())
    for d in sorted(quotas, key=lambda d: (take[d] - quotas[d], d))[:leftover]:
        take[d] += 1

    rng = random.Random(SEED)
    train, test = [], []
    for d in range(10):
        imgs = per_class[d]
        order = list(range(len(imgs)))
        rng.shuffle(order)
        for pos, idx in enumerate(order):
            (train if pos < take[d] else test).append((imgs[idx], d))
    rng.shuffle(train)
    rng.shuffle(test)

    write_idx_images(out_dir / "train-images-idx3-ubyte", [i for i, _ in train])
    write_idx_labels(out_dir / "train-labels-idx1-ubyte", [l for _, l in train])
    write_idx_images(out_dir / "t10k-images-idx3-ubyte", [i for i, _ in test])
    write_idx_labels(out_dir / "t10k-labels-idx1-ubyte", [l for _, l in test])

    counts = {d: sum(1 for _, l in train if l == d) for d in range(10)}
    print(f"wrote {len(train)} train / {len(test)} test images to {out_dir}")
    print("train per class:", counts)


if __name__ == "__main__":
    main()

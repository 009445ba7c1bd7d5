#!/usr/bin/env python3
"""Write the 5000-image MNIST training subset bundled with mlxtend as IDX files.

The subset holds 500 images per digit drawn from the original MNIST training
split. Usage:

    pip download --no-deps mlxtend==0.24.0 -d /tmp/wheels
    python3 scripts/export_mnist_5k.py /tmp/wheels/mlxtend-0.24.0-py3-none-any.whl data/
"""
import gzip
import struct
import sys
import zipfile
from pathlib import Path


def main() -> None:
    wheel, out = sys.argv[1], Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    rows = [line.split(",") for line in gzip.decompress(raw).decode().splitlines()]
    pixels = bytearray()
    labels = bytearray()
    for row in rows:
        values = [int(float(v)) for v in row]
        pixels.extend(values[:784])
        labels.append(values[784])
    n = len(rows)
    (out / "mnist5k-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 2051, n, 28, 28) + pixels)
    (out / "mnist5k-labels-idx1-ubyte").write_bytes(struct.pack(">II", 2049, n) + labels)
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    main()

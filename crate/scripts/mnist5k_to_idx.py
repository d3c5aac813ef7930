#!/usr/bin/env python3
"""Write the 5000-image MNIST subset bundled with mlxtend (BSD-3) as idx files.

The subset holds 500 images per digit. Rows are written in a fixed
permutation (numpy seed 20240101) so that prefix splits are class-mixed.

usage: pip download mlxtend --no-deps -d /tmp/mlx
       python3 scripts/mnist5k_to_idx.py /tmp/mlx/mlxtend-*.whl data/mnist5k
"""
import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def main() -> None:
    wheel, out = Path(sys.argv[1]), Path(sys.argv[2])
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels, digits = table[:, :-1], table[:, -1]
    assert pixels.shape == (5000, 784) and pixels.min() >= 0 and pixels.max() <= 255
    order = np.random.default_rng(20240101).permutation(len(digits))
    pixels, digits = pixels[order].astype(np.uint8), digits[order].astype(np.uint8)

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(digits), 28, 28))
        f.write(pixels.tobytes())
    with open(out / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(digits)))
        f.write(digits.tobytes())


if __name__ == "__main__":
    main()

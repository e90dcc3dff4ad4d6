"""Regenerate the bundled IDX digit fixture from scikit-learn's 8x8 digits.

Each digit is upscaled 3x (nearest neighbour) to 24x24, padded to 28x28 and
stored as unsigned bytes, two images per class.
"""
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from racecar.datasets import write_idx  # noqa: E402

PER_CLASS = 2


def main():
    digits = load_digits()
    picked = []
    for d in range(10):
        picked.extend(np.flatnonzero(digits.target == d)[:PER_CLASS])
    imgs = digits.images[picked] / 16.0
    imgs = np.kron(imgs, np.ones((1, 3, 3)))
    imgs = np.pad(imgs, ((0, 0), (2, 2), (2, 2)))
    out = Path(__file__).resolve().parents[1] / "src" / "racecar" / "data"
    write_idx(np.round(imgs * 255), digits.target[picked], out / "digits-images-idx3-ubyte", out / "digits-labels-idx1-ubyte")
    print(f"wrote {len(picked)} images to {out}")


if __name__ == "__main__":
    main()

"""Regenerate the bundled 8x8 digit IDX files from scikit-learn's copy of the
UCI optical digits set. Pixels (0..16) are rescaled to 0..255."""
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

from logitsca.qnn.idx import write_idx

OUT = Path(__file__).resolve().parents[1] / "src" / "logitsca" / "qnn" / "data"
N_TEST = 360

d = load_digits()
images = np.rint(d.images * (255.0 / 16.0)).astype(np.uint8)
labels = d.target.astype(np.uint8)
order = np.random.default_rng(2024).permutation(len(images))
test, train = order[:N_TEST], order[N_TEST:]
for split, idx in (("train", train), ("test", test)):
    write_idx(OUT / f"digits8x8-{split}-images-idx3-ubyte", images[idx])
    write_idx(OUT / f"digits8x8-{split}-labels-idx1-ubyte", labels[idx])
    print(split, len(idx))

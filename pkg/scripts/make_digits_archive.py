"""Regenerate the bundled 8x8 digit archive from scikit-learn's copy of the
UCI optical digits test set. Run once; the output is committed."""

import numpy as np
from sklearn.datasets import load_digits

from ticketlab.archive import save_archive

raw = load_digits()
images = (raw.images / 16.0).astype(np.float32).reshape(-1, 1, 8, 8)
labels = raw.target.astype(np.uint8)
save_archive("src/ticketlab/data/digits.ltkt",
             {"images": images, "labels": labels})
print(f"wrote {images.shape[0]} samples")

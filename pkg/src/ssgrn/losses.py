"""Masked cross entropy over labeled pixels.

Lives in its own module so the branch modules and the trainer can share it
without an import cycle; the trainer re-exports it.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


def cross_entropy_masked(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood over labeled pixels selected by ``mask``.

    ``logits`` is C_n x H x W; ``labels`` holds 0 for unlabeled and 1..C_n for
    classes (label 1 maps to channel 0). Unlabeled pixels never contribute.
    """
    n_classes, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    selected = labels > 0
    if mask is not None:
        selected = selected & np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(selected)
    if rows.size == 0:
        raise ValueError("no labeled pixels selected for the loss")
    if labels.max() > n_classes:
        raise ValueError(f"label {labels.max()} exceeds class count {n_classes}")
    flat = rows * w + cols
    targets = labels[rows, cols].astype(int) - 1
    log_p = T.log_softmax(logits.reshape(n_classes, h * w), axis=0)
    picked = log_p[(targets, flat)]
    return -T.tmean(picked)

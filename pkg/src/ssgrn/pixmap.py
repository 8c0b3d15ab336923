"""Binary portable pixmap writers for classification maps.

P6 (color) maps use a fixed 16-entry palette: class c (1-based) takes
PALETTE[c - 1], label 0 (unlabeled) renders black.
"""

from __future__ import annotations

import numpy as np

#: Classes 1..16 in order; chosen for pairwise contrast.
PALETTE = (
    (230, 25, 75),    # red
    (60, 180, 75),    # green
    (255, 225, 25),   # yellow
    (0, 130, 200),    # blue
    (245, 130, 48),   # orange
    (145, 30, 180),   # purple
    (70, 240, 240),   # cyan
    (240, 50, 230),   # magenta
    (210, 245, 60),   # lime
    (250, 190, 212),  # pink
    (0, 128, 128),    # teal
    (220, 190, 255),  # lavender
    (170, 110, 40),   # brown
    (255, 250, 200),  # beige
    (128, 0, 0),      # maroon
    (170, 255, 195),  # mint
)
BLACK = (0, 0, 0)


def class_colors(labels: np.ndarray) -> np.ndarray:
    """H x W x 3 uint8 image: palette color per class, black for unlabeled."""
    labels = np.asarray(labels)
    if labels.max() > len(PALETTE):
        raise ValueError(f"label {labels.max()} exceeds the {len(PALETTE)}-entry palette")
    table = np.array([BLACK, *PALETTE], dtype=np.uint8)
    return table[labels.astype(int)]


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"expected H x W image, got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5 {w} {h} 255\n".encode("ascii"))
        fh.write(gray.tobytes())

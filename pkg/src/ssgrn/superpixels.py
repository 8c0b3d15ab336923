"""In-network differentiable superpixel segmentation.

Classic SLIC hardens assignments with min/argmin, which blocks gradients.
Here the assignment is a temperature-controlled softmax over distances to
all cluster centroids, and centroids are recomputed as assignment-weighted
means, so the whole segmentation is differentiable in the input feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

EPS_MASS = 1e-8


@dataclass
class SlicConfig:
    clusters: int
    iters: int = 5
    compactness: float = 0.5  # weight of spatial vs feature distance
    temperature: float = 0.1  # softness of the assignment

    def __post_init__(self):
        if self.clusters < 1:
            raise ValueError("cluster count must be >= 1")
        if self.iters < 1:
            raise ValueError("iteration count must be >= 1")
        if self.compactness < 0:
            raise ValueError("compactness must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class SuperpixelAssignment:
    """Soft pixel-to-cluster weights plus the hardened map derived from them.

    q: N x K row-stochastic tensor (N pixels in row-major order).
    hard: length-N argmax labels, first cluster wins ties.
    centroids: K x (C+2) feature-plus-position means of the final iteration.
    """

    q: Tensor
    hard: np.ndarray
    centroids: np.ndarray


def _grid_layout(k: int, h: int, w: int) -> tuple[int, int]:
    gh = max(1, round(np.sqrt(k * h / w)))
    while k % gh != 0 and gh > 1:
        gh -= 1
    return gh, k // gh


def grid_positions(k: int, h: int, w: int) -> np.ndarray:
    """K x 2 seed coordinates at near-uniform grid cell centers (pixel units)."""
    if k > h * w:
        raise ShapeError(f"cannot seed {k} clusters on a {h}x{w} grid")
    gh, gw = _grid_layout(k, h, w)
    rows = (np.arange(gh) + 0.5) * (h / gh) - 0.5
    cols = (np.arange(gw) + 0.5) * (w / gw) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


def init_centroids_grid(feature: Tensor, k: int) -> tuple[Tensor, Tensor, np.ndarray]:
    """Seed centroids on a grid: features sampled at the seed pixels, positions
    normalized to [0, 1]. Returns (feat K x C, pos K x 2, raw pixel coords)."""
    c, h, w = feature.shape
    coords = grid_positions(k, h, w)
    rows = np.clip(np.floor(coords[:, 0] + 0.5).astype(int), 0, h - 1)
    cols = np.clip(np.floor(coords[:, 1] + 0.5).astype(int), 0, w - 1)
    flat = feature.reshape(c, h * w)
    cfeat = flat[:, rows * w + cols].T  # K x C, differentiable gather
    norm = np.stack([(coords[:, 0] + 0.5) / h, (coords[:, 1] + 0.5) / w], axis=1)
    cpos = Tensor(norm.astype(feature.dtype))
    return cfeat, cpos, coords


def pixel_positions(h: int, w: int, dtype) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos = np.stack([(rr.ravel() + 0.5) / h, (cc.ravel() + 0.5) / w], axis=1)
    return pos.astype(dtype)


def _sq_distances(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared euclidean distances: (N x D, K x D) -> N x K."""
    an = T.tsum(a * a, axis=1, keepdims=True)  # N x 1
    bn = T.tsum(b * b, axis=1, keepdims=True).T  # 1 x K
    cross = T.matmul(a, b.T)
    return an + bn - 2.0 * cross


def soft_assignment(
    pfeat: Tensor, ppos: Tensor, cfeat: Tensor, cpos: Tensor, config: SlicConfig
) -> Tensor:
    """Row-stochastic N x K assignment from feature + weighted spatial distance."""
    d = _sq_distances(pfeat, cfeat) + config.compactness * _sq_distances(ppos, cpos)
    return T.softmax(d * (-1.0 / config.temperature), axis=1)


def _update_centroids(q: Tensor, points: Tensor, prev: Tensor) -> Tensor:
    """Q-weighted means; a cluster with vanishing soft mass keeps its previous
    centroid because the epsilon terms dominate both numerator and denominator."""
    mass = T.tsum(q, axis=0).reshape(-1, 1)
    num = T.matmul(q.T, points)
    return (num + EPS_MASS * prev) / (mass + EPS_MASS)


def soft_assign_iterate(feature: Tensor, config: SlicConfig) -> SuperpixelAssignment:
    """Alternate soft assignment and centroid update ``config.iters`` times.

    Gradients reach the input feature through the distances and through the
    weighted centroid means of every iteration.
    """
    c, h, w = feature.shape
    pfeat = feature.reshape(c, h * w).T  # N x C
    ppos = Tensor(pixel_positions(h, w, feature.dtype))
    cfeat, cpos, _ = init_centroids_grid(feature, config.clusters)
    q = None
    for _ in range(config.iters):
        q = soft_assignment(pfeat, ppos, cfeat, cpos, config)
        cfeat = _update_centroids(q, pfeat, cfeat)
        cpos = _update_centroids(q, ppos, cpos)
    centroids = np.concatenate([cfeat.data, cpos.data], axis=1)
    return SuperpixelAssignment(q=q, hard=hard_map(q), centroids=centroids)


def hard_map(q: Tensor | np.ndarray) -> np.ndarray:
    """Per-pixel argmax of the soft assignment; first cluster wins ties."""
    data = q.data if isinstance(q, Tensor) else np.asarray(q)
    if data.size == 0:
        raise ShapeError("empty assignment matrix")
    return data.argmax(axis=1)

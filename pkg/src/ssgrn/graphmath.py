"""Spectral graph mathematics: Laplacians, Chebyshev filters, and the
renormalized graph convolution used by both reasoning branches.

Matrix inputs are plain float64 numpy arrays (dense, node counts up to 1024
by contract); only graph_conv participates in automatic differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class GraphAdjacency:
    """Nonnegative K x K adjacency; symmetry is asserted where an op needs it."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ShapeError(f"adjacency must be square, got {self.matrix.shape}")
        if np.any(self.matrix < 0):
            raise ValueError("adjacency entries must be nonnegative")

    @property
    def nodes(self) -> int:
        return self.matrix.shape[0]


@dataclass
class SpectralFilter:
    """Chebyshev coefficients theta'_0 .. theta'_k of a polynomial filter."""

    coeffs: list[float] = field(default_factory=lambda: [1.0])

    def __post_init__(self):
        if len(self.coeffs) == 0:
            raise ValueError("filter needs at least one coefficient")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("filter coefficients must be finite")

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1


def _as_adjacency(a) -> np.ndarray:
    if isinstance(a, GraphAdjacency):
        return a.matrix
    return GraphAdjacency(np.asarray(a)).matrix


def normalized_laplacian(a) -> np.ndarray:
    """Symmetric normalized Laplacian I - D^{-1/2} A D^{-1/2}.

    Zero-degree rows get a zero inverse root, so isolated nodes map to a
    diagonal 1. Eigenvalues lie in [0, 2] for symmetric nonnegative input.
    """
    m = _as_adjacency(a)
    if not np.allclose(m, m.T, atol=1e-12):
        raise ValueError("normalized_laplacian requires a symmetric adjacency")
    deg = m.sum(axis=1)
    inv_root = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    norm = inv_root[:, None] * m * inv_root[None, :]
    return np.eye(m.shape[0]) - norm


def renormalized_propagation(a) -> np.ndarray:
    """Propagation matrix of the self-loop trick: D_hat^{-1/2} (A+I) D_hat^{-1/2}.

    Adding self loops before symmetric normalization bounds the spectral
    radius by 1, so stacked propagation neither explodes nor vanishes.
    """
    m = _as_adjacency(a)
    m_hat = m + np.eye(m.shape[0])
    deg = m_hat.sum(axis=1)
    inv_root = 1.0 / np.sqrt(deg)  # deg >= 1 thanks to the self loop
    return inv_root[:, None] * m_hat * inv_root[None, :]


def chebyshev_eval(n: int, x: float) -> float:
    """T_n(x) by the recursion T_0 = 1, T_1 = x, T_n = 2 x T_{n-1} - T_{n-2}."""
    if n < 0:
        raise ValueError("polynomial order must be nonnegative")
    if n == 0:
        return 1.0
    prev, cur = 1.0, float(x)
    for _ in range(n - 1):
        prev, cur = cur, 2.0 * x * cur - prev
    return cur


def estimate_lambda_max(matrix: np.ndarray, iters: int = 100, seed: int = 0) -> float:
    """Dominant eigenvalue magnitude by power iteration (symmetric input)."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=matrix.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = matrix @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        lam = float(v @ (matrix @ v))
    return abs(lam)


def chebyshev_filter(
    laplacian: np.ndarray,
    filt: SpectralFilter,
    x: np.ndarray,
    lambda_max: float | None = 2.0,
) -> np.ndarray:
    """Apply sum_i theta'_i T_i(L_hat) to node features X (K x C).

    L_hat = (2 / lambda_max) L - I. lambda_max defaults to the simplified
    value 2; pass None to estimate it by power iteration instead.
    """
    lap = np.asarray(laplacian, dtype=np.float64)
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
        raise ShapeError(f"laplacian must be square, got {lap.shape}")
    if lambda_max is None:
        lambda_max = estimate_lambda_max(lap)
        if lambda_max == 0.0:
            lambda_max = 2.0
    x = np.asarray(x, dtype=np.float64)
    scaled = (2.0 / lambda_max) * lap - np.eye(lap.shape[0])
    t_prev = x
    out = filt.coeffs[0] * t_prev
    if filt.order >= 1:
        t_cur = scaled @ x
        out = out + filt.coeffs[1] * t_cur
        for i in range(2, filt.order + 1):
            t_prev, t_cur = t_cur, 2.0 * (scaled @ t_cur) - t_prev
            out = out + filt.coeffs[i] * t_cur
    return out


def graph_conv(z: Tensor, x: Tensor, w: Tensor) -> Tensor:
    """One graph convolution relu(Z X W), differentiable through all three."""
    if z.shape[1] != x.shape[0] or x.shape[1] != w.shape[0]:
        raise ShapeError(f"graph_conv shapes do not chain: {z.shape}, {x.shape}, {w.shape}")
    return T.relu(T.matmul(T.matmul(z, x), w))

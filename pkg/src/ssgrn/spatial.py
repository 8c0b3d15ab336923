"""Spatial graph reasoning branch.

Pipeline over a backbone feature F (C x H x W): superpixel descriptors,
attention-built adjacency, graph convolution, attention reprojection back
to pixels, and a pair of classifier heads (main on the reprojected feature,
auxiliary straight on F to stabilize early superpixels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graphmath import graph_conv
from .layers import Conv2d, GroupNorm, Linear, fan_in_uniform
from .losses import cross_entropy_masked
from .superpixels import SuperpixelAssignment
from .tensor import Tensor

EPS_MASS = 1e-8


class InnerProductCounter:
    """Counts latent-space inner products spent building attention matrices."""

    def __init__(self):
        self.enabled = False
        self.count = 0

    def reset(self):
        self.count = 0

    def add(self, n: int):
        if self.enabled:
            self.count += n


#: Global instrumentation hook used by complexity tests.
inner_product_counter = InnerProductCounter()


@dataclass
class DescriptorGraph:
    """One reasoning pass: descriptors D, embedded nodes X, adjacency Z,
    reasoned nodes G. Z rows are softmax-normalized."""

    descriptors: Tensor
    nodes: Tensor
    adjacency: Tensor
    reasoned: Tensor


def pool_descriptors(feature: Tensor, assign: SuperpixelAssignment, mode: str = "soft") -> Tensor:
    """K x C region means of the feature.

    Soft mode weighs pixels by their assignment row (differentiable); hard
    mode uses the argmax indicator. Denominators carry a small epsilon so
    empty regions yield zeros instead of NaN.
    """
    c, h, w = feature.shape
    pixels = feature.reshape(c, h * w).T  # N x C
    if mode == "soft":
        q = assign.q
    elif mode == "hard":
        k = assign.q.shape[1]
        onehot = np.zeros((h * w, k), dtype=feature.dtype)
        onehot[np.arange(h * w), assign.hard] = 1
        q = Tensor(onehot)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    mass = T.tsum(q, axis=0).reshape(-1, 1)
    return T.matmul(q.T, pixels) / (mass + EPS_MASS)


def attention_adjacency(descriptors: Tensor, phi: Linear, psi: Linear) -> Tensor:
    """Row-stochastic K x K adjacency: softmax of embedded inner products."""
    logits = T.matmul(phi(descriptors), psi(descriptors).T)
    inner_product_counter.add(logits.size)
    return T.softmax(logits, axis=1)


def reason(adjacency: Tensor, nodes: Tensor, weight: Tensor) -> Tensor:
    """Propagate node features over the dense adjacency: relu(Z X W)."""
    return graph_conv(adjacency, nodes, weight)


def reproject(
    reasoned: Tensor, feature: Tensor, rho: Linear, eta: Linear, zeta: Linear
) -> tuple[Tensor, Tensor]:
    """Pixel-level feature rebuilt as attention-weighted sums of reasoned nodes.

    Each node distributes one unit of attention over the pixels (rows of the
    K x N affinity sum to 1); the output is affinity^T zeta(G) reshaped back
    to C x H x W. Returns (feature map, affinity).
    """
    c, h, w = feature.shape
    pixels = feature.reshape(c, h * w).T  # N x C
    logits = T.matmul(rho(reasoned), eta(pixels).T)  # K x N
    inner_product_counter.add(logits.size)
    affinity = T.softmax(logits, axis=1)
    recon = T.matmul(affinity.T, zeta(reasoned))  # N x C
    return recon.T.reshape(c, h, w), affinity


class ClassifierHead:
    """3x3 conv -> group norm -> relu -> 1x1 conv to class logits -> bilinear
    upsample to the requested resolution. Softmax lives in the loss."""

    def __init__(self, rng, in_channels: int, classes: int, hidden: int = 128, dtype=np.float32):
        self.conv1 = Conv2d(rng, in_channels, hidden, kernel=3, padding=1, dtype=dtype)
        self.norm = GroupNorm(hidden, dtype=dtype)
        self.conv2 = Conv2d(rng, hidden, classes, kernel=1, dtype=dtype)

    def __call__(self, feature: Tensor, out_h: int, out_w: int) -> Tensor:
        x = T.relu(self.norm(self.conv1(feature)))
        x = self.conv2(x)
        return T.bilinear_upsample(x, out_h, out_w)

    def named_params(self):
        for name, p, decay in self.conv1.named_params():
            yield f"conv1.{name}", p, decay
        for name, p, decay in self.norm.named_params():
            yield f"norm.{name}", p, decay
        for name, p, decay in self.conv2.named_params():
            yield f"conv2.{name}", p, decay


@dataclass
class SpatialReasoningOutput:
    graph: DescriptorGraph
    assignment: SuperpixelAssignment
    affinity: Tensor
    feature_main: Tensor
    logits_main: Tensor
    logits_aux: Tensor


class SpatialBranch:
    """Bundles the projections and heads of the spatial reasoning pipeline."""

    def __init__(self, rng, channels: int, classes: int, head_hidden: int = 128, dtype=np.float32):
        embed = max(1, channels // 4)
        self.phi = Linear(rng, channels, embed, dtype=dtype)
        self.psi = Linear(rng, channels, embed, dtype=dtype)
        self.xi = Linear(rng, channels, channels, dtype=dtype)
        self.gcn_weight = fan_in_uniform(rng, (channels, channels), channels, dtype)
        self.rho = Linear(rng, channels, embed, dtype=dtype)
        self.eta = Linear(rng, channels, embed, dtype=dtype)
        self.zeta = Linear(rng, channels, channels, dtype=dtype)
        self.head_main = ClassifierHead(rng, channels, classes, head_hidden, dtype=dtype)
        self.head_aux = ClassifierHead(rng, channels, classes, head_hidden, dtype=dtype)

    def forward(
        self, feature: Tensor, assign: SuperpixelAssignment, out_h: int, out_w: int, mode: str = "soft"
    ) -> SpatialReasoningOutput:
        d = pool_descriptors(feature, assign, mode=mode)
        z = attention_adjacency(d, self.phi, self.psi)
        x = self.xi(d)
        g = reason(z, x, self.gcn_weight)
        feature_main, affinity = reproject(g, feature, self.rho, self.eta, self.zeta)
        return SpatialReasoningOutput(
            graph=DescriptorGraph(descriptors=d, nodes=x, adjacency=z, reasoned=g),
            assignment=assign,
            affinity=affinity,
            feature_main=feature_main,
            logits_main=self.head_main(feature_main, out_h, out_w),
            logits_aux=self.head_aux(feature, out_h, out_w),
        )

    def named_params(self):
        blocks = [
            ("phi", self.phi),
            ("psi", self.psi),
            ("xi", self.xi),
            ("rho", self.rho),
            ("eta", self.eta),
            ("zeta", self.zeta),
            ("head_main", self.head_main),
            ("head_aux", self.head_aux),
        ]
        yield "gcn_weight", self.gcn_weight, True
        for prefix, block in blocks:
            for name, p, decay in block.named_params():
                yield f"{prefix}.{name}", p, decay


def sagrn_loss(
    logits_main: Tensor, logits_aux: Tensor, labels: np.ndarray, mask: np.ndarray | None = None
) -> Tensor:
    """Main plus auxiliary masked cross entropy."""
    return cross_entropy_masked(logits_main, labels, mask) + cross_entropy_masked(
        logits_aux, labels, mask
    )

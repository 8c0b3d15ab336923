"""Spectral graph reasoning branch.

Channels of a downsampled backbone feature are grouped into contiguous band
ranges; each group's mean map, flattened over space, is one spectral
descriptor. The descriptors are reasoned exactly like the spatial ones
(attention adjacency + graph convolution), then reassembled channel by
channel through an attention affinity against the original band maps and
bilinearly upsampled back to the feature extent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graphmath import graph_conv
from .layers import Linear, fan_in_uniform
from .losses import cross_entropy_masked
from .spatial import ClassifierHead, DescriptorGraph
from .tensor import ShapeError, Tensor


@dataclass
class SpectralGrouping:
    """Contiguous partition of C channels into M band ranges; when M does not
    divide C the final range absorbs the remainder."""

    groups: int
    ranges: list[tuple[int, int]]

    @property
    def group_size(self) -> int:
        return self.ranges[0][1] - self.ranges[0][0]


def spectral_downsample(feature: Tensor, stride: int) -> Tensor:
    """Average-pool each band map; output extent ceil(H/stride) via edge padding."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride == 1:
        return feature
    return T.avg_pool2d(feature, kernel=stride, stride=stride, ceil_mode=True)


def group_bands(channels: int, groups: int) -> SpectralGrouping:
    if groups > channels:
        raise ShapeError(f"cannot split {channels} bands into {groups} groups")
    size = channels // groups
    ranges = [(i * size, (i + 1) * size) for i in range(groups)]
    ranges[-1] = (ranges[-1][0], channels)  # remainder, if any
    return SpectralGrouping(groups=groups, ranges=ranges)


def spectral_descriptors(feature: Tensor, grouping: SpectralGrouping) -> Tensor:
    """M x (H'W') descriptors: per-group channel means, flattened over space.

    Implemented as one matmul with a row-normalized group indicator so the
    whole aggregation is differentiable.
    """
    c, h, w = feature.shape
    if grouping.ranges[-1][1] != c:
        raise ShapeError(f"grouping covers {grouping.ranges[-1][1]} bands, feature has {c}")
    indicator = np.zeros((grouping.groups, c), dtype=feature.dtype)
    for i, (lo, hi) in enumerate(grouping.ranges):
        indicator[i, lo:hi] = 1.0 / (hi - lo)
    return T.matmul(Tensor(indicator), feature.reshape(c, h * w))


@dataclass
class SpectralReasoningOutput:
    graph: DescriptorGraph
    affinity: Tensor
    feature: Tensor
    logits: Tensor


class SpectralBranch:
    """Projections and head for reasoning over band-group descriptors.

    Descriptor vectors have length L = H'W'; embeddings use L/4, reasoned
    nodes L/16, and the reconstruction projection maps back to full length L
    so the output reshapes exactly to the downsampled extent.
    """

    def __init__(
        self,
        rng,
        channels: int,
        groups: int,
        down_h: int,
        down_w: int,
        classes: int,
        stride: int,
        head_hidden: int = 128,
        dtype=np.float32,
    ):
        length = down_h * down_w
        embed = max(1, length // 4)
        node_width = max(1, length // 16)
        self.groups = groups
        self.stride = stride
        self.down_h = down_h
        self.down_w = down_w
        self.phi = Linear(rng, length, embed, dtype=dtype)
        self.psi = Linear(rng, length, embed, dtype=dtype)
        self.xi = Linear(rng, length, node_width, dtype=dtype)
        self.gcn_weight = fan_in_uniform(rng, (node_width, node_width), node_width, dtype)
        self.rho = Linear(rng, node_width, embed, dtype=dtype)
        self.eta = Linear(rng, length, embed, dtype=dtype)
        self.zeta = Linear(rng, node_width, length, dtype=dtype)
        self.head = ClassifierHead(rng, channels, classes, head_hidden, dtype=dtype)

    def reason_and_reconstruct(self, down: Tensor, out_h: int, out_w: int) -> tuple[DescriptorGraph, Tensor, Tensor]:
        """Adjacency over descriptors, graph conv, channel-wise reconstruction,
        upsample to (out_h, out_w). Returns (graph, affinity M x C, feature)."""
        c, h, w = down.shape
        grouping = group_bands(c, self.groups)
        d = spectral_descriptors(down, grouping)
        z = T.softmax(T.matmul(self.phi(d), self.psi(d).T), axis=1)
        x = self.xi(d)
        g = graph_conv(z, x, self.gcn_weight)
        bands = down.reshape(c, h * w)  # each channel one flattened map
        logits = T.matmul(self.rho(g), self.eta(bands).T)  # M x C
        affinity = T.softmax(logits, axis=1)
        recon = T.matmul(affinity.T, self.zeta(g))  # C x (H'W')
        feature = T.bilinear_upsample(recon.reshape(c, h, w), out_h, out_w)
        graph = DescriptorGraph(descriptors=d, nodes=x, adjacency=z, reasoned=g)
        return graph, affinity, feature

    def forward(self, feature: Tensor, out_h: int, out_w: int) -> SpectralReasoningOutput:
        c, h, w = feature.shape
        down = spectral_downsample(feature, self.stride)
        if down.shape[1:] != (self.down_h, self.down_w):
            raise ShapeError(
                f"downsampled extent {down.shape[1:]} does not match configured "
                f"{(self.down_h, self.down_w)}"
            )
        graph, affinity, rebuilt = self.reason_and_reconstruct(down, h, w)
        return SpectralReasoningOutput(
            graph=graph,
            affinity=affinity,
            feature=rebuilt,
            logits=self.head(rebuilt, out_h, out_w),
        )

    def named_params(self):
        yield "gcn_weight", self.gcn_weight, True
        blocks = [
            ("phi", self.phi),
            ("psi", self.psi),
            ("xi", self.xi),
            ("rho", self.rho),
            ("eta", self.eta),
            ("zeta", self.zeta),
            ("head", self.head),
        ]
        for prefix, block in blocks:
            for name, p, decay in block.named_params():
                yield f"{prefix}.{name}", p, decay


def segrn_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Masked cross entropy of the spectral branch classifier."""
    return cross_entropy_masked(logits, labels, mask)

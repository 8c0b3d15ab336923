"""Backbone encoder, branch fusion, loss composition, checkpointing and
complexity accounting for the four network variants (fcn, sagrn, segrn,
ssgrn).

The backbone is three conv->group-norm->relu blocks with one 2x max pool
after the first, so the shared feature F has half the (even-padded) input
extent. Branch outputs are fused by a residual sum with F.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import ConvBlock
from .losses import cross_entropy_masked
from .spatial import ClassifierHead, SpatialBranch, SpatialReasoningOutput
from .spectral import SpectralBranch, SpectralReasoningOutput
from .superpixels import SlicConfig, soft_assign_iterate
from .tensor import ShapeError, Tensor

VARIANTS = ("fcn", "sagrn", "segrn", "ssgrn")

CHECKPOINT_MAGIC = b"SSGRNCKPT 1\n"


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


@dataclass
class ModelConfig:
    in_bands: int
    classes: int
    height: int
    width: int
    widths: tuple[int, int, int] = (64, 128, 256)
    descriptors: int = 256
    spectral_descriptors: int | None = None
    variant: str = "ssgrn"
    slic_iters: int = 5
    slic_compactness: float = 0.5
    slic_temperature: float = 0.1
    spectral_stride: int = 4
    head_hidden: int = 128

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.widths) != 3:
            raise ValueError("backbone needs exactly three channel widths")
        if self.spectral_descriptors is None:
            self.spectral_descriptors = min(self.widths[-1], 256)

    @property
    def padded_hw(self) -> tuple[int, int]:
        return self.height + self.height % 2, self.width + self.width % 2

    @property
    def feature_hw(self) -> tuple[int, int]:
        h, w = self.padded_hw
        return h // 2, w // 2

    @property
    def feature_pixels(self) -> int:
        h, w = self.feature_hw
        return h * w

    def slic(self) -> SlicConfig:
        return SlicConfig(
            clusters=self.descriptors,
            iters=self.slic_iters,
            compactness=self.slic_compactness,
            temperature=self.slic_temperature,
        )


@dataclass
class ModelState:
    """Serializable view of a model: config, named parameters, step counter."""

    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    iteration: int = 0


@dataclass
class ForwardOutput:
    feature: Tensor
    spatial: SpatialReasoningOutput | None = None
    spectral: SpectralReasoningOutput | None = None
    fused_feature: Tensor | None = None
    logits: dict = field(default_factory=dict)

    def primary_logits(self, variant: str) -> Tensor:
        key = {"fcn": "fcn", "sagrn": "sa_main", "segrn": "se", "ssgrn": "fused"}[variant]
        return self.logits[key]


def fuse(feature_spatial: Tensor, feature_spectral: Tensor, feature: Tensor) -> Tensor:
    """Residual fusion: elementwise sum of the two branch maps and F."""
    if not (feature_spatial.shape == feature_spectral.shape == feature.shape):
        raise ShapeError(
            f"fusion shapes differ: {feature_spatial.shape}, "
            f"{feature_spectral.shape}, {feature.shape}"
        )
    return feature_spatial + feature_spectral + feature


_REQUIRED_LOSSES = {
    "fcn": ("fcn",),
    "sagrn": ("sa_main", "sa_aux"),
    "segrn": ("se",),
    "ssgrn": ("sa_main", "sa_aux", "se", "fused"),
}


def total_loss(variant: str, losses: dict) -> Tensor:
    """Sum the variant's component losses; missing components are an error."""
    if variant not in _REQUIRED_LOSSES:
        raise ValueError(f"unknown variant {variant!r}")
    required = _REQUIRED_LOSSES[variant]
    missing = [k for k in required if k not in losses]
    if missing:
        raise ValueError(f"variant {variant} is missing loss components {missing}")
    total = losses[required[0]]
    for key in required[1:]:
        total = total + losses[key]
    return total


def count_attention_ops(k: int, n: int) -> int:
    """Inner products spent by spatial attention: K*K adjacency + N*K reprojection."""
    return k * k + n * k


class SSGRN:
    """The full network; which submodules exist depends on config.variant."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.iteration = 0
        rng = np.random.default_rng(seed)
        w1, w2, w3 = config.widths
        self.block1 = ConvBlock(rng, config.in_bands, w1, dtype=dtype)
        self.block2 = ConvBlock(rng, w1, w2, dtype=dtype)
        self.block3 = ConvBlock(rng, w2, w3, dtype=dtype)
        self.spatial: SpatialBranch | None = None
        self.spectral: SpectralBranch | None = None
        self.head_fused: ClassifierHead | None = None
        self.head_fcn: ClassifierHead | None = None
        fh, fw = config.feature_hw
        if config.variant in ("sagrn", "ssgrn"):
            self.spatial = SpatialBranch(rng, w3, config.classes, config.head_hidden, dtype=dtype)
        if config.variant in ("segrn", "ssgrn"):
            stride = config.spectral_stride
            dh, dw = -(-fh // stride), -(-fw // stride)
            self.spectral = SpectralBranch(
                rng, w3, config.spectral_descriptors, dh, dw,
                config.classes, stride, config.head_hidden, dtype=dtype,
            )
        if config.variant == "ssgrn":
            self.head_fused = ClassifierHead(rng, w3, config.classes, config.head_hidden, dtype=dtype)
        if config.variant == "fcn":
            self.head_fcn = ClassifierHead(rng, w3, config.classes, config.head_hidden, dtype=dtype)

    # -- forward ------------------------------------------------------------------

    def backbone_forward(self, image: Tensor) -> Tensor:
        c, h, w = image.shape
        if c != self.config.in_bands:
            raise ShapeError(f"model expects {self.config.in_bands} bands, image has {c}")
        if (h, w) != self.config.padded_hw:
            raise ShapeError(f"model expects {self.config.padded_hw} input, image is {(h, w)}")
        x = self.block1(image)
        x = T.max_pool2d(x, kernel=2, stride=2)
        x = self.block2(x)
        return self.block3(x)

    def forward(self, image: Tensor, pool_mode: str = "soft") -> ForwardOutput:
        h0, w0 = self.config.padded_hw
        feature = self.backbone_forward(image)
        out = ForwardOutput(feature=feature)
        if self.config.variant == "fcn":
            out.logits["fcn"] = self.head_fcn(feature, h0, w0)
            return out
        if self.spatial is not None:
            assign = soft_assign_iterate(feature, self.config.slic())
            sp = self.spatial.forward(feature, assign, h0, w0, mode=pool_mode)
            out.spatial = sp
            out.logits["sa_main"] = sp.logits_main
            out.logits["sa_aux"] = sp.logits_aux
        if self.spectral is not None:
            se = self.spectral.forward(feature, h0, w0)
            out.spectral = se
            out.logits["se"] = se.logits
        if self.config.variant == "ssgrn":
            out.fused_feature = fuse(out.spatial.feature_main, out.spectral.feature, feature)
            out.logits["fused"] = self.head_fused(out.fused_feature, h0, w0)
        return out

    def branch_losses(self, out: ForwardOutput, labels: np.ndarray, mask: np.ndarray) -> dict:
        return {key: cross_entropy_masked(logits, labels, mask) for key, logits in out.logits.items()}

    # -- parameter registry -----------------------------------------------------------

    def named_parameters(self):
        """Yield (name, tensor, decay) in a fixed deterministic order."""
        for prefix, block in (("backbone.block1", self.block1),
                              ("backbone.block2", self.block2),
                              ("backbone.block3", self.block3)):
            for name, p, decay in block.named_params():
                yield f"{prefix}.{name}", p, decay
        if self.spatial is not None:
            for name, p, decay in self.spatial.named_params():
                yield f"spatial.{name}", p, decay
        if self.spectral is not None:
            for name, p, decay in self.spectral.named_params():
                yield f"spectral.{name}", p, decay
        if self.head_fused is not None:
            for name, p, decay in self.head_fused.named_params():
                yield f"head_fused.{name}", p, decay
        if self.head_fcn is not None:
            for name, p, decay in self.head_fcn.named_params():
                yield f"head_fcn.{name}", p, decay

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((name, p) for name, p, _ in self.named_parameters())

    def no_decay_names(self) -> set[str]:
        return {name for name, _, decay in self.named_parameters() if not decay}

    def zero_grad(self):
        for _, p, _ in self.named_parameters():
            p.grad = None

    def state(self) -> ModelState:
        params = OrderedDict((name, p.data) for name, p, _ in self.named_parameters())
        return ModelState(config=self.config, params=params, iteration=self.iteration)

    def load_state(self, state: ModelState) -> None:
        own = self.parameters()
        if list(own.keys()) != list(state.params.keys()):
            raise CheckpointError("checkpoint parameter names do not match the model")
        for name, tensor in own.items():
            arr = state.params[name]
            if tensor.data.shape != arr.shape:
                raise CheckpointError(f"parameter {name} has shape {arr.shape}, expected {tensor.data.shape}")
            tensor.data = arr.astype(self.dtype, copy=True)
        self.iteration = state.iteration

    @classmethod
    def from_checkpoint(cls, path, dtype=np.float32) -> "SSGRN":
        state = load_checkpoint(path)
        model = cls(state.config, dtype=dtype)
        model.load_state(state)
        return model


def count_params(state: ModelState | SSGRN) -> int:
    if isinstance(state, SSGRN):
        state = state.state()
    return sum(arr.size for arr in state.params.values())


# -- checkpoint wire format -------------------------------------------------------------
#
# magic line, then a key=value config block ended by a blank line, then the
# parameter count as a decimal line, then per parameter: name length (u16 LE),
# name bytes, rank (u8), extents (u32 LE each), f32 LE payload.

_CONFIG_KEYS = (
    "in_bands", "classes", "height", "width", "widths", "descriptors",
    "spectral_descriptors", "variant", "slic_iters", "slic_compactness",
    "slic_temperature", "spectral_stride", "head_hidden", "iteration",
)


def _config_block(config: ModelConfig, iteration: int) -> bytes:
    values = {
        "in_bands": config.in_bands,
        "classes": config.classes,
        "height": config.height,
        "width": config.width,
        "widths": ",".join(str(v) for v in config.widths),
        "descriptors": config.descriptors,
        "spectral_descriptors": config.spectral_descriptors,
        "variant": config.variant,
        "slic_iters": config.slic_iters,
        "slic_compactness": repr(config.slic_compactness),
        "slic_temperature": repr(config.slic_temperature),
        "spectral_stride": config.spectral_stride,
        "head_hidden": config.head_hidden,
        "iteration": iteration,
    }
    lines = [f"{key}={values[key]}\n" for key in _CONFIG_KEYS]
    return "".join(lines).encode("ascii") + b"\n"


def _parse_config_block(lines: list[str]) -> tuple[ModelConfig, int]:
    kv = {}
    for line in lines:
        if "=" not in line:
            raise CheckpointError(f"malformed config line {line!r}")
        key, _, value = line.partition("=")
        kv[key] = value
    try:
        config = ModelConfig(
            in_bands=int(kv["in_bands"]),
            classes=int(kv["classes"]),
            height=int(kv["height"]),
            width=int(kv["width"]),
            widths=tuple(int(v) for v in kv["widths"].split(",")),
            descriptors=int(kv["descriptors"]),
            spectral_descriptors=int(kv["spectral_descriptors"]),
            variant=kv["variant"],
            slic_iters=int(kv["slic_iters"]),
            slic_compactness=float(kv["slic_compactness"]),
            slic_temperature=float(kv["slic_temperature"]),
            spectral_stride=int(kv["spectral_stride"]),
            head_hidden=int(kv["head_hidden"]),
        )
        return config, int(kv["iteration"])
    except KeyError as exc:
        raise CheckpointError(f"config block missing key {exc}") from exc


def save_checkpoint(state: ModelState | SSGRN, path) -> None:
    if isinstance(state, SSGRN):
        state = state.state()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_config_block(state.config, state.iteration))
        fh.write(f"{len(state.params)}\n".encode("ascii"))
        for name, arr in state.params.items():
            payload = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("ascii")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", payload.ndim))
            for extent in payload.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(payload.tobytes())


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("bad checkpoint magic")
    offset = len(CHECKPOINT_MAGIC)
    lines = []
    while True:
        end = blob.find(b"\n", offset)
        if end < 0:
            raise CheckpointError("truncated config block")
        line = blob[offset:end].decode("ascii")
        offset = end + 1
        if line == "":
            break
        lines.append(line)
    config, iteration = _parse_config_block(lines)
    end = blob.find(b"\n", offset)
    if end < 0:
        raise CheckpointError("missing parameter count")
    count = int(blob[offset:end].decode("ascii"))
    offset = end + 1
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        if offset + 2 > len(blob):
            raise CheckpointError("truncated parameter header")
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("ascii")
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = []
        for _ in range(rank):
            (extent,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape.append(extent)
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if offset + nbytes > len(blob):
            raise CheckpointError(f"truncated payload for parameter {name}")
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype="<f4").reshape(shape)
        offset += nbytes
        params[name] = arr.copy()
    if offset != len(blob):
        raise CheckpointError("trailing bytes after last parameter")
    return ModelState(config=config, params=params, iteration=iteration)


# -- inference helpers ----------------------------------------------------------------


def pad_to_even(values: np.ndarray) -> np.ndarray:
    """Zero-pad the trailing two axes on the right/bottom to even extents."""
    h, w = values.shape[-2:]
    ph, pw = h % 2, w % 2
    if ph == 0 and pw == 0:
        return values
    pad = [(0, 0)] * (values.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(values, pad)


def predict_map(
    model: SSGRN, image: Tensor, out_hw: tuple[int, int] | None = None, pool_mode: str = "soft"
) -> np.ndarray:
    """Predicted class per pixel (1..C_n), cropped to ``out_hw`` when given."""
    with T.no_grad():
        out = model.forward(image, pool_mode=pool_mode)
        logits = out.primary_logits(model.config.variant)
    pred = logits.data.argmax(axis=0).astype(np.uint16) + 1
    if out_hw is not None:
        pred = pred[: out_hw[0], : out_hw[1]]
    return pred

"""Hyperspectral cube and label storage, per-class splits, and a synthetic
scene generator.

File formats (all little-endian, trivially parseable from any language):

* cube:   ``HSICUBE 1 <H> <W> <C>\\n`` then C*H*W f32, band-major then row-major
* labels: ``LABELS 1 <H> <W>\\n`` then H*W u16 (0 = unlabeled, 1..C_n = classes)
* split:  text lines ``<row> <col> <class> <train|val|test>``
* counts: text lines ``<class_id> <train> <val>``
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

EPS_STD = 1e-8

SUBSETS = ("train", "val", "test")
_SUBSET_CODE = {"train": 1, "val": 2, "test": 3}
_CODE_SUBSET = {v: k for k, v in _SUBSET_CODE.items()}


class FormatError(ValueError):
    """Malformed or truncated data file."""


@dataclass
class HsiCube:
    """Band-major cube of shape (C, H, W), float32, all values finite."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise FormatError(f"cube must be (C,H,W), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise FormatError("cube contains non-finite values")

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass
class LabelMap:
    """Per-pixel labels, uint16; 0 marks unlabeled pixels."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint16)
        if self.labels.ndim != 2:
            raise FormatError(f"labels must be 2-D, got {self.labels.shape}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def classes(self) -> int:
        return int(self.labels.max())


@dataclass
class SplitSpec:
    """Train/val/test assignment per pixel (0 = unassigned).

    Assignments exist only on labeled pixels; per-class train/val counts match
    the request exactly whenever the class population allows it.
    """

    assignment: np.ndarray
    seed: int = 0
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.uint8)

    def mask(self, subset: str) -> np.ndarray:
        if subset not in _SUBSET_CODE:
            raise ValueError(f"unknown subset {subset!r}")
        return self.assignment == _SUBSET_CODE[subset]


# -- file io ----------------------------------------------------------------------


def _read_header(blob: bytes, magic: str, n_fields: int) -> tuple[list[int], int]:
    end = blob.find(b"\n")
    if end < 0:
        raise FormatError("missing header line")
    parts = blob[:end].decode("ascii", errors="replace").split()
    if len(parts) != n_fields + 2 or parts[0] != magic or parts[1] != "1":
        raise FormatError(f"bad header {blob[:end]!r}; expected '{magic} 1 ...'")
    try:
        dims = [int(p) for p in parts[2:]]
    except ValueError as exc:
        raise FormatError(f"non-integer extent in header {blob[:end]!r}") from exc
    if any(d <= 0 for d in dims):
        raise FormatError(f"non-positive extent in header {blob[:end]!r}")
    return dims, end + 1


def save_cube(cube: HsiCube, path) -> None:
    with open(path, "wb") as fh:
        fh.write(f"HSICUBE 1 {cube.height} {cube.width} {cube.bands}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())


def load_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        blob = fh.read()
    (h, w, c), offset = _read_header(blob, "HSICUBE", 3)
    expected = 4 * c * h * w
    payload = blob[offset:]
    if len(payload) != expected:
        raise FormatError(f"cube payload is {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").reshape(c, h, w)
    return HsiCube(values.copy())


def save_labels(labels: LabelMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(f"LABELS 1 {labels.height} {labels.width}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(labels.labels, dtype="<u2").tobytes())


def load_labels(path) -> LabelMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    (h, w), offset = _read_header(blob, "LABELS", 2)
    expected = 2 * h * w
    payload = blob[offset:]
    if len(payload) != expected:
        raise FormatError(f"label payload is {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<u2").reshape(h, w)
    return LabelMap(values.copy())


def save_split(split: SplitSpec, labels: LabelMap, path) -> None:
    rows, cols = np.nonzero(split.assignment)
    order = np.lexsort((cols, rows))
    with open(path, "w", encoding="ascii") as fh:
        for i in order:
            r, c = int(rows[i]), int(cols[i])
            fh.write(f"{r} {c} {int(labels.labels[r, c])} {_CODE_SUBSET[split.assignment[r, c]]}\n")


def load_split(path, shape: tuple[int, int]) -> SplitSpec:
    assignment = np.zeros(shape, dtype=np.uint8)
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4 or parts[3] not in _SUBSET_CODE:
                raise FormatError(f"{path}:{lineno}: malformed split line {line!r}")
            r, c = int(parts[0]), int(parts[1])
            if not (0 <= r < shape[0] and 0 <= c < shape[1]):
                raise FormatError(f"{path}:{lineno}: pixel ({r},{c}) outside {shape}")
            assignment[r, c] = _SUBSET_CODE[parts[3]]
    return SplitSpec(assignment=assignment)


def load_class_counts(path) -> dict[int, tuple[int, int]]:
    counts: dict[int, tuple[int, int]] = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected '<class> <train> <val>'")
            counts[int(parts[0])] = (int(parts[1]), int(parts[2]))
    return counts


# -- transforms -------------------------------------------------------------------------


def standardize(cube: HsiCube) -> HsiCube:
    """Per-band zero mean and unit variance; constant bands map to zeros."""
    flat = cube.values.reshape(cube.bands, -1).astype(np.float64)
    mu = flat.mean(axis=1, keepdims=True)
    sigma = flat.std(axis=1, keepdims=True)
    out = (flat - mu) / np.maximum(sigma, EPS_STD)
    return HsiCube(out.reshape(cube.values.shape).astype(np.float32))


def default_counts(labels: LabelMap, train: int = 80, val: int = 20) -> dict[int, tuple[int, int]]:
    """The 80/20 per-class pattern for every class present in the labels."""
    present = np.unique(labels.labels)
    return {int(c): (train, val) for c in present if c != 0}


def make_split(labels: LabelMap, counts: dict[int, tuple[int, int]], seed: int = 0) -> SplitSpec:
    """Seeded per-class shuffle: first ``train`` pixels to train, next ``val``
    to val, the remainder to test. Oversized requests are clamped with a
    warning; a requested class with no pixels is an error."""
    rng = np.random.default_rng(seed)
    assignment = np.zeros(labels.labels.shape, dtype=np.uint8)
    for cls in sorted(counts):
        rows, cols = np.nonzero(labels.labels == cls)
        if rows.size == 0:
            raise ValueError(f"class {cls} absent from the label map")
        n_train, n_val = counts[cls]
        if n_train + n_val > rows.size:
            logger.warning(
                "class %d has %d pixels, clamping requested %d train / %d val",
                cls, rows.size, n_train, n_val,
            )
            n_train = min(n_train, rows.size)
            n_val = min(n_val, rows.size - n_train)
        order = rng.permutation(rows.size)
        tr = order[:n_train]
        va = order[n_train : n_train + n_val]
        te = order[n_train + n_val :]
        assignment[rows[tr], cols[tr]] = _SUBSET_CODE["train"]
        assignment[rows[va], cols[va]] = _SUBSET_CODE["val"]
        assignment[rows[te], cols[te]] = _SUBSET_CODE["test"]
    # classes present but not requested become pure test pixels
    leftover = (labels.labels > 0) & (assignment == 0)
    assignment[leftover] = _SUBSET_CODE["test"]
    return SplitSpec(assignment=assignment, seed=seed, counts=dict(counts))


# -- synthetic scenes --------------------------------------------------------------------


def _smooth_signature(rng: np.random.Generator, bands: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, bands)
    sig = rng.uniform(-1.0, 1.0) * np.ones(bands)
    for _ in range(3):
        amp = rng.uniform(0.3, 1.0)
        freq = rng.uniform(0.5, 3.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        sig = sig + amp * np.sin(2.0 * np.pi * freq * t + phase)
    return sig


def synth_scene(
    h: int, w: int, bands: int, classes: int, noise_sigma: float = 0.0, seed: int = 0
) -> tuple[HsiCube, LabelMap]:
    """Fully labeled Voronoi scene: one seeded site per class on a jittered
    grid, one random smooth spectral signature per class, white noise on top."""
    if classes > 16:
        raise ValueError("synthetic scenes support at most 16 classes")
    if classes < 1:
        raise ValueError("need at least one class")
    rng = np.random.default_rng(seed)
    gh = max(1, int(round(np.sqrt(classes * h / w))))
    while classes % gh != 0 and gh > 1:
        gh -= 1
    gw = classes // gh
    cell_h, cell_w = h / gh, w / gw
    sites = []
    for i in range(gh):
        for j in range(gw):
            jr = rng.uniform(-0.125, 0.125) * cell_h
            jc = rng.uniform(-0.125, 0.125) * cell_w
            sites.append(((i + 0.5) * cell_h + jr, (j + 0.5) * cell_w + jc))
    sites_arr = np.array(sites)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d2 = (rr[..., None] - sites_arr[:, 0]) ** 2 + (cc[..., None] - sites_arr[:, 1]) ** 2
    labels = d2.argmin(axis=2).astype(np.uint16) + 1
    signatures = np.stack([_smooth_signature(rng, bands) for _ in range(classes)])
    values = signatures[labels - 1].transpose(2, 0, 1).astype(np.float32)
    if noise_sigma > 0:
        values = values + rng.normal(0.0, noise_sigma, size=values.shape).astype(np.float32)
    return HsiCube(values), LabelMap(labels)

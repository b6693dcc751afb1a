"""Morpho-MNIST ingestion: IDX images, attribute tables, normalisation, splits."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import AlignmentError, DegenerateRangeError, FormatError

IMAGE_SIZE = 28
CONTINUOUS = ("thickness", "intensity", "slant")
ATTRIBUTES = CONTINUOUS + ("label",)
NUM_CLASSES = 10

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class AttributeVector:
    thickness: float
    intensity: float
    slant: float
    label: int

    def continuous(self) -> np.ndarray:
        return np.array([self.thickness, self.intensity, self.slant], dtype=np.float64)

    def replace(self, **changes) -> "AttributeVector":
        values = {name: getattr(self, name) for name in ATTRIBUTES}
        values.update(changes)
        return AttributeVector(**values)

    @classmethod
    def from_array(cls, continuous: Sequence[float], label: int) -> "AttributeVector":
        t, i, s = (float(v) for v in continuous)
        return cls(t, i, s, int(label))


@dataclass(frozen=True)
class Observation:
    image: np.ndarray = field(repr=False)
    attributes: AttributeVector
    split: str = "train"
    index: int = -1


# ---------------------------------------------------------------------------
# IDX files


def _open_maybe_gzip(path):
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX (MNIST-style) file, gzip-compressed or raw, as uint8."""
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC):
        raise FormatError(f"{path}: bad IDX magic number 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if array.ndim not in (1, 3):
        raise FormatError("IDX writer supports label (1-D) or image (3-D) arrays")
    magic = IDX_IMAGE_MAGIC if array.ndim == 3 else IDX_LABEL_MAGIC
    payload = struct.pack(">I", magic) + struct.pack(">" + "I" * array.ndim, *array.shape) + array.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    if compress:
        # mtime=0 and an empty stored name keep the compressed bytes reproducible
        with open(path, "wb") as raw_fh, gzip.GzipFile(filename="", fileobj=raw_fh, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def read_attribute_table(path) -> pd.DataFrame:
    table = pd.read_csv(path, sep=None, engine="python")
    table.columns = [str(c).strip().lower() for c in table.columns]
    return table


def load_dataset(image_path, attribute_path, split: str = "train", label_path=None) -> list[Observation]:
    """Load row-aligned images and attributes into observations.

    The attribute table needs ``thickness``, ``intensity`` and ``slant``
    columns; ``label`` may come from the table or from an IDX label file.
    Pixels are scaled from 8-bit storage to [0, 1].
    """
    images = read_idx(image_path)
    if images.ndim != 3 or images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise FormatError(f"{image_path}: expected N x 28 x 28 images, got {images.shape}")
    table = read_attribute_table(attribute_path)
    if label_path is not None:
        table["label"] = read_idx(label_path).astype(np.int64)
    missing = [c for c in ATTRIBUTES if c not in table.columns]
    if missing:
        raise FormatError(f"{attribute_path}: missing columns {missing}")
    if len(table) != len(images):
        raise AlignmentError(f"{len(images)} images but {len(table)} attribute rows")

    pixels = images.astype(np.float32) / np.float32(255.0)
    t = table["thickness"].to_numpy(np.float64)
    i = table["intensity"].to_numpy(np.float64)
    s = table["slant"].to_numpy(np.float64)
    labels = table["label"].to_numpy(np.int64)
    if np.any((labels < 0) | (labels >= NUM_CLASSES)):
        raise FormatError(f"{attribute_path}: labels outside 0..9")
    return [
        Observation(pixels[k], AttributeVector(float(t[k]), float(i[k]), float(s[k]), int(labels[k])), split, k)
        for k in range(len(images))
    ]


def stack(observations: Iterable[Observation]):
    """Return ``(images[N,28,28] float32, continuous[N,3] float64, labels[N] int64)``."""
    observations = list(observations)
    images = np.stack([o.image for o in observations]).astype(np.float32)
    cont = np.stack([o.attributes.continuous() for o in observations])
    labels = np.array([o.attributes.label for o in observations], dtype=np.int64)
    return images, cont, labels


def split_observations(observations: Sequence[Observation], fraction: float, seed: int):
    """Partition into (kept, held_out) as a pure function of ``seed``.

    ``held_out`` gets ``round(fraction * n)`` observations chosen by a seeded
    permutation; both parts keep file order.
    """
    n = len(observations)
    n_out = int(round(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    held = np.zeros(n, dtype=bool)
    held[perm[:n_out]] = True
    kept = [o for o, h in zip(observations, held) if not h]
    out = [o for o, h in zip(observations, held) if h]
    return kept, out


# ---------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class AttributeNormalizer:
    bounds: dict  # attribute name -> (min, max)

    def _lo_hi(self):
        lo = np.array([self.bounds[c][0] for c in CONTINUOUS], dtype=np.float64)
        hi = np.array([self.bounds[c][1] for c in CONTINUOUS], dtype=np.float64)
        return lo, hi

    def normalize_array(self, values: np.ndarray) -> np.ndarray:
        lo, hi = self._lo_hi()
        return 2.0 * (np.asarray(values, dtype=np.float64) - lo) / (hi - lo) - 1.0

    def denormalize_array(self, values: np.ndarray) -> np.ndarray:
        lo, hi = self._lo_hi()
        return (np.asarray(values, dtype=np.float64) + 1.0) * (hi - lo) / 2.0 + lo

    def to_dict(self) -> dict:
        return {k: [float(v[0]), float(v[1])] for k, v in self.bounds.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeNormalizer":
        return cls({k: (float(v[0]), float(v[1])) for k, v in d.items()})


def fit_normalizer(train: Sequence[Observation]) -> AttributeNormalizer:
    if len(train) == 0:
        raise DegenerateRangeError("cannot fit a normalizer on an empty training split")
    cont = np.stack([o.attributes.continuous() for o in train])
    bounds = {}
    for j, name in enumerate(CONTINUOUS):
        lo, hi = float(cont[:, j].min()), float(cont[:, j].max())
        if not lo < hi:
            raise DegenerateRangeError(f"attribute {name!r} has a constant value {lo} in the training split")
        bounds[name] = (lo, hi)
    return AttributeNormalizer(bounds)


def normalize(a: AttributeVector, n: AttributeNormalizer) -> AttributeVector:
    """Affine map of each continuous attribute so min -> -1 and max -> +1 (no clamping)."""
    return AttributeVector.from_array(n.normalize_array(a.continuous()), a.label)


def denormalize(a_norm: AttributeVector, n: AttributeNormalizer) -> AttributeVector:
    return AttributeVector.from_array(n.denormalize_array(a_norm.continuous()), a_norm.label)


def normalize_observations(observations: Iterable[Observation], n: AttributeNormalizer) -> list[Observation]:
    return [Observation(o.image, normalize(o.attributes, n), o.split, o.index) for o in observations]

"""Dataset loading, synthesis, and seeded splitting.

Three sources are supported: IDX image/label file pairs (the MNIST
family's big-endian binary layout, optionally gzip-compressed),
delimited text with one example per line, and synthetic isotropic
Gaussian clusters.  Image pixels are scaled to [0, 1].
"""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import DataFormatError
from .tensor import RngStream

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Feature matrix (m, d), integer labels (m,), and the class count."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataFormatError(
                f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataFormatError(
                f"{self.features.shape[0]} examples but "
                f"{self.labels.shape[0] if self.labels.ndim == 1 else '?'} labels")
        if self.class_count < 1:
            raise DataFormatError("class count must be positive")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.class_count):
            raise DataFormatError(
                f"labels must lie in [0, {self.class_count})")

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True)
class SplitSpec:
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(
                f"validation fraction must lie in (0, 1), got {self.val_fraction}")


def _read_binary(path) -> bytes:
    p = Path(path)
    if not p.is_file():
        raise DataFormatError(f"{path}: no such file")
    raw = p.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError, zlib.error) as exc:
            raise DataFormatError(f"{path}: bad gzip payload ({exc})") from None
    return raw


def read_idx(image_path, label_path, class_count: Optional[int] = None) -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1].

    Images use magic 0x00000803 with big-endian count/rows/cols fields,
    labels use magic 0x00000801; either file may be gzip-compressed.
    Magic mismatches, truncation, and image/label count disagreement all
    raise DataFormatError with distinct messages.
    """
    img = _read_binary(image_path)
    if len(img) < 16:
        raise DataFormatError(f"{image_path}: truncated IDX image header")
    magic, count, rows, cols = struct.unpack_from(">IIII", img, 0)
    if magic != _IDX_IMAGE_MAGIC:
        raise DataFormatError(
            f"{image_path}: bad IDX image magic 0x{magic:08x}")
    need = 16 + count * rows * cols
    if len(img) != need:
        raise DataFormatError(
            f"{image_path}: expected {need} bytes for {count} images of "
            f"{rows}x{cols}, found {len(img)}")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).astype(np.float64)
    features = (pixels / 255.0).reshape(count, rows * cols)

    lab = _read_binary(label_path)
    if len(lab) < 8:
        raise DataFormatError(f"{label_path}: truncated IDX label header")
    lmagic, lcount = struct.unpack_from(">II", lab, 0)
    if lmagic != _IDX_LABEL_MAGIC:
        raise DataFormatError(
            f"{label_path}: bad IDX label magic 0x{lmagic:08x}")
    if len(lab) != 8 + lcount:
        raise DataFormatError(
            f"{label_path}: expected {8 + lcount} bytes for {lcount} labels, "
            f"found {len(lab)}")
    if lcount != count:
        raise DataFormatError(
            f"image/label counts differ: {count} images vs {lcount} labels")
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    return Dataset(features, labels, class_count)


def read_delimited(path, class_count: Optional[int] = None) -> Dataset:
    """One example per line: comma-separated features, last field the label."""
    p = Path(path)
    if not p.is_file():
        raise DataFormatError(f"{path}: no such file")
    rows, labels = [], []
    width = None
    for ln, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        fields = line.split(",")
        if width is None:
            width = len(fields)
            if width < 2:
                raise DataFormatError(
                    f"{path}:{ln}: need at least one feature and a label")
        elif len(fields) != width:
            raise DataFormatError(
                f"{path}:{ln}: expected {width} fields, found {len(fields)}")
        try:
            rows.append([float(f) for f in fields[:-1]])
            labels.append(int(fields[-1]))
        except ValueError:
            raise DataFormatError(f"{path}:{ln}: malformed number") from None
    if not rows:
        raise DataFormatError(f"{path}: no examples")
    labs = np.asarray(labels, dtype=np.int64)
    if class_count is None:
        class_count = int(labs.max()) + 1
    return Dataset(np.asarray(rows, dtype=np.float64), labs, class_count)


def synth_gaussians(class_count: int, dim: int, per_class: int, spread: float,
                    seed: int) -> Dataset:
    """Isotropic Gaussian clusters around random unit-norm centers.

    Deterministic per seed; every class draws its center and its samples
    from separate derived substreams, so changing one count never
    perturbs the other classes.
    """
    if class_count < 1 or dim < 1 or per_class < 1:
        raise ValueError("class count, dimension, and per-class count must "
                         "be positive")
    if spread < 0:
        raise ValueError("spread cannot be negative")
    rng = RngStream(seed)
    feats, labels = [], []
    for c in range(class_count):
        center = rng.derive("center", c).normals(dim)
        norm = np.linalg.norm(center)
        if norm > 0:
            center = center / norm
        pts = center + spread * rng.derive("sample", c).normals((per_class, dim))
        feats.append(pts)
        labels.append(np.full(per_class, c, dtype=np.int64))
    return Dataset(np.concatenate(feats), np.concatenate(labels), class_count)


def split(ds: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset]:
    """Seeded shuffle then partition into (train, val); disjoint, exhaustive."""
    m = ds.size
    if m < 5:
        raise ValueError(f"dataset too small to split: {m} examples")
    n_val = int(round(m * spec.val_fraction))
    n_val = min(max(n_val, 1), m - 1)
    perm = RngStream(spec.seed).derive("split").permutation(m)
    return ds.subset(perm[n_val:]), ds.subset(perm[:n_val])

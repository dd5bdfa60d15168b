"""Training-image ingestion: IDX files, image folders, deterministic minibatches.

All pixels are stored as float32 in [-1, 1] so a tanh-terminated generator
matches the data range without a rescaling layer.
"""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import FormatError, LengthMismatchError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm", ".pgm"}


@dataclass
class ImageBatch:
    """A batch of images (N, C, H, W) in [-1, 1] plus their dataset ids."""

    pixels: torch.Tensor
    ids: torch.Tensor

    def __post_init__(self):
        self.ids = torch.as_tensor(self.ids, dtype=torch.long)
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be rank 4, got shape {tuple(self.pixels.shape)}")
        if len(self.ids) != len(self.pixels):
            raise ValueError("ids and pixels disagree on batch size")

    def __len__(self):
        return len(self.pixels)


@dataclass
class DatasetHandle:
    """In-memory dataset with a deterministic shuffle.

    ``pixels`` holds every image; row ``i`` is dataset id ``i``.
    """

    source: str
    pixels: torch.Tensor
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.ndim != 4 or len(self.pixels) == 0:
            raise ValueError("dataset must hold at least one (C, H, W) image")

    @property
    def count(self) -> int:
        return len(self.pixels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def batch(self, ids: Sequence[int]) -> ImageBatch:
        ids = torch.as_tensor(np.asarray(ids, dtype=np.int64))
        return ImageBatch(self.pixels[ids], ids)

    def subset(self, count: int, seed: int = 0) -> "DatasetHandle":
        """Keep ``count`` images chosen by a seeded permutation, re-indexed 0..count-1."""
        if not 0 < count <= self.count:
            raise ValueError(f"subset size {count} outside 1..{self.count}")
        order = np.random.default_rng(seed).permutation(self.count)[:count]
        order.sort()
        meta = dict(self.meta, subset_of=self.count, subset_seed=seed)
        return DatasetHandle(self.source, self.pixels[torch.from_numpy(order)].clone(), self.seed, meta)


def _open_maybe_gz(path: Path):
    with open(path, "rb") as f:
        head = f.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, expected_magic: int) -> np.ndarray:
    path = Path(path)
    with _open_maybe_gz(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise LengthMismatchError(f"{path}: file too short for an IDX header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad IDX magic bytes {raw[:4].hex(' ')} "
            f"(expected {expected_magic.to_bytes(4, 'big').hex(' ')})"
        )
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthMismatchError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    payload = len(raw) - header
    if payload != expected:
        raise LengthMismatchError(
            f"{path}: header promises {expected} payload bytes, file holds {payload}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def bytes_to_unit_range(values: np.ndarray) -> np.ndarray:
    """Map uint8 [0, 255] linearly onto [-1, 1]."""
    return values.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def load_idx(path, seed: int = 0) -> DatasetHandle:
    """Load a 3-dim IDX image file (MNIST layout), optionally gzip-compressed."""
    images = _read_idx(path, IDX_IMAGES_MAGIC)
    pixels = torch.from_numpy(bytes_to_unit_range(images)[:, None])
    return DatasetHandle(str(path), pixels, seed, {"format": "idx"})


def load_idx_labels(path) -> np.ndarray:
    """Load a 1-dim IDX label file. Only used for embedder training."""
    return _read_idx(path, IDX_LABELS_MAGIC).astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (magic encodes ubyte + ndim)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(bytes([0, 0, 8, array.ndim]))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def _resize_and_crop(img: Image.Image, size: int) -> Image.Image:
    w, h = img.size
    scale = size / min(w, h)
    nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
    if (nw, nh) != (w, h):
        img = img.resize((nw, nh), Image.BILINEAR)
    left, top = (nw - size) // 2, (nh - size) // 2
    return img.crop((left, top, left + size, top + size))


def load_image_dir(path, size: int, seed: int = 0) -> DatasetHandle:
    """Decode every image in ``path`` (sorted by filename) to ``size`` x ``size``.

    The short side is scaled bilinearly to ``size`` and the long side is
    center-cropped. Images are grayscale if the first decodable file is,
    RGB otherwise. Undecodable files are skipped with a warning.
    """
    root = Path(path)
    if not root.is_dir():
        raise FormatError(f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FormatError(f"{root} contains no image files")

    mode = None
    arrays, names = [], []
    for p in files:
        try:
            with Image.open(p) as img:
                img.load()
                if mode is None:
                    mode = "L" if img.mode in ("L", "1", "I;16", "I") else "RGB"
                img = _resize_and_crop(img.convert(mode), size)
                arrays.append(np.asarray(img, dtype=np.uint8))
                names.append(p.name)
        except (OSError, ValueError) as exc:
            log.warning("skipping undecodable image %s: %s", p, exc)
    if not arrays:
        raise FormatError(f"no decodable images in {root}")
    stack = np.stack(arrays)
    stack = stack[:, None] if stack.ndim == 3 else stack.transpose(0, 3, 1, 2)
    pixels = torch.from_numpy(bytes_to_unit_range(stack))
    return DatasetHandle(str(root), pixels, seed, {"format": "image_dir", "files": names})


def epoch_permutation(count: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(count)


def minibatches(handle: DatasetHandle, batch: int, epoch: int) -> list[ImageBatch]:
    """Split the epoch into minibatches; order is a pure function of (seed, epoch)."""
    if batch <= 0:
        raise ValueError(f"batch size must be positive, got {batch}")
    if batch > handle.count:
        raise ValueError(f"batch size {batch} exceeds dataset size {handle.count}")
    order = epoch_permutation(handle.count, handle.seed, epoch)
    return [handle.batch(order[start:start + batch]) for start in range(0, handle.count, batch)]


def load_dataset(kind: str, path, size: int | None = None, seed: int = 0,
                 limit: int | None = None, subset_seed: int = 0) -> DatasetHandle:
    """Dispatch on ``kind`` ("idx" or "image_dir") and optionally take a subset."""
    if kind == "idx":
        handle = load_idx(path, seed)
    elif kind == "image_dir":
        if size is None:
            raise ValueError("image_dir datasets need a target size")
        handle = load_image_dir(path, size, seed)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if limit is not None and limit < handle.count:
        handle = handle.subset(limit, subset_seed)
    return handle


def find_idx_file(directory, stem: str = "train-images-idx3-ubyte") -> Path | None:
    """Locate ``stem`` or ``stem.gz`` under ``directory``."""
    for name in (stem, stem + ".gz", stem.replace("-idx3", ".idx3")):
        p = Path(directory) / name
        if p.exists():
            return p
    return None


__all__ = [
    "ImageBatch", "DatasetHandle", "load_idx", "load_idx_labels", "write_idx",
    "load_image_dir", "minibatches", "load_dataset", "epoch_permutation", "find_idx_file",
]

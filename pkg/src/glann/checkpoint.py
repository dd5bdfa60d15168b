"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"GLANNCKP"
    version      uint32    FORMAT_VERSION
    header_len   uint64
    header       header_len bytes of UTF-8 JSON:
                   {"epoch": int, "config": {...}, "meta": {...},
                    "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload      concatenated tensor blobs, C order, little-endian;
                 offsets are relative to the payload start
    checksum     32 bytes  SHA-256 of every preceding byte

Supported dtypes: float32, float64, int64, int32, uint8, bool.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import ChecksumError, CheckpointError, MissingTensorError, VersionError

MAGIC = b"GLANNCKP"
FORMAT_VERSION = 1
_DTYPES = {
    "float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "uint8": "u1", "bool": "?",
}


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    epoch: int = 0
    meta: dict = field(default_factory=dict)

    def tensor(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise MissingTensorError(f"checkpoint has no tensor named {name!r}") from None

    def torch(self, name: str) -> torch.Tensor:
        return torch.from_numpy(self.tensor(name).copy())

    def state_dict(self, prefix: str) -> dict[str, torch.Tensor]:
        """Tensors stored under ``prefix/`` as a module state dict."""
        p = prefix + "/"
        state = {k[len(p):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith(p)}
        if not state:
            raise MissingTensorError(f"checkpoint has no tensors under {prefix!r}")
        return state


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.asarray(value)


def module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": _as_numpy(v) for k, v in module.state_dict().items()}


def encode_checkpoint(tensors: Mapping[str, object], config: dict | None = None, epoch: int = 0,
                      meta: dict | None = None, version: int = FORMAT_VERSION) -> bytes:
    index, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = _as_numpy(tensors[name])
        dtype = arr.dtype.name
        if dtype not in _DTYPES:
            raise ValueError(f"tensor {name!r}: unsupported dtype {dtype}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        index.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"epoch": int(epoch), "config": config or {}, "meta": meta or {},
                         "tensors": index}, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", version, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < len(MAGIC) + 12 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a glann checkpoint (magic {raw[:8]!r})")
    version, header_len = struct.unpack_from("<IQ", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionError(version, FORMAT_VERSION)
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{source}: checksum mismatch, file is corrupt")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + header_len].decode("utf-8"))
    payload = memoryview(body)[start + header_len:]
    tensors = {}
    for entry in header["tensors"]:
        lo = entry["offset"]
        buf = payload[lo:lo + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(entry["dtype"], copy=True)
    return Checkpoint(tensors, header["config"], header["epoch"], header["meta"])


def save_checkpoint(path, tensors: Mapping[str, object], config: dict | None = None, epoch: int = 0,
                    meta: dict | None = None) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    data = encode_checkpoint(tensors, config, epoch, meta)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    return decode_checkpoint(raw, str(path))


def save_extractor(path, fx) -> Path:
    return save_checkpoint(path, module_tensors("extractor", fx), meta=fx.config())


def load_extractor(path):
    """Rebuild a feature extractor saved with ``save_extractor``."""
    from . import losses

    ckpt = load_checkpoint(path)
    meta = ckpt.meta
    kind = meta.get("extractor")
    weights = {"layer_weights": meta.get("layer_weights"), "pixel_weight": meta.get("pixel_weight", 1.0)}
    if kind == "random-conv":
        fx = losses.RandomConvExtractor(meta["in_channels"], meta["widths"], meta["seed"], **weights)
    elif kind == "identity":
        fx = losses.IdentityExtractor(**weights)
    elif kind == "vgg16":
        fx = losses.VGGExtractor(taps=meta.get("taps", losses.VGGExtractor.TAPS), **weights)
    else:
        raise CheckpointError(f"{path}: unknown extractor kind {kind!r}")
    if kind != "identity":
        fx.load_state_dict(ckpt.state_dict("extractor"))
    return fx

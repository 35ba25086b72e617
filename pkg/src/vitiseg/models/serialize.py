"""Versioned binary model container.

Byte layout (all integers little-endian):

    offset  size   field
    0       8      magic b"VITISEG\\x00"
    8       4      format version (uint32) = 1
    12      4      config length L (uint32)
    16      L      config, UTF-8 JSON with sorted keys
    16+L    4      tensor count T (uint32)
    ...            T records:
                     uint16 name length, name (UTF-8)
                     uint8  dtype code (1 = float32, 2 = float64)
                     uint8  ndim, then ndim x uint32 dims
                     raw little-endian array bytes, C order
    end-32  32     SHA-256 of every preceding byte

Tensors are the model parameters in definition order followed by the
batch-norm running statistics.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import ConfigMismatchError, ModelLoadError
from .unet import EncoderVariant, UNetConfig, UNetModel, build_unet

MAGIC = b"VITISEG\x00"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def _named_arrays(model: UNetModel) -> list[tuple[str, np.ndarray]]:
    arrays = [(name, p.data) for name, p in model.named_parameters()]
    arrays += [(name, getattr(owner.stats, attr)) for name, owner, attr in model.named_buffers()]
    return arrays


def model_to_bytes(model: UNetModel) -> bytes:
    config = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    arrays = _named_arrays(model)
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(config)), config, struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_model(model: UNetModel, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(model_to_bytes(model))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelLoadError("model file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def model_from_bytes(buf: bytes, expected: Optional[UNetConfig | EncoderVariant | str] = None) -> UNetModel:
    if len(buf) < len(MAGIC) + 32 or buf[:len(MAGIC)] != MAGIC:
        raise ModelLoadError("not a vitiseg model file (bad magic or too short)")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelLoadError("model checksum mismatch (file truncated or corrupted)")
    r = _Reader(body)
    r.take(len(MAGIC))
    version, config_len = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise ModelLoadError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    try:
        config = UNetConfig.from_dict(json.loads(r.take(config_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise ModelLoadError(f"invalid config block: {exc}") from exc
    _check_expected(config, expected)

    (count,) = r.unpack("<I")
    stored = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise ModelLoadError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        stored[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(body):
        raise ModelLoadError("trailing bytes after tensor records")

    model = build_unet(config, 0)
    expected_names = [n for n, _ in _named_arrays(model)]
    if sorted(expected_names) != sorted(stored):
        raise ModelLoadError("tensor names in file do not match the model built from its config")
    for name, p in model.named_parameters():
        if stored[name].shape != p.shape:
            raise ModelLoadError(f"shape mismatch for {name}: {stored[name].shape} vs {p.shape}")
        p.data = stored[name].copy()
        p.zero_grad()
    for name, owner, attr in model.named_buffers():
        setattr(owner.stats, attr, stored[name].copy())
    return model


def _check_expected(config: UNetConfig, expected) -> None:
    if expected is None:
        return
    if isinstance(expected, UNetConfig):
        if expected != config:
            raise ConfigMismatchError(f"model file holds {config}, expected {expected}")
        return
    variant = EncoderVariant(expected)
    if config.variant != variant:
        raise ConfigMismatchError(f"model file holds a {config.variant.value} network, expected {variant.value}")


def load_model(path, expected: Optional[UNetConfig | EncoderVariant | str] = None) -> UNetModel:
    """Load a model, verifying checksum, version and (optionally) its config."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ModelLoadError(f"{path}: {exc.strerror or exc}") from exc
    try:
        return model_from_bytes(buf, expected)
    except ModelLoadError as exc:
        raise type(exc)(f"{path}: {exc}") from exc

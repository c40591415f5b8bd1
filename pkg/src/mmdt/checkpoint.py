"""Named-tensor archive ("MMDTCKPT") used for every checkpoint and trace export.

Layout, all integers little-endian:

    magic      8 bytes  b"MMDTCKPT"
    version    u32
    count      u32
    entries    count x (name_len u32, name utf-8, dtype u8, rank u8, dims u32 * rank, payload)
    metadata   text_len u32, utf-8 "key=value" lines

dtype codes: 0 = float32, 1 = float64. Payloads are row-major.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import CorruptArchiveError

MAGIC = b"MMDTCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _as_array(value) -> np.ndarray:
    if torch.is_tensor(value):
        value = value.detach().cpu()
        if value.dtype not in (torch.float32, torch.float64):
            value = value.to(torch.float64)
        return value.numpy()
    arr = np.asarray(value)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def encode_metadata(metadata: dict) -> bytes:
    lines = []
    for key, value in metadata.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"metadata key/value not representable: {key!r}")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def decode_metadata(text: str) -> dict:
    out = OrderedDict()
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            out[key] = value
    return out


def dumps(tensors, metadata=None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = _as_array(value)
        raw_name = name.encode("utf-8")
        code = 0 if arr.dtype == np.float32 else 1
        if arr.ndim > 255:
            raise ValueError(f"{name}: rank {arr.ndim} too large")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    meta = encode_metadata(metadata or {})
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptArchiveError(f"truncated archive while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes):
    """Parse an archive; returns (OrderedDict name -> ndarray, metadata dict)."""
    r = _Reader(data)
    if r.take(8, "magic") != MAGIC:
        raise CorruptArchiveError("bad magic", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CorruptArchiveError(f"unsupported version {version}", 8)
    (count,) = r.unpack("<I", "entry count")
    tensors = OrderedDict()
    for _ in range(count):
        start = r.pos
        (name_len,) = r.unpack("<I", "name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptArchiveError("tensor name is not UTF-8", start + 4) from None
        if name in tensors:
            raise CorruptArchiveError(f"duplicate tensor name {name!r}", start)
        code, rank = r.unpack("<BB", "dtype/rank")
        if code not in _DTYPES:
            raise CorruptArchiveError(f"unknown dtype code {code}", r.pos - 2)
        dims = r.unpack(f"<{rank}I", "dims")
        dtype = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        payload = r.take(n * dtype.itemsize, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_raw = r.take(meta_len, "metadata")
    if r.pos != len(data):
        raise CorruptArchiveError("trailing bytes after metadata", r.pos)
    try:
        metadata = decode_metadata(meta_raw.decode("utf-8"))
    except UnicodeDecodeError:
        raise CorruptArchiveError("metadata is not UTF-8", r.pos - meta_len) from None
    return tensors, metadata


def save_checkpoint(params, path, metadata=None) -> None:
    Path(path).write_bytes(dumps(params, metadata))


def load_checkpoint(path):
    """Returns (OrderedDict name -> ndarray, metadata dict)."""
    return loads(Path(path).read_bytes())


def module_tensors(module: torch.nn.Module, prefix: str = "") -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((prefix + k, v) for k, v in module.state_dict().items())


def load_module(module: torch.nn.Module, tensors, prefix: str = "") -> None:
    """Copy archive entries starting with ``prefix`` into ``module`` (dtype-cast as needed)."""
    own = module.state_dict()
    state = OrderedDict()
    for key, ref in own.items():
        full = prefix + key
        if full not in tensors:
            raise KeyError(f"archive lacks {full!r}")
        state[key] = torch.as_tensor(np.asarray(tensors[full])).to(ref.dtype).reshape(ref.shape)
    module.load_state_dict(state)

"""Binary checkpoint of named tensors.

Layout (all integers little-endian)::

    b"HDCA" | u32 version=1 | u32 count | count x tensor
    [ u32 count | count x tensor ]          optional optimizer section, names "opt.*"

    tensor = u16 name_len | utf-8 name | u8 dtype (1=f32, 2=f64) | u8 rank
             | rank x u64 dim | raw little-endian elements
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"HDCA"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


def _encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def encode(tensors: Mapping[str, np.ndarray], optimizer: Mapping[str, np.ndarray] | None = None) -> bytes:
    body = MAGIC + struct.pack("<I", VERSION) + _encode_tensors(tensors)
    if optimizer:
        bad = [k for k in optimizer if not k.startswith("opt.")]
        if bad:
            raise CheckpointError(f"optimizer tensor names must start with 'opt.': {bad}")
        body += _encode_tensors(optimizer)
    return body


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.source}: truncated while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I", "tensor count")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H", "name length")
            name = self.take(nlen, "tensor name").decode("utf-8")
            code, rank = self.unpack("<BB", f"{name} dtype/rank")
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"{self.source}: {name} has unknown dtype code {code}")
            dims = self.unpack(f"<{rank}Q", f"{name} dims")
            dt = _CODE_DTYPES[code]
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = self.take(n * dt.itemsize, f"{name} data")
            out[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        return out


def decode(buf: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf, source)
    r.pos = 4
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported checkpoint version {version}")
    tensors = r.tensors()
    optimizer = r.tensors() if r.pos < len(buf) else {}
    if r.pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - r.pos} trailing bytes after optimizer section")
    return tensors, optimizer


def save(path, tensors: Mapping[str, np.ndarray], optimizer: Mapping[str, np.ndarray] | None = None) -> None:
    Path(path).write_bytes(encode(tensors, optimizer))


def load(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), str(path))

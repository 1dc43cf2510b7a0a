"""Binary weight bundles.

Layout (all integers little-endian)::

    b"RFSW"  u32 version  u8 endianness (1 = little)
    repeated until EOF:
        u32 name_length, name (UTF-8)
        u32 rank, rank x u32 dims
        u8 dtype tag (1 = float64, 2 = float32)
        payload, C order
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import WeightFormatError

MAGIC = b"RFSW"
VERSION = 1
LITTLE = 1
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4")}
TAGS = {np.dtype("float64"): 1, np.dtype("float32"): 2}


@dataclass
class WeightBundle:
    tensors: dict = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self):
        out = [MAGIC, struct.pack("<IB", self.version, LITTLE)]
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            tag = TAGS.get(arr.dtype)
            if tag is None:
                raise WeightFormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            out.append(struct.pack("<I", len(raw)))
            out.append(raw)
            out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            out.append(struct.pack("<B", tag))
            out.append(np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes())
        return b"".join(out)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def shapes(self):
        return {k: tuple(v.shape) for k, v in self.tensors.items()}


def save_weights(graph):
    return WeightBundle({k: v.copy() for k, v in graph.state().items()})


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.layer = 0
        self.name = None

    def take(self, n):
        if self.pos + n > len(self.data):
            where = f"layer {self.layer}" + (f" ({self.name})" if self.name else "")
            raise WeightFormatError(f"unexpected EOF at {where}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(data):
    """Parse bundle bytes into a WeightBundle."""
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise WeightFormatError("bad magic: not an RFSW weight bundle")
    if len(data) < 9:
        raise WeightFormatError("unexpected EOF in header")
    version, endian = struct.unpack("<IB", data[4:9])
    if version != VERSION:
        raise WeightFormatError(f"unsupported bundle version {version} (expected {VERSION})")
    if endian != LITTLE:
        raise WeightFormatError(f"unsupported endianness flag {endian}")
    r = _Reader(data)
    r.pos = 9
    tensors = {}
    while r.pos < len(data):
        r.name = None
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        r.name = name
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I") if rank else ()
        (tag,) = r.unpack("<B")
        if tag not in DTYPES:
            raise WeightFormatError(f"layer {r.layer} ({name}): unknown dtype tag {tag}")
        dtype = DTYPES[tag]
        count = int(np.prod(dims)) if dims else 1
        payload = r.take(count * dtype.itemsize)
        if name in tensors:
            raise WeightFormatError(f"duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        r.layer += 1
    return WeightBundle(tensors, version)


def read_weights(path):
    with open(path, "rb") as fh:
        return load_weights(fh.read())

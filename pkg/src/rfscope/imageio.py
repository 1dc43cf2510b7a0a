"""Dependency-free PPM/PGM and CSV field I/O."""
from __future__ import annotations

import numpy as np


def _read_header(data, count):
    """Return ``count`` whitespace-separated header tokens and the payload offset."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ValueError("truncated PNM header")
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_pnm(path):
    """Read a binary P5 (gray) or P6 (RGB) image as uint8 or uint16 (H, W[, 3])."""
    with open(path, "rb") as fh:
        data = fh.read()
    (magic, w, h, maxval), offset = _read_header(data, 4)
    if magic not in ("P5", "P6"):
        raise ValueError(f"{path}: unsupported PNM type {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad maxval {maxval}")
    channels = 3 if magic == "P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * channels * dtype.itemsize
    raster = data[offset : offset + need]
    if len(raster) != need:
        raise ValueError(f"{path}: truncated raster ({len(raster)} of {need} bytes)")
    img = np.frombuffer(raster, dtype=dtype).reshape((h, w, channels) if channels == 3 else (h, w))
    return img.astype(np.uint16 if maxval > 255 else np.uint8)


def read_ppm(path):
    img = read_pnm(path)
    if img.ndim != 3:
        raise ValueError(f"{path}: expected a P6 color image")
    return img


def write_ppm(path, img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def write_pgm16(path, field):
    """Write a non-negative field as a 16-bit P5 image scaled so its max is 65535."""
    field = np.asarray(field, dtype=np.float64)
    peak = field.max() if field.size else 0.0
    scaled = np.zeros(field.shape) if peak <= 0 else np.clip(field, 0, None) / peak * 65535
    h, w = field.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(np.rint(scaled).astype(">u2").tobytes())


def resize_nearest(img, size):
    h, w = size
    rows = (np.arange(h) * img.shape[0]) // h
    cols = (np.arange(w) * img.shape[1]) // w
    return img[rows][:, cols]


def write_field_csv(path, field):
    """Row-major CSV with round-trip (17 significant digit) precision."""
    field = np.asarray(field)
    with open(path, "w", encoding="ascii") as fh:
        for row in field:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_field_csv(path):
    rows = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not a numeric CSV row") from None
    if not rows or len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: expected a rectangular numeric field")
    return np.array(rows, dtype=np.float64)

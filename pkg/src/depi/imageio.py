"""Minimal netpbm/PFM readers and writers.

Formats are pinned by the external interface contract: RGB renders go to
binary PPM (P6), masks to 8-bit PGM (P5), heatmaps to 16-bit PGM
(big-endian sample order per the netpbm spec), depth to PFM (little-endian
float32 rows stored bottom-to-top, scale -1.0).
"""

import numpy as np

from .exceptions import ValidationError


def write_ppm(path, rgb):
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValidationError("write_ppm expects (H, W, 3) uint8")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, maxval, offset = _parse_pnm_header(data, b"P6", path)
    if maxval != 255:
        raise ValidationError(f"{path}: unsupported PPM maxval {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=offset)
    return pixels.reshape(h, w, 3).copy()


def write_pgm8(path, gray):
    gray = np.asarray(gray)
    if gray.dtype != np.uint8 or gray.ndim != 2:
        raise ValidationError("write_pgm8 expects (H, W) uint8")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())


def read_pgm8(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, maxval, offset = _parse_pnm_header(data, b"P5", path)
    if maxval != 255:
        raise ValidationError(f"{path}: expected 8-bit PGM")
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset).reshape(
        h, w
    ).copy()


def write_pgm16(path, gray):
    gray = np.asarray(gray)
    if gray.dtype != np.uint16 or gray.ndim != 2:
        raise ValidationError("write_pgm16 expects (H, W) uint16")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(gray.astype(">u2").tobytes())


def read_pgm16(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, maxval, offset = _parse_pnm_header(data, b"P5", path)
    if maxval != 65535:
        raise ValidationError(f"{path}: expected 16-bit PGM")
    arr = np.frombuffer(data, dtype=">u2", count=w * h, offset=offset)
    return arr.reshape(h, w).astype(np.uint16)


def _parse_pnm_header(data, magic, path):
    if not data.startswith(magic):
        raise ValidationError(f"{path}: bad magic, expected {magic.decode()}")
    # header tokens: magic, width, height, maxval; comments allowed
    tokens = []
    i = len(magic)
    while len(tokens) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ValidationError(f"{path}: truncated header")
        tokens.append(int(data[start:i]))
    i += 1  # single whitespace after maxval
    w, h, maxval = tokens
    return magic, w, h, maxval, i


def write_pfm(path, depth):
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise ValidationError("write_pfm expects (H, W) float data")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        fh.write(depth[::-1].astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ValidationError(f"{path}: not a grayscale PFM")
        w, h = (int(tok) for tok in fh.readline().split())
        scale = float(fh.readline())
        count = w * h
        dtype = "<f4" if scale < 0 else ">f4"
        arr = np.frombuffer(fh.read(count * 4), dtype=dtype, count=count)
    return arr.reshape(h, w)[::-1].astype(np.float64)

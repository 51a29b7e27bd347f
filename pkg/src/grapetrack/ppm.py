"""Minimal binary PPM (P6) and PGM (P5) support, 8-bit only."""
import numpy as np

from .errors import FormatError


def _tokens(data, count):
    """Read ``count`` header tokens, skipping ``#`` comments; returns (tokens, offset)."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated PNM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pnm(data):
    """Decode P6 to (h, w, 3) or P5 to (h, w) uint8 arrays."""
    if data[:2] not in (b"P6", b"P5"):
        raise FormatError("not a binary PPM/PGM file")
    (magic, w, h, maxval), offset = _tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError("non-integer PNM header field") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise FormatError("unsupported PNM dimensions or depth")
    channels = 3 if magic == b"P6" else 1
    n = w * h * channels
    raster = data[offset:offset + n]
    if len(raster) != n:
        raise FormatError(f"PNM raster truncated: {len(raster)} of {n} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def write_ppm(rgb):
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[:, :, None], 3, axis=2)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes()

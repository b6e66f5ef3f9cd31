"""Binary portable pixmap (P6, 8-bit) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Quantize floats in [0, 1] to 0..255 (values outside are clipped)."""
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode(pixels: np.ndarray) -> bytes:
    img = pixels if pixels.dtype == np.uint8 else to_uint8(pixels)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"P6 needs an H x W x 3 image, got {img.shape}")
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def _tokens(buf: bytes, count: int):
    # header tokens separated by whitespace, with '#' comments to end of line
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        out.append(buf[start:pos])
    return out, pos + 1


def decode(buf: bytes) -> np.ndarray:
    """Return the image as an H x W x 3 uint8 array."""
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    if magic != b"P6":
        raise FormatError(f"not a binary PPM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise FormatError(f"only 8-bit PPM is supported, maxval={maxval}")
    data = buf[pos:pos + w * h * 3]
    if len(data) != w * h * 3:
        raise FormatError("PPM pixel data truncated")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode(pixels))


def read_ppm(path) -> np.ndarray:
    """Read a P6 file as floats in [0, 1]."""
    return decode(Path(path).read_bytes()).astype(np.float64) / 255.0


def contact_sheet(images, cols: int, pad: int = 1) -> np.ndarray:
    """Tile equally sized H x W x 3 images into a grid with ``pad`` pixel gutters."""
    images = list(images)
    if not images:
        raise FormatError("contact sheet needs at least one image")
    h, w = images[0].shape[:2]
    rows = -(-len(images) // cols)
    sheet = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad, 3))
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        sheet[y:y + h, x:x + w] = img
    return sheet

"""Minimal binary PPM/PGM reader-writer; PNG goes through Pillow when it is installed."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from roomnet.errors import DatasetLoadError


def _read_header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # one whitespace byte separates header and raster


def read_pnm(path) -> np.ndarray:
    """Read a binary P6 (H, W, 3) or P5 (H, W) 8-bit image."""
    path = Path(path)
    buf = path.read_bytes()
    try:
        (magic, w, h, maxval), offset = _read_header_tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise DatasetLoadError(f"{path}: malformed PNM header ({exc})") from None
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise DatasetLoadError(f"{path}: only 8-bit binary P5/P6 images are supported")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raster = np.frombuffer(buf, dtype=np.uint8, count=min(need, len(buf) - offset), offset=offset)
    if raster.size != need:
        raise DatasetLoadError(f"{path}: raster truncated ({raster.size} of {need} bytes)")
    return raster.reshape(h, w, 3) if channels == 3 else raster.reshape(h, w)


def write_pnm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValueError("write_pnm expects uint8 data")
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"unsupported image shape {img.shape}")
    header = magic + f"\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def read_image(path) -> np.ndarray:
    """(H, W, 3) uint8 from PPM, or from PNG via Pillow."""
    path = Path(path)
    if not path.is_file():
        raise DatasetLoadError(f"image file not found: {path}")
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError:  # pragma: no cover - Pillow is optional
            raise DatasetLoadError(f"{path}: reading PNG requires Pillow") from None
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    img = read_pnm(path)
    return np.repeat(img[:, :, None], 3, axis=2) if img.ndim == 2 else img


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image
        Image.fromarray(np.asarray(image)).save(path)
    else:
        write_pnm(path, image)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    return np.round(np.clip(np.moveaxis(image, 0, -1), 0.0, 1.0) * 255).astype(np.uint8)


def from_uint8(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float64 in [0, 1]."""
    return np.moveaxis(np.asarray(image, dtype=np.float64) / 255.0, -1, 0)

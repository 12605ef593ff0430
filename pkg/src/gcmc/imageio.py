"""Image files <-> float arrays [3, H, W] in [0, 1] (Pillow does the parsing)."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".ppm", ".png", ".pnm", ".bmp", ".jpg", ".jpeg")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return np.ascontiguousarray(arr.transpose(2, 0, 1) / 255.0)


def to_uint8(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected [3,H,W], got {x.shape}")
    return np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_image(path, x: np.ndarray) -> None:
    """Save as 8-bit RGB; the format follows the suffix (PPM if unknown)."""
    import io
    path = Path(path)
    fmt = {".png": "PNG", ".bmp": "BMP"}.get(path.suffix.lower(), "PPM")
    buf = io.BytesIO()
    Image.fromarray(to_uint8(x), "RGB").save(buf, format=fmt)
    atomic_write_bytes(path, buf.getvalue())


def list_images(directory) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)

"""Procedural desk-scale image corpus and random-crop batching."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .imageio import list_images, load_image, save_image


def synthetic_image(rng: np.random.Generator, height: int = 64, width: int = 64) -> np.ndarray:
    """Smooth gradient background, a few flat shapes and mild texture, in [0, 1]."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    img = np.empty((3, height, width))
    for c in range(3):
        a, b, off = rng.uniform(-0.6, 0.6, size=3)
        img[c] = 0.5 + a * (xx - 0.5) + b * (yy - 0.5) + 0.2 * off
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, size=3)
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.08, 0.3)
        if rng.random() < 0.5:
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        else:
            inside = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.4, 1.5))
        img[:, inside] = color[:, None]
    freq = rng.uniform(4, 16)
    img += 0.04 * np.sin(2 * np.pi * freq * (xx + rng.uniform() * yy))[None]
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_dataset(directory, count: int, size: int = 64, seed: int = 0) -> list:
    """Write ``count`` synthetic PPM images; returns their paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        p = d / f"img{i:04d}.ppm"
        save_image(p, synthetic_image(rng, size, size))
        paths.append(p)
    return paths


def load_dataset(directory) -> list:
    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no images found in {directory}")
    return [load_image(p) for p in paths]


def random_crops(images: list, batch: int, crop: int, rng: np.random.Generator) -> np.ndarray:
    """[batch, 3, crop, crop]; images smaller than the crop are reflect-padded first."""
    out = np.empty((batch, 3, crop, crop))
    for i in range(batch):
        img = images[int(rng.integers(len(images)))]
        _, h, w = img.shape
        if h < crop or w < crop:
            img = np.pad(img, ((0, 0), (0, max(0, crop - h)), (0, max(0, crop - w))), mode="symmetric")
            _, h, w = img.shape
        top = int(rng.integers(h - crop + 1))
        left = int(rng.integers(w - crop + 1))
        out[i] = img[:, top:top + crop, left:left + crop]
    return out

"""Lossless 8-bit PNG raster I/O used across the pipeline."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["read_gray_png", "write_gray_png", "read_rgb_png", "write_rgb_png"]


def write_gray_png(path, array: np.ndarray) -> None:
    a = np.asarray(array, dtype=np.uint8)
    if a.ndim != 2:
        raise ValueError(f"grayscale PNG needs a 2-D array, got shape {a.shape}")
    Image.fromarray(a, mode="L").save(Path(path))


def read_gray_png(path) -> np.ndarray:
    with Image.open(Path(path)) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def write_rgb_png(path, array: np.ndarray) -> None:
    a = np.asarray(array, dtype=np.uint8)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"RGB PNG needs an HxWx3 array, got shape {a.shape}")
    Image.fromarray(a, mode="RGB").save(Path(path))


def read_rgb_png(path) -> np.ndarray:
    with Image.open(Path(path)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)

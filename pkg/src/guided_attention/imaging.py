"""Grayscale PGM input/output and heatmap conversion via Pillow."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map ``[0, 1]`` floats to 8-bit gray levels (values are clipped)."""

    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, image: np.ndarray) -> Path:
    """Write a ``[H×W]`` float image in ``[0, 1]`` as binary PGM (P5)."""

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PPM")
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    """Load an 8-bit grayscale image normalised to ``[0, 1]`` as float64.

    Raises
    ------
    DataError
        If the file is missing or is not a readable image.
    """

    path = Path(path)
    if not path.is_file():
        raise DataError(f"Image file '{path}' does not exist.")
    try:
        with Image.open(path) as handle:
            pixels = np.asarray(handle.convert("L"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"Cannot read image '{path}': {exc}") from exc
    return pixels / 255.0


def heatmap(values: np.ndarray) -> np.ndarray:
    """Min-max scale a map to ``[0, 1]``; a constant map becomes all zeros."""

    values = np.asarray(values, dtype=np.float64)
    low, high = float(values.min()), float(values.max())
    if high - low <= 0.0:
        return np.zeros_like(values)
    return (values - low) / (high - low)

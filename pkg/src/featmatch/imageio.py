"""PNG / binary-PPM image loading and saving.

Images are exchanged with the rest of the package as float32 (H, W, 3)
arrays with values in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import GeometryError, InputError


def load_image(path) -> np.ndarray:
    """Load an 8-bit RGB image and normalize values to [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float32)
    except FileNotFoundError:
        raise InputError(f"image not found: {path}")
    except UnidentifiedImageError:
        raise InputError(f"not a readable image file: {path}")
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    """Write a [0, 1] float image as 8-bit PNG or PPM (by extension)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise GeometryError(f"expected an (H, W, 3) image, got {image.shape}")
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    suffix = Path(path).suffix.lower()
    if suffix not in (".png", ".ppm"):
        raise InputError(f"unsupported image extension {suffix!r} (use .png or .ppm)")
    Image.fromarray(data, mode="RGB").save(path)


def center_crop_multiple(image: np.ndarray, multiple: int) -> np.ndarray:
    """Center-crop so both spatial dims are multiples of ``multiple``."""
    h, w = image.shape[:2]
    th, tw = (h // multiple) * multiple, (w // multiple) * multiple
    if th == 0 or tw == 0:
        raise GeometryError(f"image {image.shape[:2]} smaller than crop multiple {multiple}")
    r0 = (h - th) // 2
    c0 = (w - tw) // 2
    return image[r0 : r0 + th, c0 : c0 + tw]

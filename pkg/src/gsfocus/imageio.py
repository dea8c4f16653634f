"""8-bit PNG / binary PPM image I/O mapped linearly to [0, 1] floats."""

import os

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .errors import FormatError

SUPPORTED_EXTENSIONS = {".png": "PNG", ".ppm": "PPM"}


def load_image(path) -> np.ndarray:
    if not os.path.exists(path):
        raise FormatError("image not found", path)
    if os.path.getsize(path) == 0:
        raise FormatError("empty image file", path)
    try:
        with PILImage.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise FormatError(f"unsupported image format {im.format}", path)
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"unreadable image: {exc}", path) from None
    return arr / 255.0


def save_image(image, path) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in SUPPORTED_EXTENSIONS:
        raise FormatError(f"unsupported image extension {ext!r}", path)
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise FormatError(f"expected (H, W, 3) image, got {arr.shape}", path)
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    PILImage.fromarray(q, "RGB").save(path, format=SUPPORTED_EXTENSIONS[ext])

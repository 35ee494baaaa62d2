"""PNG round-tripping for images in [0, 1] with channel-first layout."""

from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    """Save a (C, H, W) float image in [0, 1]; C must be 1 or 3."""
    c = image.shape[0]
    if c == 1:
        Image.fromarray(to_uint8(image[0]), mode="L").save(path)
    elif c == 3:
        Image.fromarray(to_uint8(image).transpose(1, 2, 0), mode="RGB").save(path)
    else:
        raise ValueError(f"can only write 1- or 3-channel PNGs, got {c} channels")


def load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((mask > 0.5).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.float64)


def montage(images, pad: int = 1) -> np.ndarray:
    """Horizontal (C, H, W) strip with a light separator column."""
    c, h, _ = images[0].shape
    sep = np.full((c, h, pad), 0.9)
    cells: list[np.ndarray] = []
    for img in images:
        if cells:
            cells.append(sep)
        cells.append(img)
    return np.concatenate(cells, axis=2)

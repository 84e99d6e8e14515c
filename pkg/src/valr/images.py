"""Square RGB images and patch extraction."""

from __future__ import annotations

import base64
from dataclasses import dataclass

import numpy as np

from .errors import InvariantError, PatchGridError


@dataclass
class Image:
    """Channel-last RGB image with values in [0, 1].

    ``sample_id`` is only needed for looking features up in a feature store.
    """

    pixels: np.ndarray
    image_id: int = 0
    sample_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InvariantError(f"image must be HxWx3, got {self.pixels.shape}")
        if self.pixels.shape[0] != self.pixels.shape[1]:
            raise InvariantError(f"image must be square, got {self.pixels.shape[:2]}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise InvariantError("pixel values must lie in [0, 1]")

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    width = height = side


def grid_side(side: int, patch: int) -> int:
    if patch <= 0 or side % patch:
        raise PatchGridError(f"image side {side} is not divisible by patch size {patch}")
    return side // patch


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """Split ``[S, S, C]`` into ``[g*g, patch, patch, C]`` in row-major grid order."""
    g = grid_side(pixels.shape[0], patch)
    c = pixels.shape[2]
    x = pixels.reshape(g, patch, g, patch, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(g * g, patch, patch, c)


def image_patches(img: Image, patch: int) -> np.ndarray:
    """Flattened patch vectors ``[S, patch*patch*3]``."""
    p = patchify(img.pixels, patch)
    return p.reshape(p.shape[0], -1)


def upscale_nearest(pixels: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(pixels, factor, axis=0), factor, axis=1)


def pixels_to_b64(pixels: np.ndarray) -> str:
    """Encode as 8-bit levels; pixels are expected to be multiples of 1/255."""
    q = np.rint(np.asarray(pixels) * 255.0).astype(np.uint8)
    return base64.b64encode(q.tobytes()).decode("ascii")


def pixels_from_b64(data: str, side: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(data), dtype=np.uint8)
    if raw.size != side * side * 3:
        raise InvariantError(f"pixel payload has {raw.size} bytes, expected {side * side * 3}")
    return raw.reshape(side, side, 3).astype(np.float64) / 255.0

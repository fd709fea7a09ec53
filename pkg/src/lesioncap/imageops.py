"""Bilinear resizing and training-time augmentation on (C, H, W) arrays."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres; identical sizes give exact identity weights
    if n_in == n_out:
        idx = np.arange(n_in)
        return idx, idx, np.zeros(n_in)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes of ``arr`` to ``out_hw``."""
    h, w = arr.shape[-2:]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return arr.copy()
    ylo, yhi, fy = _axis_weights(h, oh)
    xlo, xhi, fx = _axis_weights(w, ow)
    rows = arr[..., ylo, :] * (1 - fy)[:, None] + arr[..., yhi, :] * fy[:, None]
    return rows[..., xlo] * (1 - fx) + rows[..., xhi] * fx


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    brightness: float = 1.0
    crop: tuple[int, int, int] | None = None  # (top, left, side)

    def apply_geometry(self, arr: np.ndarray) -> np.ndarray:
        """Apply only the flip and crop, e.g. to a heatmap or mask."""
        out = arr[..., ::-1] if self.flip else arr
        if self.crop is not None:
            t, l, side = self.crop
            size = arr.shape[-2:]
            out = resize_bilinear(out[..., t:t + side, l:l + side], size)
        return np.ascontiguousarray(out)


def sample_augment(rng: np.random.Generator, size: int, flip_p: float = 0.5,
                   brightness: tuple[float, float] = (0.8, 1.2), crop_frac: float = 0.9,
                   crop_p: float = 0.5) -> AugmentParams:
    flip = bool(rng.random() < flip_p)
    scale = float(rng.uniform(*brightness))
    crop = None
    if rng.random() < crop_p:
        side = int(round(crop_frac * size))
        t = int(rng.integers(0, size - side + 1))
        l = int(rng.integers(0, size - side + 1))
        crop = (t, l, side)
    return AugmentParams(flip, scale, crop)


def augment(image: np.ndarray, rng: np.random.Generator, **kwargs) -> np.ndarray:
    """Random horizontal flip, brightness scaling (clamped to [0, 1]) and crop-and-resize."""
    params = sample_augment(rng, image.shape[-1], **kwargs)
    return apply_augment(image, params)


def apply_augment(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = params.apply_geometry(image)
    if params.brightness != 1.0:
        out = out * params.brightness
    return np.clip(out, 0.0, 1.0)

"""Grad-CAM heatmaps, CBAM channel/spatial attention and lesion-aware fusion.

Fusion modulates attention-refined features by the heatmap::

    fused = cbam(F) * (1 + alpha * M)

with ``alpha`` a learnable scalar starting at 0 and ``M`` the Grad-CAM map
resized to the feature grid.  ``M`` is a constant in the caption graph: the
classifier that produces it only learns from its own classification loss.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import DiffArray, ShapeError
from .diffcore.nn import Module, frozen, parameter
from .imageops import resize_bilinear


class GradCamError(RuntimeError):
    pass


class Classifier(Protocol):
    def forward_classify(self, images) -> tuple[DiffArray, DiffArray]: ...

    def classify_head(self, activations: DiffArray) -> DiffArray: ...


@dataclass
class GradCamResult:
    heatmap: np.ndarray           # (H_in, W_in), values in [0, 1]
    channel_weights: np.ndarray   # (C,)
    target_class: int
    source_layer: str = "branch_a.final_conv"


def normalize_heatmap(cam: np.ndarray) -> np.ndarray:
    """Scale each map so its max is 1; an all-zero map stays all-zero."""
    peak = cam.reshape(cam.shape[0], -1).max(axis=1)
    safe = np.where(peak > 0, peak, 1.0)
    out = cam / safe[:, None, None]
    return np.clip(out, 0.0, 1.0)


def grad_cam_batch(classifier, images, target_class=None, activations: DiffArray | None = None,
                   modules: Sequence[Module] = ()):
    """Batched Grad-CAM.

    Returns ``(heatmaps (N, S, S), channel_weights (N, C), targets (N,))``.
    ``target_class`` may be ``None`` (argmax), an int, or one int per image.
    Pass ``activations`` to reuse a forward pass already computed; ``modules``
    are frozen while the head is re-run so their gradients stay untouched.
    """
    images = np.asarray(images.data if isinstance(images, DiffArray) else images)
    if images.ndim == 3:
        images = images[None]
    n = images.shape[0]
    frozen_mods = tuple(modules) or tuple(m for m in (classifier,) if isinstance(m, Module))
    with frozen(*frozen_mods):
        if activations is None:
            _, activations = classifier.forward_classify(images)
        acts = DiffArray(np.array(activations.data, copy=True), requires_grad=True)
        logits = classifier.classify_head(acts)
        if target_class is None:
            targets = logits.data.argmax(axis=1)
        else:
            targets = np.broadcast_to(np.asarray(target_class, dtype=int), (n,)).copy()
        onehot = np.zeros(logits.shape, dtype=logits.dtype)
        onehot[np.arange(n), targets] = 1.0
        dc.backward(dc.reduce_sum(dc.mul(logits, onehot)))
    grads = acts.grad if acts.grad is not None else np.zeros_like(acts.data)
    if not np.isfinite(grads).all():
        raise GradCamError("non-finite gradients in Grad-CAM")
    weights = grads.mean(axis=(2, 3))                                   # (N, C)
    cam = np.maximum((weights[:, :, None, None] * acts.data).sum(axis=1), 0.0)
    cam = resize_bilinear(cam, images.shape[-2:])
    return normalize_heatmap(np.maximum(cam, 0.0)), weights, targets


def grad_cam(classifier, image, target_class: int | None = None) -> GradCamResult:
    heat, w, t = grad_cam_batch(classifier, image, target_class)
    return GradCamResult(heat[0], w[0], int(t[0]))


# -- CBAM --------------------------------------------------------------------------

class CBAM(Module):
    """Channel gate from pooled-feature MLP, then spatial gate from a kxk conv."""

    def __init__(self, rng: np.random.Generator, channels: int, reduction: int = 8, kernel: int = 7):
        if channels % reduction:
            raise ValueError(f"reduction {reduction} must divide channels {channels}")
        if kernel % 2 == 0:
            raise ValueError("spatial kernel must be odd")
        hidden = channels // reduction
        self.mlp_in = parameter(rng.normal(0, np.sqrt(2.0 / channels), size=(channels, hidden)))
        self.mlp_out = parameter(rng.normal(0, np.sqrt(1.0 / hidden), size=(hidden, channels)))
        self.spatial = parameter(rng.normal(0, np.sqrt(1.0 / (2 * kernel * kernel)), size=(1, 2, kernel, kernel)))
        self._channels = channels
        self._kernel = kernel

    def _mlp(self, v: DiffArray) -> DiffArray:
        return dc.matmul(dc.relu(dc.matmul(v, self.mlp_in)), self.mlp_out)

    def gates(self, f: DiffArray) -> tuple[DiffArray, DiffArray, DiffArray]:
        """Return ``(channel_gate, spatial_gate, output)``."""
        if f.ndim != 4 or f.shape[1] != self._channels:
            raise ShapeError("cbam", f.shape, (self._channels,), detail="channel count mismatch")
        n, c = f.shape[:2]
        avg = dc.reshape(dc.avg_pool2d(f), (n, c))
        mx = dc.reshape(dc.max_pool2d(f), (n, c))
        ch_gate = dc.reshape(dc.sigmoid(dc.add(self._mlp(avg), self._mlp(mx))), (n, c, 1, 1))
        f1 = dc.broadcast_mul(f, ch_gate)
        pooled = dc.concat([dc.reduce_mean(f1, axis=1, keepdims=True),
                            dc.reduce_max(f1, axis=1, keepdims=True)], axis=1)
        sp_gate = dc.sigmoid(dc.conv2d(pooled, self.spatial, padding=self._kernel // 2))
        return ch_gate, sp_gate, dc.broadcast_mul(f1, sp_gate)

    def __call__(self, f: DiffArray) -> DiffArray:
        return self.gates(f)[2]


def cbam(f: DiffArray, params: CBAM) -> DiffArray:
    return params(f)


# -- fusion ----------------------------------------------------------------------------

class Fusion(Module):
    def __init__(self, learnable: bool = True):
        self.alpha = parameter(np.zeros(()))
        self.alpha.requires_grad = learnable


def resize_heatmaps(heatmaps: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    return resize_bilinear(np.asarray(heatmaps), hw)


def fuse(f: DiffArray, heatmaps, cbam_params: CBAM | None, fusion: Fusion) -> DiffArray:
    """``cbam(F) * (1 + alpha * M)``; ``cbam_params=None`` skips the CBAM block.

    ``heatmaps`` may be an (N, H, W) array, a single GradCamResult, or a list of them.
    """
    if not np.isfinite(fusion.alpha.data).all():
        raise ValueError(f"fusion alpha is not finite: {fusion.alpha.data}")
    if isinstance(heatmaps, GradCamResult):
        heatmaps = [heatmaps]
    if isinstance(heatmaps, (list, tuple)):
        heatmaps = np.stack([h.heatmap if isinstance(h, GradCamResult) else h for h in heatmaps])
    heatmaps = np.asarray(heatmaps)
    if heatmaps.ndim != 3 or heatmaps.shape[0] != f.shape[0]:
        raise ShapeError("fuse", f.shape, heatmaps.shape, detail="one heatmap per feature map expected")
    m = resize_heatmaps(heatmaps, f.shape[-2:]).astype(f.dtype)[:, None]
    g = f if cbam_params is None else cbam_params(f)
    scale = dc.add(dc.mul(fusion.alpha, DiffArray(m)), 1.0)
    return dc.broadcast_mul(g, scale)


# -- overlay export ----------------------------------------------------------------------

def _jet(v: np.ndarray) -> np.ndarray:
    r = np.clip(1.5 - np.abs(4 * v - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0, 1)
    return np.stack([r, g, b])


def overlay(image: np.ndarray, heatmap: np.ndarray, opacity: float = 0.4) -> np.ndarray:
    """Blend a (3, S, S) image with a colour-mapped heatmap."""
    return np.clip((1 - opacity) * image + opacity * _jet(heatmap), 0, 1)


def save_overlay(path: str | Path, image: np.ndarray, heatmap: np.ndarray, side_by_side: bool = True) -> None:
    """Write ``[original | overlay]`` (or just the overlay) as a PNG."""
    from .synthgen import png_bytes, to_uint8
    ov = overlay(image, heatmap)
    panel = np.concatenate([image, ov], axis=2) if side_by_side else ov
    Path(path).write_bytes(png_bytes(to_uint8(panel.transpose(1, 2, 0))))

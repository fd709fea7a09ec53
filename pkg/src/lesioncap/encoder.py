"""Dual-branch convolutional encoder.

Branch A classifies the MES grade and is the Grad-CAM source; branch B
produces the feature map that is fused and handed to the captioner.  Each
stage is conv3x3 -> relu -> maxpool2 (optionally with a residual conv), and a
final conv3x3 -> relu at the lowest resolution provides the activations.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DiffArray, ShapeError
from .diffcore.nn import Conv2d, Linear, Module

NUM_CLASSES = 4


def module_rng(seed: int, name: str) -> np.random.Generator:
    """Independent RNG stream per named component, so wiring changes never shift other inits."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    input_size: int = 64
    num_classes: int = NUM_CLASSES
    share_stem: bool = False
    residual: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.num_classes != NUM_CLASSES:
            raise ValueError("num_classes must be 4 (MES 0-3)")
        if not self.channels:
            raise ValueError("need at least one stage")
        if self.input_size % (2 ** self.stages):
            raise ValueError(f"input_size {self.input_size} not divisible by 2**{self.stages}")
        if self.feature_size < 4:
            raise ValueError(f"final spatial size {self.feature_size} < 4")

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def feature_size(self) -> int:
        return self.input_size // (2 ** self.stages)

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        return (self.channels[-1], self.feature_size, self.feature_size)


class Stage(Module):
    def __init__(self, rng, c_in, c_out, residual):
        self.conv = Conv2d(rng, c_in, c_out, 3)
        self.res_conv = Conv2d(rng, c_out, c_out, 3) if residual else None

    def __call__(self, x: DiffArray) -> DiffArray:
        y = dc.relu(self.conv(x))
        if self.res_conv is not None:
            y = dc.relu(dc.add(self.res_conv(y), y))
        return dc.max_pool2d(y, 2)


class Branch(Module):
    """Stem stages plus a final conv; optionally a GAP + linear classifier head."""

    def __init__(self, rng, config: EncoderConfig, classifier: bool, stem: list | None = None):
        if stem is None:
            c_in = 3
            stem = []
            for c in config.channels:
                stem.append(Stage(rng, c_in, c, config.residual))
                c_in = c
            self.stages = stem
        else:
            self._shared_stages = stem
        c = config.channels[-1]
        self.final_conv = Conv2d(rng, c, c, 3)
        self.head = Linear(rng, c, config.num_classes) if classifier else None

    @property
    def stem(self) -> list:
        return getattr(self, "stages", None) or self._shared_stages

    def features(self, x: DiffArray) -> DiffArray:
        for stage in self.stem:
            x = stage(x)
        return dc.relu(self.final_conv(x))

    def classify_head(self, activations: DiffArray) -> DiffArray:
        pooled = dc.avg_pool2d(activations)
        return self.head(dc.reshape(pooled, pooled.shape[:2]))


class DualBranchEncoder(Module):
    def __init__(self, config: EncoderConfig = EncoderConfig(), seed: int = 0):
        self.config = config
        self.branch_a = Branch(module_rng(seed, "encoder.branch_a"), config, classifier=True)
        stem = self.branch_a.stages if config.share_stem else None
        self.branch_b = Branch(module_rng(seed, "encoder.branch_b"), config, classifier=False, stem=stem)

    def _check(self, images) -> DiffArray:
        dtype = self.branch_a.final_conv.weight.dtype
        x = images if isinstance(images, DiffArray) else DiffArray(np.asarray(images, dtype=dtype))
        if x.ndim == 3:
            x = dc.reshape(x, (1,) + x.shape)
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ShapeError("encoder", x.shape, (3, s, s), detail="expected image(s) of shape 3xSxS")
        return x

    def forward_classify(self, images) -> tuple[DiffArray, DiffArray]:
        """MES logits (N, 4) and final-conv activations (N, C, h, w) of branch A."""
        x = self._check(images)
        acts = self.branch_a.features(x)
        return self.branch_a.classify_head(acts), acts

    def classify_head(self, activations: DiffArray) -> DiffArray:
        return self.branch_a.classify_head(activations)

    def forward_features(self, images) -> DiffArray:
        """Branch-B feature map F of shape (N, C, h, w)."""
        return self.branch_b.features(self._check(images))

    def branch_parameters(self, branch: str) -> dict[str, DiffArray]:
        prefix = f"branch_{branch}."
        return {k: v for k, v in self.named_parameters() if k.startswith(prefix)}

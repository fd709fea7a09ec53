"""scikit-learn style wrapper around the training pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .datamodel import ClinicalMetadata
from .synthgen import caption_template
from .trainer import ImageSet, TrainConfig, Trainer


def _check_images(X, size: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3 or X.shape[2] != X.shape[3]:
        raise ValueError(f"expected images of shape (n, 3, S, S), got {X.shape}")
    if size is not None and X.shape[-1] != size:
        raise ValueError(f"expected {size}x{size} images, got {X.shape[-1]}")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    return X


def _check_metadata(meta, n: int) -> list[ClinicalMetadata]:
    meta = list(meta)
    if len(meta) != n:
        raise ValueError(f"{len(meta)} metadata entries for {n} images")
    out = [m if isinstance(m, ClinicalMetadata) else ClinicalMetadata.from_dict(m) for m in meta]
    for m in out:
        m.validate()
    return out


class LesionAwareCaptioner(ClassifierMixin, BaseEstimator):
    """Predicts the MES grade and writes a caption for endoscopy images.

    ``fit(X, y)`` takes images ``(n, 3, S, S)`` in [0, 1] and one
    :class:`ClinicalMetadata` (or dict) per image; captions default to the
    synthetic template of each record.  ``predict`` returns MES grades,
    ``transform`` returns Grad-CAM heatmaps and ``generate`` captions.
    """

    def __init__(self, variant="full", lam=0.2, learning_rate=1e-3, batch_size=16, epochs=50, seed=0,
                 augment=True, channels=(8, 16, 32), d_model=64):
        self.variant = variant
        self.lam = lam
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.augment = augment
        self.channels = channels
        self.d_model = d_model

    def _config(self, size: int) -> TrainConfig:
        return TrainConfig(lam=self.lam, learning_rate=self.learning_rate, batch_size=self.batch_size,
                           epochs=self.epochs, seed=self.seed, variant=self.variant, augment=self.augment,
                           image_size=size, channels=tuple(self.channels), d_model=self.d_model)

    def fit(self, X, y, captions=None):
        X = _check_images(X)
        meta = _check_metadata(y, len(X))
        captions = [caption_template(m) for m in meta] if captions is None else list(captions)
        if len(captions) != len(X):
            raise ValueError("one caption per image required")
        data = ImageSet([f"item_{i}" for i in range(len(X))], X, meta, captions)
        self.trainer_ = Trainer(self._config(X.shape[-1]), data, progress=lambda m: None)
        self.trainer_.fit()
        self.pipeline_ = self.trainer_.pipeline
        self.history_ = self.trainer_.history
        self.classes_ = np.arange(4)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _images(self, X) -> np.ndarray:
        check_is_fitted(self, "pipeline_")
        return _check_images(X, self.pipeline_.config.image_size)

    def predict(self, X) -> np.ndarray:
        X = self._images(X)
        placeholder = [ClinicalMetadata(0)] * len(X)     # prompts do not feed the MES head
        out = self.pipeline_.predict(ImageSet([""] * len(X), X, placeholder, [""] * len(X)), with_captions=False)
        return out["mes"]

    def transform(self, X) -> np.ndarray:
        """Grad-CAM heatmaps (n, S, S) for the predicted class."""
        X = self._images(X)
        return np.concatenate([self.pipeline_.heatmaps(X[s:s + 32]) for s in range(0, len(X), 32)]) \
            if len(X) else np.zeros((0,) + X.shape[-2:])

    def generate(self, X, metadata, strategy: str = "greedy") -> list[str]:
        X = self._images(X)
        meta = _check_metadata(metadata, len(X))
        out = self.pipeline_.predict(ImageSet([""] * len(X), X, meta, [""] * len(X)), strategy=strategy)
        return [c["caption"] for c in out["captions"]]

    def score(self, X, y, sample_weight=None) -> float:
        y = [m.mes if isinstance(m, ClinicalMetadata) else (m["mes"] if isinstance(m, dict) else m) for m in y]
        return super().score(X, np.asarray(y, dtype=int), sample_weight)

"""scikit-learn wrappers around the multiplexed classifier and toy tokenizer."""

from __future__ import annotations

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .losses import LossConfig
from .models import ModelConfig, MuxBatch, build_model, forward, predict_logits
from .optim import OptimizerConfig
from .harness import fit_state
from .plexing import make_codebook, toy_discrete_patchify


def _as_images(X, channels: int | None = None) -> np.ndarray:
    """Validate image input as float32 (n, C, H, W); (n, H, W) gains a channel axis."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, H, W) or (n, C, H, W), got {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[1]}")
    return np.ascontiguousarray(X)


class MuxClassifier(ClassifierMixin, BaseEstimator):
    """Multiplexed vision-transformer classifier.

    ``fit`` trains with AdamW on cross-entropy (plus any nonzero auxiliary
    weights); ``transform`` returns the demultiplexed per-image CLS
    embeddings.
    """

    def __init__(self, variant="concatplexer", n_mux=2, concat_point=2, total_layers=6, dim=128,
                 heads=4, patch_size=4, tokenizer="tre", demux_hidden=128, slot_embeddings=True,
                 epochs=2, batch_size=64, lr=1e-3, weight_decay=0.03, schedule="constant",
                 lambda_smooth=0.0, alpha=1.0, random_state=0):
        self.variant = variant
        self.n_mux = n_mux
        self.concat_point = concat_point
        self.total_layers = total_layers
        self.dim = dim
        self.heads = heads
        self.patch_size = patch_size
        self.tokenizer = tokenizer
        self.demux_hidden = demux_hidden
        self.slot_embeddings = slot_embeddings
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.lambda_smooth = lambda_smooth
        self.alpha = alpha
        self.random_state = random_state

    def _model_config(self, images: np.ndarray, num_classes: int) -> ModelConfig:
        return ModelConfig(variant=self.variant, image_size=images.shape[-1], channels=images.shape[1],
                           patch_size=self.patch_size, dim=self.dim, heads=self.heads,
                           total_layers=self.total_layers, concat_point=self.concat_point,
                           n_mux=self.n_mux, num_classes=num_classes, demux_hidden=self.demux_hidden,
                           tokenizer=self.tokenizer, slot_embeddings=self.slot_embeddings).validate()

    def fit(self, X, y):
        X = _as_images(X)
        _, y = check_X_y(X.reshape(len(X), -1), y)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        cfg = self._model_config(X, max(len(self.classes_), 2))
        seed = int(self.random_state or 0)
        self.state_ = build_model(cfg, seed)
        ds = Dataset(X, encoded.astype(np.int64), np.arange(len(X), dtype=np.int64), cfg.num_classes)
        batch = min(self.batch_size, len(X) - len(X) % cfg.n_mux)
        if batch < cfg.n_mux:
            raise ValueError(f"need at least n_mux={cfg.n_mux} samples to fit")
        self.loss_history_ = []
        fit_state(self.state_, ds, LossConfig(alpha=self.alpha, lambda_smooth=self.lambda_smooth),
                  OptimizerConfig(lr=self.lr, weight_decay=self.weight_decay, schedule=self.schedule),
                  self.epochs, batch, seed, on_step=lambda row: self.loss_history_.append(row["total"]))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        X = _as_images(X, self.state_.config.channels)
        if X.shape[-1] != self.state_.config.image_size:
            raise ValueError(f"expected {self.state_.config.image_size}px images, got {X.shape[-1]}px")
        return X

    def decision_function(self, X) -> np.ndarray:
        X = self._check(X)
        logits = predict_logits(self.state_, X, self.batch_size)
        return logits[:, : len(self.classes_)]

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X).astype(np.float64), axis=1)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        """Per-image demultiplexed CLS embeddings, shape (n, dim)."""
        X = self._check(X)
        n = self.state_.config.n_mux
        pad = (-len(X)) % n
        if pad:
            X = np.concatenate([X, np.zeros((pad,) + X.shape[1:], X.dtype)])
        g = len(X) // n
        out = forward(self.state_, MuxBatch([X[i * g:(i + 1) * g] for i in range(n)]))
        return out.cls_embeddings.data[: len(X) - pad]


class ToyDiscretePatchifier(TransformerMixin, BaseEstimator):
    """Map each image patch to the index of its nearest code in a seeded codebook."""

    def __init__(self, codebook_size=512, patch_size=4, random_state=0):
        self.codebook_size = codebook_size
        self.patch_size = patch_size
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _as_images(X)
        if X.shape[-1] % self.patch_size:
            raise ValueError(f"image size {X.shape[-1]} is not divisible by patch_size {self.patch_size}")
        self.n_channels_ = X.shape[1]
        self.codebook_ = make_codebook(self.codebook_size, self.n_channels_ * self.patch_size ** 2,
                                       int(self.random_state or 0))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "codebook_")
        X = _as_images(X, self.n_channels_)
        return toy_discrete_patchify(X, self.codebook_, self.patch_size)

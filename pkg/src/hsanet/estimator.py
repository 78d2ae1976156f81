"""scikit-learn compatible wrapper around the HSANet training loop.

``X`` holds bitemporal pairs stacked on axis 1, shape (n, 2, C, H, W) with
values in [0, 1]; ``y`` holds binary change masks of shape (n, H, W).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import accumulate_cm, binarize, metrics_from_cm
from .model import ModelConfig, ParamStore
from .training import TrainConfig, fit_arrays, predict_proba


def check_bitemporal(X, y=None, divisor: int = 1, channels: int | None = None):
    """Validate and convert a bitemporal batch (and optional masks).

    Returns ``(t1, t2)`` float32 arrays, plus ``y`` as uint8 when given.
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5 or X.shape[1] != 2:
        raise ValueError(f"X must have shape (n, 2, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X contains no samples")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains NaN or Inf")
    if channels is not None and X.shape[2] != channels:
        raise ValueError(f"X has {X.shape[2]} channels, estimator was fitted with {channels}")
    h, w = X.shape[3:]
    if h % divisor or w % divisor:
        raise ValueError(f"spatial extents {h}x{w} must be divisible by {divisor}")
    t1 = np.ascontiguousarray(X[:, 0])
    t2 = np.ascontiguousarray(X[:, 1])
    if y is None:
        return t1, t2
    y = np.asarray(y)
    if y.shape != (X.shape[0], h, w):
        raise ValueError(f"y must have shape {(X.shape[0], h, w)}, got {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary (0/1)")
    return t1, t2, y.astype(np.uint8)


class HSANetChangeDetector(BaseEstimator):
    def __init__(
        self,
        num_scales: int = 4,
        base_channels: int = 16,
        attention_max_tokens: int = 256,
        threshold: float = 0.5,
        lr: float = 5e-4,
        weight_decay: float = 0.0025,
        batch_size: int = 8,
        epochs: int = 50,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        seed: int = 0,
    ):
        self.num_scales = num_scales
        self.base_channels = base_channels
        self.attention_max_tokens = attention_max_tokens
        self.threshold = threshold
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.seed = seed

    def _train_config(self, input_channels: int) -> TrainConfig:
        model = ModelConfig(
            num_scales=self.num_scales,
            base_channels=self.base_channels,
            attention_max_tokens=self.attention_max_tokens,
            input_channels=input_channels,
            threshold=self.threshold,
        )
        return TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size,
            epochs=self.epochs, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            seed=self.seed, model=model,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        cfg = self._train_config(np.asarray(X).shape[2] if np.ndim(X) == 5 else 3)
        t1, t2, masks = check_bitemporal(X, y, cfg.model.divisor)
        val = None
        if X_val is not None:
            val = check_bitemporal(X_val, y_val, cfg.model.divisor, t1.shape[1])
        self.params_, self.history_ = fit_arrays(cfg, t1, t2, masks, val=val)
        self.config_ = cfg.model
        self.n_features_in_ = int(np.prod(np.asarray(X).shape[1:]))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        t1, t2 = check_bitemporal(X, divisor=self.config_.divisor, channels=self.config_.input_channels)
        return predict_proba(self.params_, self.config_, t1, t2, self.batch_size)

    def predict(self, X) -> np.ndarray:
        return binarize(self.predict_proba(X), self.config_.threshold)

    def score(self, X, y) -> float:
        """F1 of the change class as a fraction in [0, 1]."""
        check_is_fitted(self, "params_")
        _, _, masks = check_bitemporal(X, y, self.config_.divisor, self.config_.input_channels)
        cm = accumulate_cm(self.predict(X), masks)
        return metrics_from_cm(cm).f1 / 100.0

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.config_)

    @classmethod
    def from_checkpoint(cls, path) -> "HSANetChangeDetector":
        params, config, _ = load_checkpoint(path)
        est = cls(
            num_scales=config.num_scales,
            base_channels=config.base_channels,
            attention_max_tokens=config.attention_max_tokens,
            threshold=config.threshold,
        )
        est.params_: ParamStore = params
        est.config_ = config
        est.history_ = []
        return est

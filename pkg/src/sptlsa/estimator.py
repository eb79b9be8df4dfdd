"""scikit-learn style classifier wrapping model construction and training."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .autograd import ShapeError
from .model import ViTConfig, build_model
from .tokenization import PRESETS, ShiftStrategy
from .training import TrainConfig, train


class _ArrayDataset:
    """Minimal dataset view over float images with fixed normalization."""

    def __init__(self, x: np.ndarray, labels: np.ndarray, mean: np.ndarray, std: np.ndarray):
        self.x = x
        self.labels = labels
        self.mean = mean
        self.std = std

    def __len__(self):
        return len(self.labels)

    def images(self, index=slice(None)):
        return (self.x[index] - self.mean) / self.std


def _as_images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ShapeError(f"expected images [n, H, W, C] or [n, H, W], got shape {X.shape}")
    return X


class ViTClassifier(ClassifierMixin, BaseEstimator):
    """Vision transformer classifier with optional shifted-patch tokens and locality attention.

    ``X`` holds images ``[n, H, W, C]`` (or ``[n, H, W]``) on any scale; per-channel
    mean/std are taken from the training images in :meth:`fit`.

    Parameters
    ----------
    use_spt, use_lsa_temperature, use_lsa_masking : bool
        Enable shifted patch tokenization, the learnable softmax temperature and
        diagonal masking.
    shift_directions : str
        One of ``"diagonal4"``, ``"cardinal4"``, ``"cardinal8"``.
    random_state : int
        Seeds initialization, subset selection and batch order.
    """

    def __init__(self, depth=4, hidden_dim=64, heads=4, mlp_ratio=2.0, patch_size=8,
                 use_spt=False, use_lsa_temperature=False, use_lsa_masking=False, use_class_token=True,
                 shift_directions="diagonal4", shift_ratio=0.5, temperature_multiplier=1.0,
                 epochs=15, batch_size=128, learning_rate=1e-3, warmup_epochs=2, weight_decay=0.05,
                 label_smoothing=0.1, random_state=0):
        self.depth = depth
        self.hidden_dim = hidden_dim
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.patch_size = patch_size
        self.use_spt = use_spt
        self.use_lsa_temperature = use_lsa_temperature
        self.use_lsa_masking = use_lsa_masking
        self.use_class_token = use_class_token
        self.shift_directions = shift_directions
        self.shift_ratio = shift_ratio
        self.temperature_multiplier = temperature_multiplier
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_epochs = warmup_epochs
        self.weight_decay = weight_decay
        self.label_smoothing = label_smoothing
        self.random_state = random_state

    def _model_config(self, shape, n_classes) -> ViTConfig:
        if self.shift_directions not in PRESETS:
            raise ValueError(f"unknown shift_directions {self.shift_directions!r}")
        config = ViTConfig(depth=self.depth, hidden_dim=self.hidden_dim, heads=self.heads,
                           mlp_ratio=self.mlp_ratio, patch_size=self.patch_size,
                           image_height=shape[0], image_width=shape[1], channels=shape[2],
                           num_classes=n_classes, use_spt=self.use_spt,
                           use_lsa_temperature=self.use_lsa_temperature,
                           use_lsa_masking=self.use_lsa_masking, use_class_token=self.use_class_token,
                           shift=ShiftStrategy(PRESETS[self.shift_directions], self.shift_ratio),
                           temperature_multiplier=self.temperature_multiplier)
        config.validate()
        return config

    def _train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, base_lr=self.learning_rate,
                           warmup_epochs=self.warmup_epochs, weight_decay=self.weight_decay,
                           label_smoothing=self.label_smoothing, seed=int(self.random_state))

    def fit(self, X, y):
        X = _as_images(X)
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        self.classes_ = unique_labels(y)
        encoded = np.searchsorted(self.classes_, y)
        flat = X.reshape(-1, X.shape[-1])
        self.mean_ = flat.mean(axis=0)
        std = flat.std(axis=0)
        self.std_ = np.where(std > 0, std, 1.0)
        self.image_shape_ = X.shape[1:]
        config = self._model_config(self.image_shape_, len(self.classes_))
        model = build_model(config, int(self.random_state))
        result = train(model, _ArrayDataset(X, encoded, self.mean_, self.std_), self._train_config())
        self.model_ = result.model
        self.loss_curve_ = list(result.step_losses)
        return self

    def _normalized(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _as_images(X)
        if X.shape[1:] != self.image_shape_:
            raise ShapeError(f"expected images of shape {self.image_shape_}, got {X.shape[1:]}")
        return (X - self.mean_) / self.std_

    def decision_function(self, X) -> np.ndarray:
        x = self._normalized(X)
        return self.model_.predict_logits(x)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X) -> np.ndarray:
        """Pre-head features (class token or token mean)."""
        x = self._normalized(X)
        return np.concatenate([self.model_.features(x[i:i + 256]).data for i in range(0, len(x), 256)])

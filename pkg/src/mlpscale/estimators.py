"""scikit-learn compatible front ends for the MLP and the power-law fit."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from . import train as _train
from ._validation import check_compute, check_images
from .data import AugmentConfig, Dataset, channel_stats, denormalize, normalize
from .model import ModelConfig, features, init_model
from .scaling import fit_power_law
from .tensor import make_rng


class MLPClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier built from standard or inverted-bottleneck MLP blocks.

    ``X`` holds uint8-valued images (N x h x w x c, N x h x w, or flat rows
    plus ``image_shape``). Training uses the LION optimizer with label
    smoothing and optional flips, crops and MixUp. After fitting,
    :meth:`transform` returns the final-block features, so the estimator can
    feed a linear probe inside a :class:`~sklearn.pipeline.Pipeline`.
    """

    def __init__(self, depth=2, width=64, expansion=4, block_kind="inverted_bottleneck", activation="relu",
                 dropout=0.0, image_shape=None, epochs=10, batch_size=256, lr=5e-5, weight_decay=0.0,
                 label_smoothing=0.3, mixup=0.0, flip=False, crop_padding=0, clip_norm=None,
                 random_state=0, dtype="float32"):
        self.depth = depth
        self.width = width
        self.expansion = expansion
        self.block_kind = block_kind
        self.activation = activation
        self.dropout = dropout
        self.image_shape = image_shape
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.label_smoothing = label_smoothing
        self.mixup = mixup
        self.flip = flip
        self.crop_padding = crop_padding
        self.clip_norm = clip_norm
        self.random_state = random_state
        self.dtype = dtype

    def _train_config(self) -> _train.TrainConfig:
        aug = AugmentConfig(flip=self.flip, crop_padding=self.crop_padding, mixup=self.mixup,
                            label_smoothing=self.label_smoothing)
        return _train.TrainConfig(mode="scratch", epochs=self.epochs, batch_size=self.batch_size,
                                  optimizer="lion", lr=self.lr, weight_decay=self.weight_decay,
                                  clip_norm=self.clip_norm, augment=aug, seed=self.random_state)

    def fit(self, X, y):
        X = check_images(X, self.image_shape)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y must have one label per image, got shape {y.shape}")
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        codes = self._encoder.transform(y)
        cfg = ModelConfig(depth=self.depth, width=self.width, expansion=self.expansion,
                          image_shape=X.shape[1:], num_classes=len(self.classes_),
                          block_kind=self.block_kind, activation=self.activation, dropout=self.dropout)
        ds = Dataset(X, codes, len(self.classes_))
        self.model_ = init_model(cfg, make_rng(self.random_state), np.dtype(self.dtype))
        _train.set_norm_stats(self.model_, ds)
        self.history_, _ = _train.train(self.model_, ds, self._train_config())
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.image_shape)
        return _train.predict_logits(self.model_, X)

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.image_shape)
        return np.concatenate([features(self.model_, _train.model_inputs(self.model_, X[i:i + 1024]))
                               for i in range(0, len(X), 1024)])


class ChannelNormalizer(TransformerMixin, BaseEstimator):
    """Per-channel ``(pixel / 255 - mean) / std`` with statistics from the fit data.

    Output is flattened row-major to N x (h*w*c) when ``flatten`` is set.
    """

    def __init__(self, image_shape=None, flatten=True):
        self.image_shape = image_shape
        self.flatten = flatten

    def fit(self, X, y=None):
        X = check_images(X, self.image_shape)
        self.mean_, self.std_ = channel_stats(X)
        if np.any(self.std_ <= 0):
            raise ValueError("a channel has zero variance; cannot normalise")
        self.image_shape_ = X.shape[1:]
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_images(X, self.image_shape_)
        out = normalize(X, self.mean_, self.std_, np.float64)
        return out.reshape(len(out), -1) if self.flatten else out

    def inverse_transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=np.float64).reshape((-1,) + tuple(self.image_shape_))
        return denormalize(X, self.mean_, self.std_)


class PowerLawRegressor(RegressorMixin, BaseEstimator):
    """``E(C) = a (b + C)^-alpha + E_inf`` fitted by multi-start bounded Levenberg-Marquardt."""

    def fit(self, X, y):
        C = check_compute(X)
        E = np.asarray(y, dtype=np.float64).ravel()
        if E.shape != C.shape:
            raise ValueError("X and y lengths differ")
        self.fit_ = fit_power_law(C, E)
        self.a_, self.b_, self.alpha_, self.e_inf_ = self.fit_.a, self.fit_.b, self.fit_.alpha, self.fit_.e_inf
        self.degenerate_ = self.fit_.degenerate
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_.predict(check_compute(X))

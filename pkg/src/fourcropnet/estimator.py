"""scikit-learn compatible wrapper around :class:`~fourcropnet.model.FourCropNet`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_consistent_length, check_is_fitted, column_or_1d

from . import tensor_core as tc
from .data import ArraySamples, AugmentConfig
from .errors import ConfigError, DimensionMismatchError
from .model import ModelConfig, build_model
from .train import TrainConfig, load_state, train


def _check_images(X, input_size: int) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[1:] != (input_size, input_size, 3):
        raise DimensionMismatchError("images", f"(n, {input_size}, {input_size}, 3)", X.shape)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinity")
    return X.astype(tc.get_dtype(), copy=False)


class FourCropNetClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier with the usual ``fit`` / ``predict`` / ``predict_proba`` surface.

    ``X`` is an array of shape (n_samples, input_size, input_size, 3) holding
    pixel values in [0, 1].  Labels may be any hashable values; they are mapped
    to class indices in sorted order and exposed as ``classes_``.

    ``fit`` holds out a per-class random ``validation_fraction`` of the training
    data to select the best epoch; set it to 0 to
    keep the last-epoch weights instead.
    """

    def __init__(self, input_size=224, head="gap", dropout=0.5, se_reduction=16,
                 epochs=110, batch_size=32, optimizer="adam", learning_rate=1e-3,
                 augment=True, validation_fraction=0.1, patience=None, random_state=0):
        self.input_size = input_size
        self.head = head
        self.dropout = dropout
        self.se_reduction = se_reduction
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.patience = patience
        self.random_state = random_state

    def _holdout(self, y_idx):
        if not self.validation_fraction:
            return np.arange(len(y_idx)), np.arange(len(y_idx))
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")
        rng = np.random.default_rng(self.random_state)
        valid = []
        for k in np.unique(y_idx):
            members = rng.permutation(np.flatnonzero(y_idx == k))
            n_valid = int(round(self.validation_fraction * len(members)))
            valid.extend(members[:n_valid] if n_valid < len(members) else [])
        valid = np.sort(np.asarray(valid, dtype=int))
        train_idx = np.setdiff1d(np.arange(len(y_idx)), valid)
        if len(valid) == 0:
            valid = train_idx
        return train_idx, valid

    def fit(self, X, y):
        X = _check_images(X, self.input_size)
        y = column_or_1d(y)
        check_consistent_length(X, y)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        cfg = ModelConfig(input_size=self.input_size, num_classes=len(self.classes_), head=self.head,
                          dropout=self.dropout, se_reduction=self.se_reduction)
        self.model_ = build_model(cfg, seed=self.random_state, class_names=[str(c) for c in self.classes_])
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, optimizer=self.optimizer,
                           learning_rate=self.learning_rate, seed=self.random_state,
                           patience=self.patience, augment=self.augment)
        tr, va = self._holdout(y_idx)
        result = train(self.model_, ArraySamples(X[tr], y_idx[tr]), ArraySamples(X[va], y_idx[va]),
                       tcfg, AugmentConfig())
        if self.validation_fraction:
            load_state(self.model_, result.best_state)
        self.curve_ = result.curve
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = _check_images(X, self.input_size)
        return self.model_.predict_proba(X, self.batch_size)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

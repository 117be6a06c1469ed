"""Estimator-style wrappers around pretraining and the probe heads.

These follow the scikit-learn conventions: constructors only record
hyperparameters, fit does the work and exposes trailing-underscore
attributes, and get_params/set_params/clone behave as usual.  The
pretrainer consumes cell view stacks and transforms them into embedding
rows; the classifier and regressor consume plain feature matrices, so they
compose with any upstream representation.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import (BaseEstimator, ClassifierMixin, RegressorMixin,
                          TransformerMixin)
from sklearn.utils.validation import check_is_fitted

from .crops import CellViews
from .distill import VIEW_NAMES, DistillConfig, fit_views
from .embed import embed_cells
from .errors import UsageError
from .heads import HeadConfig, train_classifier, train_regressor
from .vit import EncoderConfig


class MADPretrainer(BaseEstimator, TransformerMixin):
    """Joint dual-view self-distillation as a transformer estimator.

    fit expects a CellViews batch; transform returns one embedding row per
    cell, the concatenated per-view class tokens from the averaged teacher.
    """

    def __init__(self, views=VIEW_NAMES, encoder=None, cross_weight=0.5,
                 student_temp=0.1, teacher_temp=0.04, teacher_temp_start=0.02,
                 warmup_fraction=0.1, center_momentum=0.9, ema_start=0.996,
                 epochs=10, batch_size=40, steps_per_epoch=None, n_global=2,
                 n_local=4, global_scale=(0.7, 1.0), local_scale=(0.3, 0.7),
                 jitter=0.4, blur_prob=0.5, blur_sigma=(0.1, 1.0), lr=5e-4,
                 weight_decay=0.04, seed=0):
        self.views = views
        self.encoder = encoder
        self.cross_weight = cross_weight
        self.student_temp = student_temp
        self.teacher_temp = teacher_temp
        self.teacher_temp_start = teacher_temp_start
        self.warmup_fraction = warmup_fraction
        self.center_momentum = center_momentum
        self.ema_start = ema_start
        self.epochs = epochs
        self.batch_size = batch_size
        self.steps_per_epoch = steps_per_epoch
        self.n_global = n_global
        self.n_local = n_local
        self.global_scale = global_scale
        self.local_scale = local_scale
        self.jitter = jitter
        self.blur_prob = blur_prob
        self.blur_sigma = blur_sigma
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed

    def _distill_config(self) -> DistillConfig:
        return DistillConfig(
            views=tuple(self.views),
            encoder=self.encoder or EncoderConfig(),
            cross_weight=self.cross_weight,
            student_temp=self.student_temp,
            teacher_temp=self.teacher_temp,
            teacher_temp_start=self.teacher_temp_start,
            warmup_fraction=self.warmup_fraction,
            center_momentum=self.center_momentum,
            ema_start=self.ema_start,
            epochs=self.epochs,
            batch_size=self.batch_size,
            steps_per_epoch=self.steps_per_epoch,
            n_global=self.n_global,
            n_local=self.n_local,
            global_scale=tuple(self.global_scale),
            local_scale=tuple(self.local_scale),
            jitter=self.jitter,
            blur_prob=self.blur_prob,
            blur_sigma=tuple(self.blur_sigma),
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=self.seed)

    @staticmethod
    def _check_views(X) -> CellViews:
        if not isinstance(X, CellViews):
            raise UsageError(f"expected a CellViews batch, got {type(X)!r}")
        return X

    def fit(self, X, y=None, log=None):
        X = self._check_views(X)
        self.state_, self.history_ = fit_views(self._distill_config(), X,
                                               log=log)
        self.embedding_dim_ = self.state_.embedding_dim()
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        return embed_cells(self.state_, self._check_views(X)).values

    def transform_view(self, X, view: str) -> np.ndarray:
        """Embedding rows from a single view's teacher."""
        check_is_fitted(self, "state_")
        return embed_cells(self.state_, self._check_views(X),
                           view=view).values


class _HeadEstimator(BaseEstimator):
    def _head_config(self, **extra) -> HeadConfig:
        return HeadConfig(hidden=self.hidden, epochs=self.epochs,
                          batch_size=self.batch_size, lr=self.lr,
                          weight_decay=self.weight_decay,
                          val_fraction=self.val_fraction,
                          patience=self.patience,
                          smooth_l1_beta=self.smooth_l1_beta,
                          seed=self.seed, **extra)


class MADClassifier(_HeadEstimator, ClassifierMixin):
    """Softmax probe over embedding rows."""

    def __init__(self, hidden=64, epochs=100, batch_size=64, lr=1e-2,
                 weight_decay=1e-4, val_fraction=0.15, patience=10,
                 balance="none", loss="cross_entropy", smooth_l1_beta=1.0,
                 seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.val_fraction = val_fraction
        self.patience = patience
        self.balance = balance
        self.loss = loss
        self.smooth_l1_beta = smooth_l1_beta
        self.seed = seed

    def fit(self, X, y):
        config = self._head_config(balance=self.balance, loss=self.loss)
        self.head_ = train_classifier(X, y, config)
        self.classes_ = self.head_.classes
        self.history_ = self.head_.history
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        return self.head_.predict(X)

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        return self.head_.predict_proba(X)


class MADRegressor(_HeadEstimator, RegressorMixin):
    """Multi-output probe over embedding rows."""

    def __init__(self, hidden=64, epochs=100, batch_size=64, lr=1e-2,
                 weight_decay=1e-4, val_fraction=0.15, patience=10,
                 smooth_l1_beta=1.0, seed=0):
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.val_fraction = val_fraction
        self.patience = patience
        self.smooth_l1_beta = smooth_l1_beta
        self.seed = seed

    def fit(self, X, y):
        self.head_ = train_regressor(X, y, self._head_config())
        self.history_ = self.head_.history
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        return self.head_.predict(X)

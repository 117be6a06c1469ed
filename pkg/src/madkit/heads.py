"""Supervised probe heads trained on frozen embedding matrices.

The probes are small two-layer networks optimized with the same AdamW rule
as the encoders.  They only ever see embedding rows, so training a probe
cannot disturb encoder weights.  Features are standardized on the training
split; the classifier offers inverse-frequency reweighting or resampling
for skewed label distributions, and the regressor standardizes each target
column so one scale parameter suits all of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .distill import AdamW
from .errors import ConfigError, DataError, UsageError
from .rng import derive_rng
from .validation import as_f64, check_finite

BALANCE_MODES = ("none", "reweight", "resample")
CLASSIFIER_LOSSES = ("cross_entropy", "smooth_l1")


@dataclass(frozen=True)
class HeadConfig:
    hidden: int = 64
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-2
    weight_decay: float = 1e-4
    val_fraction: float = 0.15
    patience: int = 10
    balance: str = "none"
    loss: str = "cross_entropy"
    smooth_l1_beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1:
            raise ConfigError(f"hidden must be positive, got {self.hidden}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, "
                              f"got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), "
                              f"got {self.val_fraction}")
        if self.patience < 1:
            raise ConfigError(f"patience must be positive, "
                              f"got {self.patience}")
        if self.balance not in BALANCE_MODES:
            raise ConfigError(f"balance must be one of {BALANCE_MODES}, "
                              f"got {self.balance!r}")
        if self.loss not in CLASSIFIER_LOSSES:
            raise ConfigError(f"loss must be one of {CLASSIFIER_LOSSES}, "
                              f"got {self.loss!r}")
        if self.smooth_l1_beta <= 0:
            raise ConfigError("smooth_l1_beta must be positive")


@dataclass
class ProbeHead:
    """Trained probe parameters plus the standardization they expect."""
    params: dict
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    config: HeadConfig
    history: list = field(default_factory=list)

    def _features(self, x: np.ndarray) -> np.ndarray:
        x = as_f64(x, "features")
        if x.ndim != 2 or x.shape[1] != self.feature_mean.size:
            raise UsageError(
                f"expected (n, {self.feature_mean.size}) features, "
                f"got {x.shape}")
        return (x - self.feature_mean) / self.feature_scale

    def _logits(self, x_std: np.ndarray) -> np.ndarray:
        return _forward(self.params, x_std).data


@dataclass
class ClassifierHead(ProbeHead):
    classes: np.ndarray = None

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        logits = self._logits(self._features(x))
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.classes[self.predict_proba(x).argmax(axis=1)]


@dataclass
class RegressorHead(ProbeHead):
    target_mean: np.ndarray = None
    target_scale: np.ndarray = None

    def predict(self, x: np.ndarray) -> np.ndarray:
        z = self._logits(self._features(x))
        return z * self.target_scale + self.target_mean


def _init_params(d_in: int, hidden: int, d_out: int, rng) -> dict:
    return {
        "w1": nc.parameter(rng.normal(0.0, np.sqrt(2.0 / d_in),
                                      (d_in, hidden))),
        "b1": nc.parameter(np.zeros(hidden)),
        "w2": nc.parameter(rng.normal(0.0, np.sqrt(2.0 / hidden),
                                      (hidden, d_out))),
        "b2": nc.parameter(np.zeros(d_out)),
    }


def _forward(params: dict, x: np.ndarray) -> nc.Tensor:
    h = nc.gelu(nc.matmul(nc.as_tensor(x), params["w1"]) + params["b1"])
    return nc.matmul(h, params["w2"]) + params["b2"]


def _standardize_fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-8] = 1.0
    return mean, scale


def _split(n: int, val_fraction: float, rng, labels=None):
    """Index split with every label class kept in the training part."""
    n_val = int(round(val_fraction * n))
    if n_val == 0:
        return np.arange(n), np.empty(0, dtype=int)
    if labels is None:
        perm = rng.permutation(n)
        return np.sort(perm[n_val:]), np.sort(perm[:n_val])
    train, val = [], []
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        k = min(int(round(val_fraction * idx.size)), idx.size - 1)
        val.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def _check_xy(x, y, name):
    x = as_f64(x, "features")
    check_finite(x, "features")
    if x.ndim != 2:
        raise DataError(f"features must be 2-D, got shape {x.shape}")
    y = np.asarray(y)
    if y.shape[0] != x.shape[0]:
        raise DataError(f"{x.shape[0]} feature rows but {y.shape[0]} {name}")
    return x, y


def _snapshot(params: dict) -> dict:
    return {k: v.data.copy() for k, v in params.items()}


def _restore(params: dict, snap: dict) -> None:
    for k, v in params.items():
        v.data = snap[k].copy()


def _epochs_exhausted(best_epoch: int, epoch: int, patience: int) -> bool:
    return epoch - best_epoch >= patience


def train_classifier(x, y, config: HeadConfig = HeadConfig()
                     ) -> ClassifierHead:
    """Fit a softmax probe; returns the head with its per-epoch history.

    Early stopping watches the validation loss and restores the best
    parameters seen.  With val_fraction zero, training runs all epochs.
    """
    x, y = _check_xy(x, y, "labels")
    if y.ndim != 1:
        raise DataError(f"labels must be 1-D, got shape {y.shape}")
    classes, y_idx = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise DataError("need at least two label classes")
    rng = derive_rng("probe-classifier", config.seed)
    train_idx, val_idx = _split(x.shape[0], config.val_fraction, rng,
                                labels=y_idx)
    mean, scale = _standardize_fit(x[train_idx])
    xs = (x - mean) / scale
    onehot = np.eye(classes.size)[y_idx]

    counts = np.bincount(y_idx[train_idx], minlength=classes.size)
    inv_freq = train_idx.size / (classes.size * np.maximum(counts, 1))
    weights = np.ones(y_idx.size)
    sample_probs = None
    if config.balance == "reweight":
        weights = inv_freq[y_idx]
        weights = weights / weights[train_idx].mean()
    elif config.balance == "resample":
        sample_probs = inv_freq[y_idx[train_idx]]
        sample_probs = sample_probs / sample_probs.sum()

    def batch_loss(idx):
        logits = _forward(params, xs[idx])
        if config.loss == "cross_entropy":
            probs = nc.softmax(logits)
            per = nc.cross_entropy_rows(nc.as_tensor(onehot[idx]), probs)
        else:
            probs = nc.softmax(logits)
            per = nc.smooth_l1(probs, nc.as_tensor(onehot[idx]),
                               beta=config.smooth_l1_beta).sum(axis=1)
        return (per * nc.as_tensor(weights[idx])).mean()

    params = _init_params(x.shape[1], config.hidden, classes.size, rng)
    head = ClassifierHead(params=params, feature_mean=mean,
                          feature_scale=scale, config=config,
                          classes=classes)
    _fit(head, batch_loss, train_idx, val_idx, rng, config,
         val_metrics=lambda idx: _classifier_val(head, xs, y_idx, idx),
         sample_probs=sample_probs)
    return head


def _classifier_val(head, xs, y_idx, idx):
    logits = head._logits(xs[idx])
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(idx.size), y_idx[idx]].mean())
    acc = float((logits.argmax(axis=1) == y_idx[idx]).mean())
    return loss, {"val_accuracy": acc}


def train_regressor(x, y, config: HeadConfig = HeadConfig()
                    ) -> RegressorHead:
    """Fit a multi-output probe under a smooth L1 objective.

    Target columns are standardized internally, so the loss crossover
    applies at one standard deviation of each output; predictions come
    back on the original scale.  History records per-column validation
    correlation.
    """
    x, y = _check_xy(x, y, "target rows")
    y = as_f64(y, "targets")
    check_finite(y, "targets")
    if y.ndim != 2:
        raise DataError(f"targets must be 2-D, got shape {y.shape}")
    rng = derive_rng("probe-regressor", config.seed)
    train_idx, val_idx = _split(x.shape[0], config.val_fraction, rng)
    mean, scale = _standardize_fit(x[train_idx])
    xs = (x - mean) / scale
    y_mean, y_scale = _standardize_fit(y[train_idx])
    ys = (y - y_mean) / y_scale

    params = _init_params(x.shape[1], config.hidden, y.shape[1], rng)
    head = RegressorHead(params=params, feature_mean=mean,
                         feature_scale=scale, config=config,
                         target_mean=y_mean, target_scale=y_scale)

    def batch_loss(idx):
        pred = _forward(params, xs[idx])
        return nc.smooth_l1(pred, nc.as_tensor(ys[idx]),
                            beta=config.smooth_l1_beta).mean()

    def val_metrics(idx):
        pred = head._logits(xs[idx])
        d = pred - ys[idx]
        ad = np.abs(d)
        beta = config.smooth_l1_beta
        loss = float(np.where(ad < beta, 0.5 * d * d / beta,
                              ad - 0.5 * beta).mean())
        r = _pearson_columns(pred, ys[idx])
        return loss, {"val_pearson_mean": float(r.mean()),
                      "val_pearson": r.tolist()}

    _fit(head, batch_loss, train_idx, val_idx, rng, config, val_metrics)
    return head


def _pearson_columns(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Columnwise correlation; constant columns correlate at zero."""
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    denom = np.sqrt((ac * ac).sum(axis=0) * (bc * bc).sum(axis=0))
    num = (ac * bc).sum(axis=0)
    out = np.zeros(a.shape[1])
    ok = denom > 0
    out[ok] = num[ok] / denom[ok]
    return out


def _fit(head: ProbeHead, batch_loss, train_idx, val_idx, rng,
         config: HeadConfig, val_metrics, sample_probs=None) -> None:
    params = head.params
    optimizer = AdamW(params, weight_decay=config.weight_decay)
    best_loss, best_epoch, best_snap = np.inf, 0, _snapshot(params)
    n_train = train_idx.size
    steps = max(1, n_train // config.batch_size)
    for epoch in range(config.epochs):
        if sample_probs is not None:
            order = rng.choice(train_idx, size=steps * config.batch_size,
                               replace=True, p=sample_probs)
        else:
            order = train_idx[rng.permutation(n_train)]
        losses = []
        for s in range(steps):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            if idx.size == 0:
                break
            for t in params.values():
                t.grad = None
            loss = batch_loss(idx)
            nc.backward(loss)
            optimizer.step(config.lr)
            losses.append(float(loss.data))
        record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if val_idx.size:
            val_loss, extra = val_metrics(val_idx)
            record["val_loss"] = val_loss
            record.update(extra)
            if val_loss < best_loss - 1e-9:
                best_loss, best_epoch = val_loss, epoch
                best_snap = _snapshot(params)
        head.history.append(record)
        if val_idx.size and _epochs_exhausted(best_epoch, epoch,
                                              config.patience):
            break
    if val_idx.size:
        _restore(params, best_snap)

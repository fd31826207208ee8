"""Scikit-learn style estimator wrappers around the adaptation engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .augment import AugConfig, level_to_sigma
from .core import RngStream, softmax
from .data import DomainSpec, LabeledDataset, TrainConfig, train_source
from .tta import TtaConfig, TtaModel


def _fit_linear_softmax(X: np.ndarray, y: np.ndarray, lr: float,
                        max_iters: int, target_acc: float):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    k = int(y.max()) + 1
    means = np.stack([X[y == c].mean(axis=0) for c in range(k)])
    spec = DomainSpec(k, X.shape[1], means, noise_scale=1.0,
                      shift=np.zeros(X.shape[1]))
    ds = LabeledDataset(X, y, spec)
    cfg = TrainConfig(lr=lr, max_iters=max_iters, target_acc=target_acc)
    return train_source(ds, cfg), k


class SourceClassifier(BaseEstimator, ClassifierMixin):
    """Linear-softmax classifier trained by full-batch gradient descent."""

    def __init__(self, lr: float = 0.1, max_iters: int = 2000,
                 target_acc: float = 0.99):
        self.lr = lr
        self.max_iters = max_iters
        self.target_acc = target_acc

    def fit(self, X, y):
        self.params_, self.n_classes_ = _fit_linear_softmax(
            X, y, self.lr, self.max_iters, self.target_acc)
        self.classes_ = np.arange(self.n_classes_)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return softmax(self.params_.logits(np.asarray(X, dtype=float)))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)


class ContinualTTAClassifier(BaseEstimator, ClassifierMixin):
    """Classifier that keeps adapting itself on every predicted batch.

    ``fit`` trains the source model on labeled data; ``adapt`` performs one
    self-training step on an unlabeled batch and returns the predictions the
    deployed model gave before updating; ``predict`` is read-only.
    """

    def __init__(self, loss: str = "CE", aug_level: int = 5,
                 alpha: float = 0.99, predictor: str = "teacher",
                 update_scheme: str = "mean_teacher", lam: float = 0.0,
                 lr: float = 1e-3, seed: int = 0):
        self.loss = loss
        self.aug_level = aug_level
        self.alpha = alpha
        self.predictor = predictor
        self.update_scheme = update_scheme
        self.lam = lam
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        source, k = _fit_linear_softmax(X, y, lr=0.1, max_iters=2000,
                                        target_acc=0.99)
        cfg = TtaConfig(loss=self.loss,
                        aug=AugConfig(sigma=level_to_sigma(self.aug_level)),
                        alpha=self.alpha, predictor=self.predictor,
                        update_scheme=self.update_scheme, lam=self.lam,
                        lr=self.lr)
        self.model_ = TtaModel(source, cfg, RngStream(self.seed, 500))
        self.classes_ = np.arange(k)
        return self

    def adapt(self, X):
        check_is_fitted(self, "model_")
        return self.model_.adapt(np.asarray(X, dtype=float))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(np.asarray(X, dtype=float))

    def reset(self):
        check_is_fitted(self, "model_")
        self.model_.reset()
        return self

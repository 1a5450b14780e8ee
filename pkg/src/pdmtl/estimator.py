"""scikit-learn front end for the decentralized multi-task trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import topology as topo
from .datagen import Split, split_among_clients
from .nn import mlp_forward, softmax
from .trainer import DataConfig, RunConfig, Trainer, TABLE_I_ENCODER


class PersonalizedDecentralizedMTL(ClassifierMixin, BaseEstimator):
    """One client per binary target column, shared encoder, private heads.

    ``fit(X, Y)`` splits the rows of ``X`` evenly across ``Y.shape[1]``
    clients; client ``k`` only sees column ``k`` of ``Y``.  The transference
    batch is drawn from ``X_shared`` / ``Y_shared`` (defaults to ``X`` / ``Y``),
    which also serves as the per-epoch evaluation set.

    ``predict`` returns an ``(n_samples, n_tasks)`` label matrix where column
    ``k`` comes from client ``k``'s own encoder and head.  ``score`` is the
    mean per-task accuracy.
    """

    def __init__(
        self,
        epochs=40,
        lr=2e-5,
        k1=1,
        k2=2,
        h=5,
        topology_mode="dynamic",
        topology_freeze_epoch=None,
        batch_size=64,
        shared_batch_size=256,
        steps_per_epoch=None,
        eigen_threshold=1.0,
        transference_scale=1.0,
        averaging="average_V",
        encoder_dims=TABLE_I_ENCODER,
        random_state=0,
    ):
        self.epochs = epochs
        self.lr = lr
        self.k1 = k1
        self.k2 = k2
        self.h = h
        self.topology_mode = topology_mode
        self.topology_freeze_epoch = topology_freeze_epoch
        self.batch_size = batch_size
        self.shared_batch_size = shared_batch_size
        self.steps_per_epoch = steps_per_epoch
        self.eigen_threshold = eigen_threshold
        self.transference_scale = transference_scale
        self.averaging = averaging
        self.encoder_dims = encoder_dims
        self.random_state = random_state

    def _config(self, n_features, n_tasks) -> RunConfig:
        dims = list(self.encoder_dims)
        dims[0] = n_features
        return RunConfig(
            n_clients=n_tasks,
            epochs=self.epochs,
            lr=self.lr,
            k1=self.k1,
            k2=self.k2,
            h=self.h,
            topology_mode=self.topology_mode,
            topology_freeze_epoch=self.topology_freeze_epoch,
            seed=int(self.random_state),
            batch_size=self.batch_size,
            shared_batch_size=self.shared_batch_size,
            steps_per_epoch=self.steps_per_epoch,
            eigen_threshold=self.eigen_threshold,
            transference_scale=self.transference_scale,
            averaging=self.averaging,
            encoder_dims=dims,
            data=DataConfig(),
        ).validate()

    def fit(self, X, Y, X_shared=None, Y_shared=None):
        X, Y = check_X_y(X, Y, multi_output=True, dtype=np.float64, y_numeric=True)
        Y = np.asarray(Y)
        if Y.ndim == 1:
            Y = Y[:, None]
        if not np.isin(Y, (0, 1)).all():
            raise ValueError("Y must be a binary indicator matrix")
        Y = Y.astype(np.int64)
        if X_shared is None:
            X_shared, Y_shared = X, Y
        else:
            X_shared, Y_shared = check_X_y(X_shared, Y_shared, multi_output=True, dtype=np.float64)
            Y_shared = np.asarray(Y_shared, dtype=np.int64).reshape(len(X_shared), -1)
            if Y_shared.shape[1] != Y.shape[1]:
                raise ValueError("Y_shared must have the same number of columns as Y")
        self.n_features_in_ = X.shape[1]
        self.n_tasks_ = Y.shape[1]
        self.classes_ = [np.array([0, 1])] * self.n_tasks_
        config = self._config(X.shape[1], Y.shape[1])
        shared = Split(X_shared, Y_shared)
        views = split_among_clients(Split(X, Y), shared, shared, config.seed)
        trainer = Trainer(config, views, X_shared, Y_shared)
        self.metrics_ = trainer.run()
        self.clients_ = trainer.clients
        self.mixing_matrix_ = trainer.w.w.copy()
        self.clusters_ = topo.support_partition(self.mixing_matrix_)
        self.loss_curve_ = self.metrics_.loss_array("test")
        return self

    def predict_proba(self, X):
        """List of ``(n_samples, 2)`` class-probability arrays, one per task."""
        check_is_fitted(self, "clients_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        out = []
        for c in self.clients_:
            feats, _ = mlp_forward(c.encoder, X)
            logits, _ = mlp_forward(c.head, feats)
            out.append(softmax(logits))
        return out

    def predict(self, X):
        return np.stack([p.argmax(axis=1) for p in self.predict_proba(X)], axis=1)

    def score(self, X, Y, sample_weight=None):
        Y = np.asarray(Y).reshape(len(X), -1)
        hits = self.predict(X) == Y
        if sample_weight is None:
            return float(hits.mean())
        w = np.asarray(sample_weight, dtype=np.float64)
        return float((hits.mean(axis=1) * w).sum() / w.sum())

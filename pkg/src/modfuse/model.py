"""Scikit-learn style estimators wrapping the fusion network and the pose
descriptor pipeline.

These are thin adapters: the estimators keep sklearn's init/get_params
conventions and input checking, and delegate the actual work to the
functional modules. Multimodal samples travel as ordinary 2D arrays with
the modality blocks concatenated along the feature axis in path order.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .experiments import ExperimentConfig, parse_architecture, \
    train_mnist_model
from .network import ModalityBatch
from .numerics import SeededRng
from .skeleton import apply_standardizer, descriptor_sequence, \
    dynamic_pose_sequence, fit_standardizer
from .training import ModalityDataset, predict_fused

__all__ = [
    "ModalityFusionClassifier",
    "PoseDescriptorExtractor",
    "DescriptorStandardizer",
]


def _split_columns(X, dims):
    offsets = np.cumsum((0,) + tuple(dims))
    if X.shape[1] != offsets[-1]:
        raise ValueError(
            f"X has {X.shape[1]} columns, expected {offsets[-1]} "
            f"(= sum of modality widths {tuple(dims)})"
        )
    return [np.ascontiguousarray(X[:, offsets[i]:offsets[i + 1]],
                                 dtype=np.float64)
            for i in range(len(dims))]


class ModalityFusionClassifier(BaseEstimator, ClassifierMixin):
    """Multi-path fusion network with staged training.

    Parameters mirror the experiment flags: pretraining trains each path
    with its own softmax head first, shared_init places the head weights
    on the shared stack's block diagonal, moddrop_keep (when not None)
    drops whole modalities during the relaxed stage, input_keep applies
    plain input dropout. Feature columns are the concatenated modality
    blocks in path order.
    """

    def __init__(self, architecture="196x4-125x4-40-10", pretraining=True,
                 shared_init=True, input_keep=1.0, moddrop_keep=None,
                 learning_rate=0.1, lr_decay=0.95, batch_size=64,
                 l2_alpha=1e-4, pretrain_epochs=15, frozen_epochs=10,
                 relaxed_epochs=30, patience=10, val_fraction=0.1,
                 random_state=0):
        self.architecture = architecture
        self.pretraining = pretraining
        self.shared_init = shared_init
        self.input_keep = input_keep
        self.moddrop_keep = moddrop_keep
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.batch_size = batch_size
        self.l2_alpha = l2_alpha
        self.pretrain_epochs = pretrain_epochs
        self.frozen_epochs = frozen_epochs
        self.relaxed_epochs = relaxed_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        topology = parse_architecture(self.architecture)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) != topology.n_classes:
            raise ValueError(
                f"y has {len(self.classes_)} classes, architecture "
                f"declares {topology.n_classes}"
            )
        xs = _split_columns(X, topology.modality_dims)
        n = X.shape[0]
        n_val = max(int(round(n * self.val_fraction)), 1)
        if n_val >= n:
            raise ValueError("val_fraction leaves no training data")
        perm = SeededRng(self.random_state).split(7).permutation(n)
        tr, va = perm[n_val:], perm[:n_val]
        dataset = ModalityDataset(
            train=ModalityBatch([x[tr] for x in xs], y=y_idx[tr]),
            val=ModalityBatch([x[va] for x in xs], y=y_idx[va]),
        )
        config = ExperimentConfig(
            architecture=self.architecture,
            pretraining=self.pretraining,
            input_dropout=self.input_keep != 1.0,
            moddrop=self.moddrop_keep is not None,
            shared_init=self.shared_init,
            input_keep=self.input_keep if self.input_keep != 1.0 else 0.8,
            moddrop_keep=self.moddrop_keep
            if self.moddrop_keep is not None else 0.9,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            batch_size=self.batch_size,
            l2_alpha=self.l2_alpha,
            pretrain_epochs=self.pretrain_epochs,
            frozen_epochs=self.frozen_epochs,
            relaxed_epochs=self.relaxed_epochs,
            patience=self.patience,
            seed=self.random_state,
        )
        run = train_mnist_model(config, dataset, topology)
        self.topology_ = topology
        self.params_ = run.params
        self.training_log_ = run.log
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        xs = _split_columns(X, self.topology_.modality_dims)
        return predict_fused(self.params_, self.topology_, xs,
                             input_keep=self.input_keep)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]


class PoseDescriptorExtractor(BaseEstimator, TransformerMixin):
    """Frame descriptors from skeleton capture rows.

    Input rows are flattened frames (33 columns, 11 joints x 3), one
    sequence per call. output="static" yields per-frame descriptors;
    output="dynamic" yields stacked sliding windows at the given stride
    (the first 4 * stride frames have no complete window and are
    dropped, so the output is shorter than the input).
    """

    def __init__(self, output="static", stride=2, sigma=1.0, window=5,
                 mirror=True):
        self.output = output
        self.stride = stride
        self.sigma = sigma
        self.window = window
        self.mirror = mirror

    def fit(self, X, y=None):
        self.n_features_in_ = 33
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 33:
            raise ValueError(f"expected 33 columns, got {X.shape[1]}")
        positions = X.reshape(-1, 11, 3)
        if self.output == "static":
            return descriptor_sequence(positions, sigma=self.sigma,
                                       window=self.window)
        if self.output == "dynamic":
            poses, _ = dynamic_pose_sequence(
                positions, self.stride, sigma=self.sigma,
                window=self.window, mirror=self.mirror)
            return poses
        raise ValueError(f"unknown output kind {self.output!r}")


class DescriptorStandardizer(BaseEstimator, TransformerMixin):
    """Zero-mean unit-variance scaling that flags constant columns and
    leaves them untouched instead of dividing by ~0."""

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.standardizer_ = fit_standardizer(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "standardizer_")
        X = check_array(X, dtype=np.float64)
        return apply_standardizer(self.standardizer_, X)

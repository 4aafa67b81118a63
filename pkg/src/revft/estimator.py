"""scikit-learn style wrapper: a MEFT sequence classifier over integer token matrices."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from revft.model import ModelDims, SegmentPlan, assemble_model
from revft.reversible import DEFAULT_SCALING, MeftKind, ScalingConfig
from revft.tensor import make_rng, softmax_rows
from revft.train import Dataset, TrainConfig, train_loop


class MeftClassifier(ClassifierMixin, BaseEstimator):
    """Fit reversible adapters (and a head) on a freshly initialized frozen base.

    ``X`` is an ``(n_samples, seq_len)`` array of token ids; ``y`` holds
    class labels of any hashable type. With ``validation_fraction=0`` the
    training set doubles as the early-stopping set.
    """

    def __init__(self, kind="meft1", plan=(0, 2, 0), d_model=32, heads=4, r=8, sigma=0.02,
                 lam=None, beta=None, precision="double", cache_mode="reversible", lr=1e-3,
                 batch_size=16, epochs=10, warmup_ratio=0.06, weight_decay=0.1, patience=5,
                 validation_fraction=0.0, random_state=0):
        self.kind = kind
        self.plan = plan
        self.d_model = d_model
        self.heads = heads
        self.r = r
        self.sigma = sigma
        self.lam = lam
        self.beta = beta
        self.precision = precision
        self.cache_mode = cache_mode
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.warmup_ratio = warmup_ratio
        self.weight_decay = weight_decay
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _tokens(self, X, reset: bool):
        X = check_array(X, dtype=None, ensure_min_features=1)
        if not np.issubdtype(X.dtype, np.integer):
            if not np.all(np.equal(np.mod(X, 1), 0)):
                raise ValueError("X must hold integer token ids")
            X = X.astype(np.int64)
        if X.min() < 0:
            raise ValueError("token ids must be non-negative")
        if not reset:
            if X.shape[1] != self.n_features_in_:
                raise ValueError(f"X has {X.shape[1]} positions, fitted with {self.n_features_in_}")
            if X.max() >= self.vocab_:
                raise ValueError(f"token id {X.max()} outside the fitted vocabulary of {self.vocab_}")
        return X.astype(np.int64)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=None)
        X = self._tokens(X, reset=True)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        self.n_features_in_ = X.shape[1]
        self.vocab_ = max(2, int(X.max()) + 1)
        kind = MeftKind(self.kind)
        default = DEFAULT_SCALING[kind]
        scaling = ScalingConfig(default.lam if self.lam is None else self.lam,
                                default.beta if self.beta is None else self.beta)
        plan = SegmentPlan(*self.plan)
        if self.cache_mode == "reversible" and plan.n_reversible:
            scaling.check_invertible()
        dims = ModelDims(vocab=self.vocab_, max_len=X.shape[1], d_model=self.d_model,
                         heads=self.heads, n_classes=len(self.classes_))
        self.model_ = assemble_model(plan, kind, dims, r=self.r, sigma=self.sigma, scaling=scaling,
                                     rng=make_rng(self.random_state, 0), precision=self.precision)
        data = Dataset(X, y_idx.astype(np.int64))
        n_dev = int(round(self.validation_fraction * len(X)))
        if n_dev:
            order = make_rng(self.random_state, 4).permutation(len(X))
            dev = Dataset(X[order[:n_dev]], data.targets[order[:n_dev]])
            data = Dataset(X[order[n_dev:]], data.targets[order[n_dev:]])
        else:
            dev = data
        config = TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
                             warmup_ratio=self.warmup_ratio, seed=self.random_state,
                             weight_decay=self.weight_decay, patience=self.patience,
                             grad_mode=self.cache_mode)
        self.history_ = train_loop(self.model_, (data, dev), config)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = self._tokens(X, reset=False)
        logits, _ = self.model_.forward(X, "vanilla")
        return logits

    def predict_proba(self, X):
        return softmax_rows(self.decision_function(X)).astype(np.float64)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

"""scikit-learn style classifier wrapping database construction and training."""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .encoders import VisionEncoder
from .retrieval import build_database
from .training import RePromptModel, TrainConfig, predict_proba, train

_CONFIG_FIELDS = tuple(f.name for f in fields(TrainConfig))


class RePromptClassifier(ClassifierMixin, BaseEstimator):
    """Few-shot classifier with retrieval-conditioned prompts and a kNN cache.

    ``X`` is either ``n x d`` feature vectors (passthrough mode) or
    ``n x S x d`` patch tokens, in which case the frozen encoder runs on the
    patches and ``S`` overrides ``patches``.  The training set doubles as the
    retrieval database.
    """

    def __init__(
        self,
        epochs=50,
        batch_size=32,
        learning_rate=1e-3,
        adam_eps=1e-4,
        weight_decay=0.01,
        seed=0,
        gamma=1e-4,
        n=8,
        lam=0.5,
        tau=16.0,
        k_re=7,
        J=7,
        M=4,
        beta=10.0,
        logit_scale=100.0,
        use_rg_loss=True,
        use_re_prompt=True,
        use_adapter=True,
        exclude_self=False,
        keys_frozen=False,
        adapter_in_training=False,
        adapter_topk=0,
        layers=12,
        patches=16,
        heads=4,
        text_layers=12,
        encoder_seed=0,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.adam_eps = adam_eps
        self.weight_decay = weight_decay
        self.seed = seed
        self.gamma = gamma
        self.n = n
        self.lam = lam
        self.tau = tau
        self.k_re = k_re
        self.J = J
        self.M = M
        self.beta = beta
        self.logit_scale = logit_scale
        self.use_rg_loss = use_rg_loss
        self.use_re_prompt = use_re_prompt
        self.use_adapter = use_adapter
        self.exclude_self = exclude_self
        self.keys_frozen = keys_frozen
        self.adapter_in_training = adapter_in_training
        self.adapter_topk = adapter_topk
        self.layers = layers
        self.patches = patches
        self.heads = heads
        self.text_layers = text_layers
        self.encoder_seed = encoder_seed

    def _config(self, X) -> TrainConfig:
        values = {k: v for k, v in self.get_params().items() if k in _CONFIG_FIELDS}
        values["dim"] = X.shape[-1]
        if X.ndim == 3:
            values["patches"] = X.shape[1]
        values["patch_input"] = X.ndim == 3
        return TrainConfig(**values)

    def _check_X(self, X, reset: bool):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim not in (2, 3):
            raise ValueError(f"X must be n x d or n x S x d, got shape {X.shape}")
        shape = X.shape[1:]
        if reset:
            self.input_shape_ = shape
            self.n_features_in_ = int(np.prod(shape))
        elif shape != self.input_shape_:
            raise ValueError(f"X has per-sample shape {shape}, expected {self.input_shape_}")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = self._check_X(X, reset=True)
        self._encoder = LabelEncoder()
        y_idx = self._encoder.fit_transform(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        config = self._config(X)
        vision = VisionEncoder(config.vision_config())
        features = vision.encode_frozen(X)
        self.database_ = build_database(
            features, y_idx, len(self.classes_), fingerprint=vision.fingerprint
        )
        self.model_ = RePromptModel(config, self.database_)
        result = train(self.model_, self.database_, X, y_idx)
        self.metrics_ = result.metrics
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = self._check_X(X, reset=False)
        return predict_proba(self.model_, self.database_, X)

    def predict(self, X):
        check_is_fitted(self, "model_")
        # argmax picks the lowest class index on ties
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

"""scikit-learn style wrappers around the training and merge routines.

``LoraSegmenter`` fine-tunes the adapters of a toy model on one task;
``RegCLMerger`` folds fitted segmenters (or raw checkpoints with Grams)
into one merged model, one task at a time via ``partial_fit``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .harness import ModelConfig, base_model
from .merging import MergeConfig, MergeState, merge_adapters, regcl_step
from .metrics import score_probabilities
from .model import Checkpoint, ToyModel, predict_proba
from .training import LossConfig, TrainConfig, train_task


def _checked_X(X, n_features):
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, model expects {n_features}")
    return X


class LoraSegmenter(BaseEstimator):
    """Per-pixel binary segmenter trained by LoRA fine-tuning.

    ``y`` is the flattened ground-truth mask (one row per image). When
    ``init_model`` is None a seeded base model sized from ``X`` is built.
    """

    def __init__(self, init_model=None, hidden=64, rank=16, lora_scaling=1.0, epochs=20, batch_size=8,
                 lr=0.3, schedule="cosine_annealing", threshold=0.5, random_state=0):
        self.init_model = init_model
        self.hidden = hidden
        self.rank = rank
        self.lora_scaling = lora_scaling
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.schedule = schedule
        self.threshold = threshold
        self.random_state = random_state

    def _init(self, n_features):
        if self.init_model is not None:
            model = self.init_model
            if isinstance(model, Checkpoint):
                model = ToyModel.from_checkpoint(model)
            return model
        grid = int(round(np.sqrt(n_features)))
        if grid * grid != n_features:
            raise ValueError(f"cannot build a default model for {n_features} features (not a square grid)")
        return base_model(self.random_state, ModelConfig(self.hidden, self.rank, self.lora_scaling, grid))

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y have different numbers of rows")
        model = self._init(X.shape[1])
        if X.shape[1] != model.input_dim or y.shape[1] != model.output_dim:
            raise ValueError("X or y does not match the initial model dimensions")
        tc = TrainConfig(self.epochs, self.batch_size, self.lr, self.schedule, self.random_state)
        result = train_task(model, (X, y), tc, LossConfig())
        self.model_ = result.model
        self.grams_ = result.grams
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def checkpoint_(self):
        check_is_fitted(self, "model_")
        return self.model_.to_checkpoint()

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, _checked_X(X, self.n_features_in_))

    def predict(self, X):
        return (self.predict_proba(X) > self.threshold).astype(np.float64)

    def score(self, X, y):
        """Mean IoU of the thresholded masks."""
        y = check_array(y, dtype=np.float64)
        return score_probabilities(self.predict_proba(X), y, self.threshold)["miou"]


class RegCLMerger(BaseEstimator):
    """Incremental Gram-weighted merge of task models.

    ``partial_fit`` takes one fitted ``LoraSegmenter`` (or a checkpoint plus
    its layer Grams); ``fit`` restarts from an empty state and folds a list.
    """

    def __init__(self, ridge_scale=0.0, offdiag_scale=1.0, lora_strategy="composite", threshold=0.5):
        self.ridge_scale = ridge_scale
        self.offdiag_scale = offdiag_scale
        self.lora_strategy = lora_strategy
        self.threshold = threshold

    def _config(self):
        return MergeConfig(self.ridge_scale, self.offdiag_scale, self.lora_strategy)

    def partial_fit(self, model, grams=None):
        if isinstance(model, LoraSegmenter):
            check_is_fitted(model, "model_")
            ckpt, grams = model.checkpoint_, model.grams_
        else:
            ckpt = model
            if grams is None:
                raise ValueError("grams are required when passing a checkpoint")
        state = getattr(self, "state_", None) or MergeState(config=self._config())
        state = merge_adapters(state, ckpt, grams) if ckpt.adapters else regcl_step(state, ckpt, grams)
        self.state_ = state
        self.merged_ = state.merged
        self.model_ = ToyModel.from_checkpoint(state.merged)
        self.n_tasks_ = state.task_count
        return self

    def fit(self, models, grams=None):
        for attr in ("state_", "merged_", "model_", "n_tasks_"):
            self.__dict__.pop(attr, None)
        grams = [None] * len(models) if grams is None else grams
        if len(grams) != len(models):
            raise ValueError("need one gram map per model")
        if not models:
            raise ValueError("fit needs at least one model")
        for model, g in zip(models, grams):
            self.partial_fit(model, g)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, _checked_X(X, self.model_.input_dim))

    def predict(self, X):
        return (self.predict_proba(X) > self.threshold).astype(np.float64)

    def score(self, X, y):
        y = check_array(y, dtype=np.float64)
        return score_probabilities(self.predict_proba(X), y, self.threshold)["miou"]

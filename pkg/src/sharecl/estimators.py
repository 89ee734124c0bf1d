"""scikit-learn style estimators over the functional API."""
from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .adapt import RegressionData, TrainConfig, fit_baseline_lora, spawn_temporary, train_coefficients_only, train_temporary
from .merge import compress_adapters, merge
from .model import HyperParams, LoraAdapter, ShareState, as_lora, forward_delta
from .subspace import bootstrap_factors, project_known_adapters

LAYER_ID = "layer0"


class ShareCompressor(TransformerMixin, BaseEstimator):
    """Compress a collection of adapters into one shared factor set.

    ``fit`` takes a list of :class:`~sharecl.model.LoraAdapter`; ``transform``
    maps adapters to their task coefficients and ``inverse_transform`` maps
    coefficients back to (mean-restored) adapters.
    """

    def __init__(self, k=None, variance_threshold=None, p=None):
        self.k = k
        self.variance_threshold = variance_threshold
        self.p = p

    def _check_adapters(self, adapters):
        adapters = list(adapters)
        if not adapters or not all(isinstance(a, LoraAdapter) for a in adapters):
            raise TypeError("expected a non-empty list of LoraAdapter")
        return adapters

    def fit(self, adapters, y=None):
        adapters = self._check_adapters(adapters)
        self.state_, self.report_ = compress_adapters(
            adapters, k=self.k, variance_threshold=self.variance_threshold, p=self.p
        )
        self.k_ = self.state_.k
        return self

    def partial_fit(self, adapter, y=None):
        """Merge one more adapter into the fitted state (or fit on it if unfitted)."""
        if not hasattr(self, "state_"):
            return self.fit([adapter])
        k = self.k if self.k is not None else self.state_.k
        self.state_, self.report_ = merge(self.state_, adapter, k=k, variance_threshold=self.variance_threshold)
        self.k_ = self.state_.k
        return self

    def transform(self, adapters):
        check_is_fitted(self, "state_")
        return [pa.coefficients for pa in project_known_adapters(self.state_.factors, self._check_adapters(adapters))]

    def inverse_transform(self, coefficients):
        check_is_fitted(self, "state_")
        return [as_lora(self.state_.factors, c, with_mean=True) for c in coefficients]


class ShareRegressor(RegressorMixin, BaseEstimator):
    """Continual multi-output linear regression ``y = W0 x + delta_t x`` with a shared low-rank subspace.

    Every call to :meth:`partial_fit` learns one new task: temporary factors are
    trained on the task's data and then merged without touching earlier data.
    :meth:`predict` uses the coefficients of ``task`` (default: the latest).
    """

    def __init__(
        self,
        k=8,
        p=8,
        phi=4,
        lora_rank=8,
        variance_threshold=None,
        sigma=0.02,
        learning_rate=0.05,
        epochs=200,
        batch_size=128,
        random_state=0,
        w0=None,
        relax_cl=False,
    ):
        self.k = k
        self.p = p
        self.phi = phi
        self.lora_rank = lora_rank
        self.variance_threshold = variance_threshold
        self.sigma = sigma
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.w0 = w0
        self.relax_cl = relax_cl

    def _train_cfg(self, offset=0):
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=seed + offset,
            sigma=self.sigma,
        )

    def _data(self, X, Y):
        X, Y = check_X_y(X, Y, multi_output=True, y_numeric=True)
        self._ravel_output = Y.ndim == 1
        if Y.ndim == 1:
            Y = Y[:, None]
        if hasattr(self, "w0_"):
            w0 = self.w0_
        elif self.w0 is not None:
            w0 = check_array(self.w0)
        else:
            w0 = np.zeros((Y.shape[1], X.shape[1]))
        if w0.shape != (Y.shape[1], X.shape[1]):
            raise ValueError(f"w0 has shape {w0.shape}, data implies {(Y.shape[1], X.shape[1])}")
        return RegressionData(LAYER_ID, w0, X, Y)

    def fit(self, X, Y, task="task0"):
        """Start from scratch: bootstrap the subspace on this task and learn it."""
        for attr in ("state_", "w0_", "task_names_", "n_features_in_"):
            if hasattr(self, attr):
                delattr(self, attr)
        data = self._data(X, Y)
        self.w0_ = data.w0
        self.n_features_in_ = data.x.shape[1]
        hyper = HyperParams(
            k=self.k, p=self.p, phi=self.phi, variance_threshold=self.variance_threshold,
            sigma=self.sigma, lora_rank=self.lora_rank,
        )
        baseline = fit_baseline_lora(data, self.lora_rank, self._train_cfg(), task_name=f"{task}_bootstrap")
        factors = bootstrap_factors(
            baseline, k=None if self.variance_threshold else self.k, variance_threshold=self.variance_threshold
        )
        self.state_ = ShareState(factors, (), hyper, ())
        self.task_names_ = []
        self._learn(data, task)
        return self

    def partial_fit(self, X, Y, task=None):
        if not hasattr(self, "state_"):
            return self.fit(X, Y, task=task or "task0")
        data = self._data(X, Y)
        self._learn(data, task or f"task{len(self.task_names_)}")
        return self

    def _learn(self, data, task):
        state = self.state_
        t = len(self.task_names_)
        tmp = spawn_temporary(state, min(self.phi, state.k), seed=[self.random_state or 0, t], task_name=task)
        tmp = train_temporary(tmp, data, self._train_cfg(t))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            if self.variance_threshold is not None:
                state, report = merge(state, tmp, task, variance_threshold=self.variance_threshold, k_cap=self.k)
            else:
                state, report = merge(state, tmp, task, k=self.k)
        if self.relax_cl:
            # coefficient finetuning on the current task only; earlier data is not kept
            state = state.replace_task(train_coefficients_only(state, task, data, self._train_cfg(t)))
        self.state_ = state
        self.report_ = report
        self.task_names_.append(task)

    def predict(self, X, task=None):
        check_is_fitted(self, "state_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        name = task or self.task_names_[-1]
        delta = forward_delta(self.state_.factors, self.state_.task(name), LAYER_ID, X)
        out = X @ self.w0_.T + delta
        return out[:, 0] if getattr(self, "_ravel_output", False) else out

"""Temporary-factor adaptation and the gradient-descent trainer.

Every trainable model here is a factored linear delta ``h = W0 x + b a^T x``
fitted by mean squared error; gradients are written out by hand.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import ConsistencyError, TrainingFailure
from .model import LoraAdapter, ShareState, TaskCoefficients

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegressionData:
    """Samples for one layer: rows of ``x`` (``S x d``) map to rows of ``y`` (``S x n``)."""

    layer_id: str
    w0: np.ndarray
    x: np.ndarray
    y: np.ndarray
    x_val: np.ndarray | None = None
    y_val: np.ndarray | None = None

    def __post_init__(self):
        n, d = self.w0.shape
        if self.x.ndim != 2 or self.x.shape[1] != d or self.y.shape != (self.x.shape[0], n):
            raise ConsistencyError(
                f"data shapes x={self.x.shape}, y={self.y.shape} do not fit w0={self.w0.shape}",
                layer_id=self.layer_id,
            )

    @property
    def residual(self):
        return self.y - self.x @ self.w0.T

    @property
    def val_residual(self):
        if self.x_val is None:
            return None
        return self.y_val - self.x_val @ self.w0.T


def as_regression_data(task) -> RegressionData:
    if isinstance(task, RegressionData):
        return task
    if hasattr(task, "regression_data"):
        return task.regression_data()
    raise TypeError(f"cannot train on {type(task).__name__}; expected RegressionData or a task")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: int = 128
    seed: int = 0
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    sigma: float = 0.02
    max_halvings: int = 10

    def __post_init__(self):
        # zero is allowed so a run can be made a no-op
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"optimizer must be 'sgd' or 'sgd_momentum', got {self.optimizer!r}")


class TempLayer(NamedTuple):
    beta: np.ndarray
    alpha: np.ndarray
    eps_beta: np.ndarray
    eps_alpha: np.ndarray


@dataclass(frozen=True)
class TemporaryFactors:
    """Copies of the top-``phi`` principal directions plus fresh coefficients, per layer."""

    phi: int
    p: int
    layers: dict
    task_name: str | None = None
    history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        clean = {}
        for lid, ly in self.layers.items():
            ly = TempLayer(*(np.asarray(m, dtype=np.float64) for m in ly))
            if ly.beta.shape[1] != self.phi or ly.alpha.shape[1] != self.phi:
                raise ConsistencyError(f"layer {lid!r}: temporary factors need phi={self.phi} columns", layer_id=lid)
            if ly.eps_beta.shape != (self.phi, self.p) or ly.eps_alpha.shape != (self.phi, self.p):
                raise ConsistencyError(f"layer {lid!r}: coefficients must be {self.phi}x{self.p}", layer_id=lid)
            clean[lid] = ly
        object.__setattr__(self, "layers", clean)

    def param_count(self, layer_id=None):
        """Trainable scalars: ``phi (n + d + 2p)`` per layer."""
        ids = [layer_id] if layer_id is not None else list(self.layers)
        return sum(sum(m.size for m in self.layers[lid]) for lid in ids)

    def contribution(self, layer_id):
        """``(b, a)`` with ``b`` ``n x p`` and ``a`` ``d x p``; the delta is ``b @ a.T``."""
        ly = self.layers[layer_id]
        return ly.beta @ ly.eps_beta, ly.alpha @ ly.eps_alpha


def spawn_temporary(state: ShareState, phi, p=None, sigma=None, seed=None, task_name=None) -> TemporaryFactors:
    """Copy the leading ``phi`` columns of the factors and sample ``N(0, sigma^2)`` coefficients."""
    k = state.factors.k
    if not 1 <= phi <= k:
        raise ValueError(f"phi must lie in [1, k={k}], got {phi}")
    p = state.hyper.p if p is None else p
    sigma = state.hyper.sigma if sigma is None else sigma
    rng = np.random.default_rng(seed)
    layers = {}
    for lid, f in state.factors.layers.items():
        layers[lid] = TempLayer(
            f.beta[:, :phi].copy(),
            f.alpha[:, :phi].copy(),
            sigma * rng.standard_normal((phi, p)),
            sigma * rng.standard_normal((phi, p)),
        )
    return TemporaryFactors(phi, p, layers, task_name=task_name)


# -- loss and gradients -----------------------------------------------------


def bilinear_loss_and_grads(b, a, x, r):
    """Loss ``||x a b^T - r||_F^2 / S`` and its gradients with respect to ``b`` and ``a``."""
    s = x.shape[0]
    z = x @ a
    e = z @ b.T - r
    loss = float(np.sum(e * e) / s)
    gb = (2.0 / s) * (e.T @ z)
    ga = (2.0 / s) * (x.T @ (e @ b))
    return loss, gb, ga


def temporary_loss_and_grads(params, x, r):
    """Gradients for ``beta``, ``alpha``, ``eps_beta``, ``eps_alpha`` of the four-factor delta."""
    beta, alpha, eb, ea = params["beta"], params["alpha"], params["eps_beta"], params["eps_alpha"]
    loss, gb, ga = bilinear_loss_and_grads(beta @ eb, alpha @ ea, x, r)
    return loss, {
        "beta": gb @ eb.T,
        "alpha": ga @ ea.T,
        "eps_beta": beta.T @ gb,
        "eps_alpha": alpha.T @ ga,
    }


def coefficient_loss_and_grads(params, x, r, beta, alpha):
    """Gradients for the coefficients only, with frozen ``beta`` and ``alpha``."""
    eb, ea = params["eps_beta"], params["eps_alpha"]
    loss, gb, ga = bilinear_loss_and_grads(beta @ eb, alpha @ ea, x, r)
    return loss, {"eps_beta": beta.T @ gb, "eps_alpha": alpha.T @ ga}


def lora_loss_and_grads(params, x, r):
    """Gradients for a plain adapter ``b`` (``n x r``), ``a`` (``r x d``)."""
    loss, gb, ga = bilinear_loss_and_grads(params["b"], params["a"].T, x, r)
    return loss, {"b": gb, "a": ga.T}


def _full_loss(loss_fn, params, x, r):
    return loss_fn(params, x, r)[0]


def gradient_descent(params, loss_fn, x, r, cfg: TrainConfig, history=None):
    """Minibatch SGD (optionally with momentum) with a halve-on-increase safeguard.

    After every epoch the full training loss is compared with the previous
    epoch; on an increase the epoch is rolled back and the learning rate
    halved, at most ``cfg.max_halvings`` times before training stops.
    """
    params = {name: np.array(v, dtype=np.float64) for name, v in params.items()}
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    mom = cfg.momentum if cfg.optimizer == "sgd_momentum" else 0.0
    velocity = {name: np.zeros_like(v) for name, v in params.items()}
    s = x.shape[0]
    bs = min(cfg.batch_size, s)
    prev = _full_loss(loss_fn, params, x, r)
    if not np.isfinite(prev):
        raise TrainingFailure("initial loss is not finite", last_finite_loss=None)
    if history is not None:
        history.append(prev)
    halvings = 0
    if lr == 0.0:
        return params
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            snapshot = {name: v.copy() for name, v in params.items()}
            order = rng.permutation(s)
            for start in range(0, s, bs):
                idx = order[start : start + bs]
                _, grads = loss_fn(params, x[idx], r[idx])
                for name, g in grads.items():
                    velocity[name] = mom * velocity[name] - lr * g
                    params[name] += velocity[name]
            loss = _full_loss(loss_fn, params, x, r)
            if np.isfinite(loss) and loss <= prev:
                prev = loss
                if history is not None:
                    history.append(loss)
                continue
            params = snapshot
            velocity = {name: np.zeros_like(v) for name, v in params.items()}
            halvings += 1
            if halvings > cfg.max_halvings:
                if not np.isfinite(loss):
                    raise TrainingFailure(f"training diverged at epoch {epoch}", last_finite_loss=prev)
                logger.debug("stopping after %d learning-rate halvings at epoch %d", cfg.max_halvings, epoch)
                break
            lr *= 0.5
    return params


# -- public training entry points ------------------------------------------


def _layer_data(data: RegressionData, layers):
    if data.layer_id not in layers:
        raise ConsistencyError(f"no layer {data.layer_id!r} to train", layer_id=data.layer_id)
    return data.x, data.residual


def train_temporary(tmp: TemporaryFactors, task, cfg: TrainConfig = TrainConfig()) -> TemporaryFactors:
    """Fit all four temporary tensors of the task's layer by gradient descent."""
    data = as_regression_data(task)
    x, r = _layer_data(data, tmp.layers)
    ly = tmp.layers[data.layer_id]
    history = []
    fitted = gradient_descent(ly._asdict(), temporary_loss_and_grads, x, r, cfg, history=history)
    layers = dict(tmp.layers)
    layers[data.layer_id] = TempLayer(fitted["beta"], fitted["alpha"], fitted["eps_beta"], fitted["eps_alpha"])
    return replace(tmp, layers=layers, history=tuple(history))


def train_coefficients_only(state: ShareState, task_name, task, cfg: TrainConfig = TrainConfig()) -> TaskCoefficients:
    """Finetune one task's coefficients with the shared factors frozen."""
    data = as_regression_data(task)
    coeffs = state.task(task_name)
    x, r = _layer_data(data, coeffs.layers)
    f = state.factors.layers[data.layer_id]
    c = coeffs.layers[data.layer_id]

    def loss_fn(params, xb, rb):
        return coefficient_loss_and_grads(params, xb, rb, f.beta, f.alpha)

    fitted = gradient_descent({"eps_beta": c.eps_beta, "eps_alpha": c.eps_alpha}, loss_fn, x, r, cfg)
    layers = {lid: (ly.eps_alpha, ly.eps_beta) for lid, ly in coeffs.layers.items()}
    layers[data.layer_id] = (fitted["eps_alpha"], fitted["eps_beta"])
    return TaskCoefficients(coeffs.task_name, coeffs.p, layers)


def fit_baseline_lora(task, r, cfg: TrainConfig = TrainConfig(), task_name=None) -> LoraAdapter:
    """Train a rank-``r`` adapter from scratch (``b = 0``, ``a ~ N(0, 1/d)``)."""
    if r < 1:
        raise ValueError(f"LoRA rank must be >= 1, got {r}")
    data = as_regression_data(task)
    n, d = data.w0.shape
    rng = np.random.default_rng(cfg.seed)
    init = {"b": np.zeros((n, r)), "a": rng.standard_normal((r, d)) / np.sqrt(d)}
    fitted = gradient_descent(init, lora_loss_and_grads, data.x, data.residual, cfg)
    name = task_name or getattr(task, "task_name", None) or "baseline"
    return LoraAdapter(name, r, {data.layer_id: (fitted["a"], fitted["b"])})


def relative_mse(delta_fn, data: RegressionData, held_out=True):
    """``||r - delta(x)||^2 / ||r||^2`` on the held-out (or training) split."""
    if held_out and data.x_val is not None:
        x, r = data.x_val, data.val_residual
    else:
        x, r = data.x, data.residual
    e = delta_fn(x) - r
    return float(np.sum(e * e) / np.sum(r * r))

"""Adapters, shared factors, task coefficients and the continual state.

Conventions (per layer, weight ``W0`` of shape ``n x d``):

* a LoRA adapter holds ``a`` (``r x d``) and ``b`` (``n x r``); its delta is ``b @ a``;
* shared factors hold ``alpha`` (``d x k``) and ``beta`` (``n x k``) with
  orthonormal columns plus the row means removed before the SVD;
* a task holds ``eps_alpha`` and ``eps_beta`` (``k x p``); its delta is
  ``(beta @ eps_beta) @ (alpha @ eps_alpha).T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import ConsistencyError
from .linalg import as_matrix, orthonormality_error

ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class LayerShape:
    layer_id: str
    n: int
    d: int

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError(f"layer {self.layer_id!r}: dims must be >= 1, got n={self.n}, d={self.d}")


class LoraLayer(NamedTuple):
    a: np.ndarray
    b: np.ndarray


class FactorLayer(NamedTuple):
    alpha: np.ndarray
    beta: np.ndarray
    mean_a: np.ndarray
    mean_b: np.ndarray


class CoefLayer(NamedTuple):
    eps_alpha: np.ndarray
    eps_beta: np.ndarray


def _check_unique_layouts(layouts):
    ids = [s.layer_id for s in layouts]
    if len(set(ids)) != len(ids):
        raise ConsistencyError(f"duplicate layer ids in layout: {ids}")


@dataclass(frozen=True)
class LoraAdapter:
    """A rank-``r`` adapter, one ``(a, b)`` pair per layer."""

    task_name: str
    rank: int
    layers: dict

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {self.rank}")
        if not self.layers:
            raise ConsistencyError(f"adapter {self.task_name!r} has no layers")
        clean = {}
        for lid, (a, b) in self.layers.items():
            a = as_matrix(a, f"{lid}.a")
            b = as_matrix(b, f"{lid}.b")
            if a.shape[0] != self.rank or b.shape[1] != self.rank:
                raise ConsistencyError(
                    f"layer {lid!r}: a {a.shape} / b {b.shape} do not match rank {self.rank}", layer_id=lid
                )
            clean[lid] = LoraLayer(a, b)
        object.__setattr__(self, "layers", clean)

    @property
    def layout(self):
        return [LayerShape(lid, ly.b.shape[0], ly.a.shape[1]) for lid, ly in self.layers.items()]

    def delta(self, layer_id):
        ly = self.layers[layer_id]
        return ly.b @ ly.a

    def check_layout(self, layout):
        expected = {s.layer_id: (s.n, s.d) for s in layout}
        got = {s.layer_id: (s.n, s.d) for s in self.layout}
        if expected != got:
            raise ConsistencyError(f"adapter {self.task_name!r} layout {got} does not match {expected}")


@dataclass(frozen=True)
class ShareFactors:
    """Per-layer principal bases shared by every task.

    ``n_vectors`` counts the rank vectors behind ``mean_a``/``mean_b`` so the
    running means can be updated when raw adapters are merged.
    """

    k: int
    layers: dict
    n_vectors: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        clean = {}
        for lid, ly in self.layers.items():
            alpha = as_matrix(ly[0], f"{lid}.alpha")
            beta = as_matrix(ly[1], f"{lid}.beta")
            mean_a = np.asarray(ly[2], dtype=np.float64).reshape(-1)
            mean_b = np.asarray(ly[3], dtype=np.float64).reshape(-1)
            if alpha.shape[1] != self.k or beta.shape[1] != self.k:
                raise ConsistencyError(
                    f"layer {lid!r}: alpha {alpha.shape} / beta {beta.shape} do not have k={self.k} columns",
                    layer_id=lid,
                )
            if mean_a.shape != (alpha.shape[0],) or mean_b.shape != (beta.shape[0],):
                raise ConsistencyError(f"layer {lid!r}: mean vectors do not match factor dims", layer_id=lid)
            clean[lid] = FactorLayer(alpha, beta, mean_a, mean_b)
        object.__setattr__(self, "layers", clean)

    @property
    def layout(self):
        return [LayerShape(lid, ly.beta.shape[0], ly.alpha.shape[0]) for lid, ly in self.layers.items()]

    def check_orthonormal(self, tol=ORTHO_TOL):
        for lid, ly in self.layers.items():
            for name, q in (("alpha", ly.alpha), ("beta", ly.beta)):
                err = orthonormality_error(q)
                if err > tol:
                    raise ConsistencyError(
                        f"layer {lid!r}: {name} columns not orthonormal (max error {err:.2e} > {tol:g})",
                        layer_id=lid,
                    )
        return self


@dataclass(frozen=True)
class TaskCoefficients:
    """Coefficients of one task in the shared subspace (pseudo-rank ``p``)."""

    task_name: str
    p: int
    layers: dict

    def __post_init__(self):
        if self.p < 1:
            raise ValueError(f"pseudo-rank p must be >= 1, got {self.p}")
        clean = {}
        for lid, (ea, eb) in self.layers.items():
            ea = as_matrix(ea, f"{lid}.eps_alpha")
            eb = as_matrix(eb, f"{lid}.eps_beta")
            if ea.shape != eb.shape or ea.shape[1] != self.p:
                raise ConsistencyError(
                    f"task {self.task_name!r}, layer {lid!r}: eps shapes {ea.shape}/{eb.shape} inconsistent with p={self.p}",
                    layer_id=lid,
                )
            clean[lid] = CoefLayer(ea, eb)
        object.__setattr__(self, "layers", clean)

    @property
    def k(self):
        return next(iter(self.layers.values())).eps_alpha.shape[0]

    def check_against(self, factors: ShareFactors):
        if set(self.layers) != set(factors.layers):
            missing = sorted(set(factors.layers) ^ set(self.layers))
            raise ConsistencyError(
                f"task {self.task_name!r} layers differ from the factors at {missing}", layer_id=missing[0]
            )
        for lid, ly in self.layers.items():
            if ly.eps_alpha.shape[0] != factors.k:
                raise ConsistencyError(
                    f"task {self.task_name!r}, layer {lid!r}: coefficients have k={ly.eps_alpha.shape[0]}, "
                    f"factors have k={factors.k}",
                    layer_id=lid,
                )


@dataclass(frozen=True)
class HyperParams:
    k: int = 32
    p: int = 8
    phi: int = 4
    variance_threshold: float | None = None
    sigma: float = 0.02
    lora_rank: int = 32

    def __post_init__(self):
        if self.k < 1 or self.p < 1 or self.phi < 1 or self.lora_rank < 1:
            raise ValueError(f"k, p, phi, lora_rank must be >= 1: {self}")
        if self.phi > self.k:
            raise ValueError(f"phi={self.phi} must not exceed k={self.k}")
        if self.variance_threshold is not None and not 0.0 < self.variance_threshold <= 1.0:
            raise ValueError(f"variance_threshold must lie in (0, 1], got {self.variance_threshold}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class MergeEvent:
    timestep: int
    task_name: str
    source: str  # "data" or "adapter"

    def __post_init__(self):
        if self.source not in ("data", "adapter"):
            raise ValueError(f"merge source must be 'data' or 'adapter', got {self.source!r}")


@dataclass(frozen=True)
class ShareState:
    """Factors, all task coefficients, hyperparameters and merge history.

    A value: "updates" return a new state via :meth:`evolve`.
    """

    factors: ShareFactors
    tasks: tuple = ()
    hyper: HyperParams = field(default_factory=HyperParams)
    history: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        object.__setattr__(self, "history", tuple(self.history))
        names = [t.task_name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConsistencyError(f"task names must be unique, got {names}")
        for t in self.tasks:
            t.check_against(self.factors)

    @property
    def k(self):
        return self.factors.k

    @property
    def task_names(self):
        return [t.task_name for t in self.tasks]

    def task(self, name) -> TaskCoefficients:
        for t in self.tasks:
            if t.task_name == name:
                return t
        raise KeyError(f"unknown task {name!r}; known tasks: {self.task_names}")

    def evolve(self, **changes) -> "ShareState":
        return replace(self, **changes)

    def replace_task(self, coeffs: TaskCoefficients) -> "ShareState":
        tasks = [coeffs if t.task_name == coeffs.task_name else t for t in self.tasks]
        if coeffs.task_name not in self.task_names:
            raise KeyError(f"unknown task {coeffs.task_name!r}")
        return self.evolve(tasks=tasks)


def suggest_task_name(existing, name):
    i = 2
    while f"{name}_{i}" in existing:
        i += 1
    return f"{name}_{i}"


def reconstruct_adapter(factors: ShareFactors, coeffs: TaskCoefficients, with_mean=False):
    """Per-layer ``(b_hat, a_hat)`` with ``b_hat`` ``n x p`` and ``a_hat`` ``p x d``.

    With ``with_mean`` the stored row means are added back to every column of
    ``b_hat`` and every row of ``a_hat``, undoing the centering applied at
    ingestion (exact only while the means are unchanged since then).
    """
    coeffs.check_against(factors)
    out = {}
    for lid, c in coeffs.layers.items():
        f = factors.layers[lid]
        b_hat = f.beta @ c.eps_beta
        a_hat = (f.alpha @ c.eps_alpha).T
        if with_mean:
            b_hat = b_hat + f.mean_b[:, None]
            a_hat = a_hat + f.mean_a[None, :]
        out[lid] = (b_hat, a_hat)
    return out


def reconstructed_delta(factors, coeffs, layer_id, with_mean=False):
    b_hat, a_hat = reconstruct_adapter(factors, coeffs, with_mean=with_mean)[layer_id]
    return b_hat @ a_hat


def as_lora(factors, coeffs, with_mean=False, task_name=None) -> LoraAdapter:
    parts = reconstruct_adapter(factors, coeffs, with_mean=with_mean)
    return LoraAdapter(
        task_name or coeffs.task_name, coeffs.p, {lid: (a, b) for lid, (b, a) in parts.items()}
    )


def forward_delta(factors: ShareFactors, coeffs: TaskCoefficients, layer_id, x, with_mean=False):
    """Adapter contribution ``delta @ x`` as two thin products, never forming ``n x d``.

    ``x`` may be a single vector of length ``d`` or a batch of shape ``(S, d)``.
    """
    if layer_id not in factors.layers or layer_id not in coeffs.layers:
        raise KeyError(f"unknown layer {layer_id!r}")
    f = factors.layers[layer_id]
    c = coeffs.layers[layer_id]
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != f.alpha.shape[0]:
        raise ValueError(f"x has trailing dim {x.shape[-1]}, layer {layer_id!r} expects {f.alpha.shape[0]}")
    a = f.alpha @ c.eps_alpha  # d x p
    b = f.beta @ c.eps_beta  # n x p
    if with_mean:
        a = a + f.mean_a[:, None]
        b = b + f.mean_b[:, None]
    return (x @ a) @ b.T


def lora_param_count(shapes, r) -> int:
    if r < 1:
        raise ValueError(f"LoRA rank must be >= 1, got {r}")
    return sum(r * (s.n + s.d) for s in shapes)


def coefficient_param_count(shapes, k, p) -> int:
    if k < 1 or p < 1:
        raise ValueError(f"k and p must be >= 1, got k={k}, p={p}")
    return sum(2 * k * p for _ in shapes)


def trainable_param_count(shapes, r=None, k=None, p=None) -> int:
    """Trainable parameters: ``r(n+d)`` per layer for LoRA, ``2kp`` per layer for coefficients."""
    if r is not None:
        return lora_param_count(shapes, r)
    if k is None or p is None:
        raise ValueError("pass either r, or both k and p")
    return coefficient_param_count(shapes, k, p)


def savings_fraction(n, d, r, k, p) -> float:
    """Relative savings ``1 - kp / ((n+d) r)``."""
    if min(n, d, r, k, p) < 1:
        raise ValueError("all dimensions must be >= 1")
    return 1.0 - (k * p) / ((n + d) * r)

"""Build the foundational subspace from one or more adapters."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConsistencyError, RankError
from .linalg import center_rows, numerical_rank, project_coefficients, select_k_by_variance, svd
from .model import ShareFactors, TaskCoefficients

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StackedFactorData:
    """Rank vectors of several adapters stacked as rows, for one layer.

    ``d_b`` rows are the columns of each ``B`` (``n``-vectors), ``d_a`` rows
    are the rows of each ``A`` (``d``-vectors), in task order.
    """

    layer_id: str
    d_a: np.ndarray
    d_b: np.ndarray
    spans: dict

    def __post_init__(self):
        if self.d_a.shape[0] != self.d_b.shape[0]:
            raise ConsistencyError("d_a and d_b must have the same number of rows", layer_id=self.layer_id)
        cursor = 0
        for name, (start, stop) in self.spans.items():
            if start != cursor or stop <= start:
                raise ConsistencyError(f"span of {name!r} does not tile the rows", layer_id=self.layer_id)
            cursor = stop
        if cursor != self.d_a.shape[0]:
            raise ConsistencyError("spans do not cover every row", layer_id=self.layer_id)

    def unstack(self, task_name):
        """Recover ``(b, a)`` of one adapter."""
        start, stop = self.spans[task_name]
        return self.d_b[start:stop].T, self.d_a[start:stop]


def stack_adapters(adapters, layer_id) -> StackedFactorData:
    if not adapters:
        raise ConsistencyError("need at least one adapter")
    layout = adapters[0].layout
    rows_a, rows_b, spans = [], [], {}
    cursor = 0
    for ad in adapters:
        ad.check_layout(layout)
        if ad.task_name in spans:
            raise ConsistencyError(f"duplicate task name {ad.task_name!r} in adapter list")
        ly = ad.layers[layer_id]
        rows_a.append(ly.a)
        rows_b.append(ly.b.T)
        spans[ad.task_name] = (cursor, cursor + ad.rank)
        cursor += ad.rank
    return StackedFactorData(layer_id, np.vstack(rows_a), np.vstack(rows_b), spans)


def _resolve_k(ranks, spectra, k, variance_threshold, single_adapter):
    """Pick one k for all layers and sides given per-stack ranks and spectra."""
    achievable = min(ranks)
    if achievable < 1:
        raise RankError("the centered adapter stack is identically zero", achievable_k=0)
    if k is None:
        threshold = variance_threshold if variance_threshold is not None else 0.6
        k = max(select_k_by_variance(s, threshold) for s in spectra)
        return min(k, achievable)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > achievable:
        if not single_adapter:
            raise RankError(
                f"requested k={k} exceeds the achievable rank {achievable} of the centered stack",
                achievable_k=achievable,
            )
        warnings.warn(
            f"k={k} exceeds the rank {achievable} of a single centered adapter; clamping k to {achievable}",
            RuntimeWarning,
            stacklevel=3,
        )
        return achievable
    return k


def init_factors(adapters, k=None, variance_threshold=None, center=True) -> ShareFactors:
    """Center each layer's stacked rank vectors, SVD them, keep the top-``k`` right vectors.

    Give either a fixed ``k`` or a ``variance_threshold`` (default 0.6 when
    neither is given). ``k`` is shared by every layer and by both sides.
    ``center=False`` skips the centering and stores zero means.
    """
    if not adapters:
        raise ConsistencyError("need at least one adapter")
    layer_ids = list(adapters[0].layers)
    decomps = {}
    for lid in layer_ids:
        st = stack_adapters(adapters, lid)
        if center:
            ca, mean_a = center_rows(st.d_a)
            cb, mean_b = center_rows(st.d_b)
        else:
            ca, mean_a = st.d_a, np.zeros(st.d_a.shape[1])
            cb, mean_b = st.d_b, np.zeros(st.d_b.shape[1])
        decomps[lid] = (svd(ca), svd(cb), mean_a, mean_b, st.d_a.shape[0])
    ranks = [numerical_rank(res.s) for v in decomps.values() for res in v[:2]]
    spectra = [res.s for v in decomps.values() for res in v[:2]]
    k = _resolve_k(ranks, spectra, k, variance_threshold, single_adapter=len(adapters) == 1)
    layers = {}
    for lid, (sa, sb, mean_a, mean_b, _) in decomps.items():
        layers[lid] = (sa.vt[:k].T, sb.vt[:k].T, mean_a, mean_b)
    n_vectors = next(iter(decomps.values()))[4]
    logger.debug("initialized %d layers with k=%d from %d adapters", len(layers), k, len(adapters))
    return ShareFactors(k, layers, n_vectors=n_vectors)


def bootstrap_factors(adapter, k=None, variance_threshold=None) -> ShareFactors:
    """Factors from a single adapter, clamping ``k`` quietly.

    A rank-1 adapter is all mean once centered; its raw directions are used
    instead, with zero means.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            return init_factors([adapter], k=k, variance_threshold=variance_threshold)
        except RankError as exc:
            if exc.achievable_k != 0:
                raise
            return init_factors([adapter], k=k, variance_threshold=variance_threshold, center=False)


def init_coefficients(factors: ShareFactors, p, sigma=0.02, seed=None, task_name="task") -> TaskCoefficients:
    """Gaussian ``N(0, sigma^2)`` coefficients for every layer, reproducible under ``seed``."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    rng = np.random.default_rng(seed)
    layers = {}
    for lid in factors.layers:
        layers[lid] = (sigma * rng.standard_normal((factors.k, p)), sigma * rng.standard_normal((factors.k, p)))
    return TaskCoefficients(task_name, p, layers)


class ProjectedAdapter(NamedTuple):
    coefficients: TaskCoefficients
    residual_b: dict
    residual_a: dict


def centered_parts(factors: ShareFactors, adapter, layer_id):
    """Adapter columns ``(b - mean_b, a.T - mean_a)`` as ``n x r`` and ``d x r``."""
    f = factors.layers[layer_id]
    ly = adapter.layers[layer_id]
    return ly.b - f.mean_b[:, None], ly.a.T - f.mean_a[:, None]


def project_known_adapters(factors: ShareFactors, adapters):
    """Least-squares representation of each (centered) adapter in the shared subspace.

    The coefficients have one column per adapter rank vector, so ``p`` equals
    the adapter rank. Residuals are Frobenius norms per layer and side.
    """
    out = []
    for ad in adapters:
        ad.check_layout(factors.layout)
        layers, res_b, res_a = {}, {}, {}
        for lid, f in factors.layers.items():
            bc, ac = centered_parts(factors, ad, lid)
            eb = project_coefficients(f.beta, bc, layer_id=lid)
            ea = project_coefficients(f.alpha, ac, layer_id=lid)
            layers[lid] = (ea, eb)
            res_b[lid] = float(np.linalg.norm(f.beta @ eb - bc))
            res_a[lid] = float(np.linalg.norm(f.alpha @ ea - ac))
        out.append(ProjectedAdapter(TaskCoefficients(ad.task_name, ad.rank, layers), res_b, res_a))
    return out


def compress_pseudo_rank(factors: ShareFactors, coeffs: TaskCoefficients, p) -> TaskCoefficients:
    """Best pseudo-rank-``p`` coefficients for a task, within the shared subspace.

    The ``k x k`` core ``eps_beta @ eps_alpha.T`` is truncated by SVD and split
    symmetrically. Tasks already at ``p`` or below are returned unchanged.
    """
    p = min(p, coeffs.k)
    if coeffs.p <= p:
        return coeffs
    layers = {}
    for lid, c in coeffs.layers.items():
        res = svd(c.eps_beta @ c.eps_alpha.T)
        root = np.sqrt(res.s[:p])
        layers[lid] = (res.vt[:p].T * root, res.u[:, :p] * root)
    return TaskCoefficients(coeffs.task_name, p, layers)

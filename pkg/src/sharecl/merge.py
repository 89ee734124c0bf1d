"""Gradient-free knowledge integration.

Every existing task is reconstructed in the current subspace, stacked next to
the incoming contribution, and the stack's leading left singular vectors
become the new factors. Each task's coefficients are then recomputed by
least-squares projection onto the new factors.

This module deliberately does not import the trainer.
"""
from __future__ import annotations

import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConsistencyError, RankError
from .linalg import numerical_rank, project_coefficients, select_k_by_variance, svd
from .model import (
    HyperParams,
    LoraAdapter,
    MergeEvent,
    ShareFactors,
    ShareState,
    TaskCoefficients,
    suggest_task_name,
)
from .subspace import compress_pseudo_rank, init_factors, project_known_adapters

logger = logging.getLogger(__name__)

SIDES = ("beta", "alpha")


@dataclass
class MergeReport:
    task_name: str
    source: str
    k_before: int
    k_target: int
    k: int
    clamped: bool = False
    warnings: list = field(default_factory=list)
    spectra: dict = field(default_factory=dict)
    residuals: dict = field(default_factory=dict)
    discarded_energy: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    memory: dict = field(default_factory=dict)

    def to_dict(self, include_timing=False):
        out = asdict(self)
        out["spectra"] = {lid: {side: np.asarray(s).tolist() for side, s in v.items()} for lid, v in self.spectra.items()}
        if not include_timing:
            out.pop("wall_clock_s")
        return out


def _is_temporary(obj):
    # duck-typed so this module stays independent of the trainer
    return hasattr(obj, "contribution") and hasattr(obj, "phi")


def _contribution(new, factors, means, layer_id):
    """The incoming ``(n x w, d x w)`` columns for one layer."""
    if _is_temporary(new):
        return new.contribution(layer_id)
    ly = new.layers[layer_id]
    mean_a, mean_b = means[layer_id]
    return ly.b - mean_b[:, None], ly.a.T - mean_a[:, None]


def _updated_means(factors: ShareFactors, adapter: LoraAdapter, freeze):
    if freeze:
        return {lid: (f.mean_a, f.mean_b) for lid, f in factors.layers.items()}, factors.n_vectors
    total = factors.n_vectors + adapter.rank
    means = {}
    for lid, f in factors.layers.items():
        ly = adapter.layers[lid]
        mean_a = (factors.n_vectors * f.mean_a + ly.a.sum(axis=0)) / total
        mean_b = (factors.n_vectors * f.mean_b + ly.b.sum(axis=1)) / total
        means[lid] = (mean_a, mean_b)
    return means, total


def _map_layers(fn, layer_ids, threads):
    if threads and threads > 1 and len(layer_ids) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return dict(zip(layer_ids, pool.map(fn, layer_ids)))
    return {lid: fn(lid) for lid in layer_ids}


def _choose_k(ranks, spectra, k_target, variance_threshold, k_cap):
    if variance_threshold is not None:
        k_target = max(select_k_by_variance(s, variance_threshold) for s in spectra if s.size and s[0] > 0)
        if k_cap is not None:
            k_target = min(k_target, k_cap)
    achievable = min(ranks)
    if achievable < 1:
        raise RankError("merge stack is identically zero; nothing to span", achievable_k=0)
    return k_target, min(k_target, achievable)


def merge(
    state: ShareState,
    new,
    task_name=None,
    *,
    k=None,
    variance_threshold=None,
    k_cap=None,
    freeze_means=False,
    timestep=None,
    threads=None,
):
    """Integrate temporary factors (trained on data) or a raw adapter into ``state``.

    ``k`` defaults to the configured ``state.hyper.k``; with
    ``variance_threshold`` it is chosen from the stack spectrum instead (capped
    by ``k_cap``). Either way it is clamped to the numerical rank of the
    stack, which is reported. Returns ``(new_state, report)``.
    """
    start = time.perf_counter()
    factors = state.factors
    if _is_temporary(new):
        source = "data"
    elif isinstance(new, LoraAdapter):
        source = "adapter"
        new.check_layout(factors.layout)
    else:
        raise TypeError(f"cannot merge a {type(new).__name__}")
    name = task_name or getattr(new, "task_name", None)
    if not name:
        raise ConsistencyError("the merged task needs a name")
    if name in state.task_names:
        raise ConsistencyError(
            f"task name {name!r} already exists; rename it, e.g. {suggest_task_name(state.task_names, name)!r}"
        )
    if set(new.layers) != set(factors.layers):
        raise ConsistencyError(f"incoming layers {sorted(new.layers)} differ from {sorted(factors.layers)}")

    if source == "adapter":
        means, n_vectors = _updated_means(factors, new, freeze_means)
    else:
        means = {lid: (f.mean_a, f.mean_b) for lid, f in factors.layers.items()}
        n_vectors = factors.n_vectors

    def build(lid):
        f = factors.layers[lid]
        blocks_b = [f.beta @ t.layers[lid].eps_beta for t in state.tasks]
        blocks_a = [f.alpha @ t.layers[lid].eps_alpha for t in state.tasks]
        nb, na = _contribution(new, factors, means, lid)
        blocks_b.append(nb)
        blocks_a.append(na)
        return {
            "beta": (blocks_b, svd(np.hstack(blocks_b))),
            "alpha": (blocks_a, svd(np.hstack(blocks_a))),
        }

    layer_ids = list(factors.layers)
    stacks = _map_layers(build, layer_ids, threads)

    ranks = [numerical_rank(stacks[lid][side][1].s) for lid in layer_ids for side in SIDES]
    spectra = [stacks[lid][side][1].s for lid in layer_ids for side in SIDES]
    k_target = k if k is not None else state.hyper.k
    k_target, k_new = _choose_k(ranks, spectra, k_target, variance_threshold, k_cap)

    report = MergeReport(name, source, factors.k, k_target, k_new)
    if k_new < k_target:
        msg = f"stack rank {k_new} is below the requested k={k_target}; clamping"
        report.clamped = True
        report.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    all_names = state.task_names + [name]
    new_layers = {}
    coeff_layers = {t: {} for t in all_names}
    for lid in layer_ids:
        f = factors.layers[lid]
        report.spectra[lid] = {}
        report.discarded_energy[lid] = {}
        bases = {}
        for side in SIDES:
            blocks, res = stacks[lid][side]
            basis = res.u[:, :k_new]
            bases[side] = basis
            report.spectra[lid][side] = res.s
            report.discarded_energy[lid][side] = float(np.sum(res.s[k_new:] ** 2))
            old = f.beta if side == "beta" else f.alpha
            for tname, block in zip(all_names, blocks):
                eps = project_coefficients(basis, block, layer_id=lid)
                coeff_layers[tname].setdefault(lid, {})[side] = eps
                post = float(np.linalg.norm(basis @ eps - block))
                pre = float(np.linalg.norm(block - old @ (old.T @ block))) if tname == name else 0.0
                report.residuals.setdefault(tname, {}).setdefault(lid, {})[side] = [pre, post]
        mean_a, mean_b = means[lid]
        new_layers[lid] = (bases["alpha"], bases["beta"], mean_a, mean_b)

    new_factors = ShareFactors(k_new, new_layers, n_vectors=n_vectors)
    widths = {t.task_name: t.p for t in state.tasks}
    widths[name] = next(iter(stacks.values()))["beta"][0][-1].shape[1]
    tasks = [
        TaskCoefficients(t, widths[t], {lid: (c["alpha"], c["beta"]) for lid, c in coeff_layers[t].items()})
        for t in all_names
    ]
    ts = len(state.history) if timestep is None else timestep
    new_state = state.evolve(
        factors=new_factors, tasks=tasks, history=state.history + (MergeEvent(ts, name, source),)
    )
    report.wall_clock_s = time.perf_counter() - start
    logger.info("merged %s (%s): k %d -> %d in %.3fs", name, source, factors.k, k_new, report.wall_clock_s)
    return new_state, report


# -- batch compression -------------------------------------------------------


def relative_reconstruction_error(factors: ShareFactors, coeffs: TaskCoefficients, centered_pairs):
    """``||delta - delta_hat||_F / ||delta||_F`` summed over layers.

    ``centered_pairs`` maps layer id to the task's reference ``(b, a_cols)``
    (``n x r`` and ``d x r``); the reference delta is ``b @ a_cols.T``.
    """
    num = den = 0.0
    for lid, (bc, ac) in centered_pairs.items():
        f = factors.layers[lid]
        c = coeffs.layers[lid]
        ref = bc @ ac.T
        rec = (f.beta @ c.eps_beta) @ (f.alpha @ c.eps_alpha).T
        num += float(np.sum((ref - rec) ** 2))
        den += float(np.sum(ref**2))
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def state_scalar_count(state: ShareState, include_means=True):
    total = 0
    for f in state.factors.layers.values():
        total += f.alpha.size + f.beta.size
        if include_means:
            total += f.mean_a.size + f.mean_b.size
    for t in state.tasks:
        total += sum(c.eps_alpha.size + c.eps_beta.size for c in t.layers.values())
    return total


def compress_adapters(
    adapters,
    k=None,
    variance_threshold=None,
    p=None,
    bytes_per_scalar=4,
    hyper=None,
):
    """Fit one factor set to all adapters at once and express each adapter in it.

    Equivalent to :func:`~sharecl.subspace.init_factors` on the whole set
    followed by :func:`~sharecl.subspace.project_known_adapters`. With ``p``
    each task is further truncated to pseudo-rank ``p``.
    """
    start = time.perf_counter()
    if not adapters:
        raise ConsistencyError("need at least one adapter")
    factors = init_factors(adapters, k=k, variance_threshold=variance_threshold)
    projected = project_known_adapters(factors, adapters)
    coeffs = [pa.coefficients for pa in projected]
    if p is not None:
        coeffs = [compress_pseudo_rank(factors, c, p) for c in coeffs]
    if hyper is None:
        r = adapters[0].rank
        hyper = HyperParams(
            k=factors.k,
            p=p or r,
            phi=max(1, factors.k // 4),
            variance_threshold=variance_threshold,
            lora_rank=r,
        )
    state = ShareState(factors, coeffs, hyper, ())
    report = MergeReport("*", "adapter", 0, k if k is not None else factors.k, factors.k)
    errors = {}
    for ad, c in zip(adapters, coeffs):
        pairs = {lid: _centered(factors, ad, lid) for lid in factors.layers}
        errors[ad.task_name] = relative_reconstruction_error(factors, c, pairs)
    for ad, pa in zip(adapters, projected):
        report.residuals[ad.task_name] = {
            lid: {"beta": [pa.residual_b[lid]] * 2, "alpha": [pa.residual_a[lid]] * 2} for lid in factors.layers
        }
    adapter_scalars = sum(ly.a.size + ly.b.size for ad in adapters for ly in ad.layers.values())
    share_scalars = state_scalar_count(state)
    report.memory = {
        "adapter_bytes": adapter_scalars * bytes_per_scalar,
        "share_bytes": share_scalars * bytes_per_scalar,
        "memory_ratio": (adapter_scalars * bytes_per_scalar) / (share_scalars * bytes_per_scalar),
        "relative_errors": errors,
        "mean_relative_error": float(np.mean(list(errors.values()))),
    }
    report.wall_clock_s = time.perf_counter() - start
    return state, report


def _centered(factors, adapter, lid):
    f = factors.layers[lid]
    ly = adapter.layers[lid]
    return ly.b - f.mean_b[:, None], ly.a.T - f.mean_a[:, None]


# -- sequential vs batch -----------------------------------------------------


@dataclass
class EquivalenceReport:
    batch_errors: dict
    sequential_errors: dict
    gaps: dict
    growth: list
    growth_exponent: float | None
    k_batch: int
    k_sequential: int

    def to_dict(self):
        return asdict(self)


def _fit_exponent(ts, values):
    ts = np.asarray(ts, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    # exactly reconstructed early steps carry no scale information
    mask = v > 1e-12 * v.max() if v.size and v.max() > 0 else np.zeros(v.shape, dtype=bool)
    if mask.sum() < 2:
        return None
    slope, _ = np.polyfit(np.log(ts[mask]), np.log(v[mask]), 1)
    return float(slope)


def sequential_vs_batch_equivalence(adapters, k, freeze_means=False):
    """Compare one-shot compression with merging the adapters one at a time.

    Reports each task's relative reconstruction error under both routes, their
    gap, and the total residual energy of the sequential route after each
    step together with its fitted power-law exponent in ``t``.
    """
    if len(adapters) < 2:
        raise ValueError("need at least two adapters")
    batch_state, batch_report = compress_adapters(adapters, k=k)
    batch_errors = batch_report.memory["relative_errors"]

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            factors = init_factors(adapters[:1], k=k)
        except RankError:
            # a rank-1 adapter is all mean; start from its raw direction and keep zero means
            factors = init_factors(adapters[:1], k=k, center=False)
            freeze_means = True
    first = project_known_adapters(factors, adapters[:1])[0].coefficients
    hyper = HyperParams(k=k, p=adapters[0].rank, phi=1, lora_rank=adapters[0].rank)
    state = ShareState(factors, (first,), hyper, ())
    refs = {adapters[0].task_name: {lid: _centered(factors, adapters[0], lid) for lid in factors.layers}}
    growth = [_residual_energy(state, refs)]
    for ad in adapters[1:]:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            state, _ = merge(state, ad, k=k, freeze_means=freeze_means)
        refs[ad.task_name] = {lid: _centered(state.factors, ad, lid) for lid in state.factors.layers}
        growth.append(_residual_energy(state, refs))
    seq_errors = {
        name: relative_reconstruction_error(state.factors, state.task(name), pairs) for name, pairs in refs.items()
    }
    gaps = {name: seq_errors[name] - batch_errors[name] for name in seq_errors}
    exponent = _fit_exponent(np.arange(1, len(growth) + 1), growth)
    return EquivalenceReport(batch_errors, seq_errors, gaps, growth, exponent, batch_state.k, state.k)


def _residual_energy(state, refs):
    total = 0.0
    for name, pairs in refs.items():
        c = state.task(name)
        for lid, (bc, ac) in pairs.items():
            f = state.factors.layers[lid]
            ly = c.layers[lid]
            total += float(np.sum((f.beta @ ly.eps_beta - bc) ** 2) + np.sum((f.alpha @ ly.eps_alpha - ac) ** 2))
    return total

"""Synthetic task streams with a planted shared subspace, and the experiments run on them."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .adapt import (
    RegressionData,
    TrainConfig,
    fit_baseline_lora,
    relative_mse,
    spawn_temporary,
    train_coefficients_only,
    train_temporary,
)
from .analytics import EvalGrid
from .linalg import linear_cka
from .merge import merge
from .model import HyperParams, LoraAdapter, ShareState, forward_delta
from .subspace import bootstrap_factors

logger = logging.getLogger(__name__)

LAYER_ID = "layer0"


@dataclass(frozen=True)
class StreamConfig:
    n: int = 32
    d: int = 32
    k_star: int = 8
    num_tasks: int = 6
    off_subspace_energy: float = 0.1
    noise: float = 0.01
    seed: int = 0
    task_scale: float = 1.0
    shared_fraction: float = 0.0
    n_train: int = 1024
    n_val: int = 512

    def __post_init__(self):
        if not 1 <= self.k_star <= min(self.n, self.d):
            raise ValueError(f"k_star must lie in [1, min(n, d)], got {self.k_star}")
        if not 0.0 <= self.off_subspace_energy <= 1.0:
            raise ValueError("off_subspace_energy must lie in [0, 1]")
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ValueError("shared_fraction must lie in [0, 1]")
        if self.num_tasks < 1 or self.n_train < 1 or self.n_val < 1:
            raise ValueError("num_tasks, n_train and n_val must be >= 1")
        if self.noise < 0 or self.task_scale <= 0:
            raise ValueError("noise must be >= 0 and task_scale > 0")


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    """A linear regression task ``y = (W0 + w_star) x + noise`` with ``x ~ N(0, I)``."""

    task_name: str
    w_star: np.ndarray
    w0: np.ndarray
    noise: float
    seed: tuple
    n_train: int = 1024
    n_val: int = 512
    layer_id: str = LAYER_ID

    def sample(self, size, rng):
        x = rng.standard_normal((size, self.w0.shape[1]))
        y = x @ (self.w0 + self.w_star).T
        if self.noise:
            y = y + self.noise * rng.standard_normal(y.shape)
        return x, y

    def split_rng(self, split):
        # train and held-out draws come from disjoint children of the task seed
        return np.random.default_rng(np.random.SeedSequence(list(self.seed) + [split]))

    @cached_property
    def _data(self):
        x, y = self.sample(self.n_train, self.split_rng(0))
        xv, yv = self.sample(self.n_val, self.split_rng(1))
        return RegressionData(self.layer_id, self.w0, x, y, xv, yv)

    def regression_data(self) -> RegressionData:
        return self._data


@dataclass(frozen=True, eq=False)
class SyntheticStream:
    config: StreamConfig
    w0: np.ndarray
    basis_beta: np.ndarray
    basis_alpha: np.ndarray
    tasks: tuple = field(default=())

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)

    def project_planted(self, m):
        """Component of an ``n x d`` matrix inside the planted span."""
        pb = self.basis_beta @ self.basis_beta.T
        pa = self.basis_alpha @ self.basis_alpha.T
        return pb @ m @ pa


def _orthonormal(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def gen_stream(cfg: StreamConfig) -> SyntheticStream:
    """Draw a frozen ``W0``, a planted basis pair and ``num_tasks`` task deltas.

    Each ``w_star`` has squared norm ``task_scale**2`` split exactly into
    ``1 - rho`` inside the planted span (``V_b C V_a^T``) and ``rho`` in its
    Frobenius-orthogonal complement. ``shared_fraction`` mixes a common core
    into the in-span coefficients ``C``.
    """
    rng = np.random.default_rng(cfg.seed)
    w0 = rng.standard_normal((cfg.n, cfg.d))
    w0 /= np.linalg.norm(w0, 2)
    vb = _orthonormal(rng, cfg.n, cfg.k_star)
    va = _orthonormal(rng, cfg.d, cfg.k_star)
    core = rng.standard_normal((cfg.k_star, cfg.k_star))
    core /= np.linalg.norm(core)
    rho = cfg.off_subspace_energy
    tasks = []
    for i in range(cfg.num_tasks):
        c = rng.standard_normal((cfg.k_star, cfg.k_star))
        c = np.sqrt(cfg.shared_fraction) * core + np.sqrt(1.0 - cfg.shared_fraction) * c / np.linalg.norm(c)
        inside = vb @ c @ va.T
        inside *= np.sqrt(1.0 - rho) * cfg.task_scale / np.linalg.norm(inside)
        g = rng.standard_normal((cfg.n, cfg.d))
        off = g - vb @ (vb.T @ g @ va) @ va.T
        off *= np.sqrt(rho) * cfg.task_scale / np.linalg.norm(off)
        tasks.append(
            SyntheticTask(
                f"task{i}", inside + off, w0, cfg.noise, (cfg.seed, i), n_train=cfg.n_train, n_val=cfg.n_val
            )
        )
    return SyntheticStream(cfg, w0, vb, va, tuple(tasks))


def delta_similarity(w_i, w_j):
    """Pairwise ``||D_i - D_j||^2 / max(||D_i||^2, ||D_j||^2)``."""
    return float(np.sum((w_i - w_j) ** 2) / max(np.sum(w_i**2), np.sum(w_j**2)))


def mean_delta_similarity(stream):
    vals = [
        delta_similarity(a.w_star, b.w_star) for i, a in enumerate(stream) for b in list(stream)[i + 1 :]
    ]
    return float(np.mean(vals))


def _split_energy(inside, off, rho, scale):
    return np.sqrt(1.0 - rho) * scale * inside / np.linalg.norm(inside) + np.sqrt(rho) * scale * off / np.linalg.norm(off)


def gen_planted_adapters(num, n, d, r, k_star, off_subspace_energy, seed=0, layer_id=LAYER_ID, scale=1.0):
    """Rank-``r`` adapters whose rank vectors lie mostly in a planted ``k_star``-dim span.

    Each ``b`` (``n x r``) and each ``a`` (``r x d``) carries the fraction
    ``off_subspace_energy`` of its squared norm in the orthogonal complement of
    the planted column (resp. row) basis. Returns ``(adapters, V_b, V_a)``.
    """
    rho = off_subspace_energy
    if not 0.0 <= rho <= 1.0:
        raise ValueError("off_subspace_energy must lie in [0, 1]")
    if not 1 <= k_star <= min(n, d) or r < 1 or num < 1:
        raise ValueError("need 1 <= k_star <= min(n, d), r >= 1 and num >= 1")
    rng = np.random.default_rng(seed)
    vb = _orthonormal(rng, n, k_star)
    va = _orthonormal(rng, d, k_star)
    adapters = []
    for i in range(num):
        gb = rng.standard_normal((n, r))
        ga = rng.standard_normal((d, r))
        b_in = vb @ rng.standard_normal((k_star, r))
        a_in = va @ rng.standard_normal((k_star, r))
        b_off = gb - vb @ (vb.T @ gb)
        a_off = ga - va @ (va.T @ ga)
        b = _split_energy(b_in, b_off, rho, scale) if rho > 0 else scale * b_in / np.linalg.norm(b_in)
        a = _split_energy(a_in, a_off, rho, scale) if rho > 0 else scale * a_in / np.linalg.norm(a_in)
        adapters.append(LoraAdapter(f"adapter{i:03d}", r, {layer_id: (a.T, b)}))
    return adapters, vb, va


# -- frozen-basis sample-size probes -----------------------------------------


@dataclass
class ProbeCurve:
    sample_sizes: list
    restricted_error: list
    unrestricted_error: list
    tail_mass: float
    population_error: float

    def rows(self):
        out = []
        for s, a, b in zip(self.sample_sizes, self.restricted_error, self.unrestricted_error):
            out += [("restricted", s, a), ("unrestricted", s, b)]
        out += [("tail_mass", 0, self.tail_mass), ("population_restricted", 0, self.population_error)]
        return out


def theorem1_probe(task: SyntheticTask, basis, sample_sizes=(64, 256, 1024, 4096), seed=0) -> ProbeCurve:
    """Empirical error of fitting ``D*`` with rank-``k`` coefficients on a frozen basis.

    ``basis`` is ``d x k`` with orthonormal columns (right singular vectors of
    earlier tasks). Both fits are exact least-squares minimisers: (a)
    ``eps @ basis.T`` with ``eps`` free, (b) an unrestricted ``n x d`` delta.
    """
    v = np.asarray(basis, dtype=np.float64)
    d_star = task.w_star
    restricted, unrestricted = [], []
    for s in sample_sizes:
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(s)] + list(task.seed)))
        x, y = task.sample(int(s), rng)
        r = y - x @ task.w0.T
        eps = np.linalg.lstsq(x @ v, r, rcond=None)[0].T
        full = np.linalg.lstsq(x, r, rcond=None)[0].T
        restricted.append(float(np.sum((d_star - eps @ v.T) ** 2)))
        unrestricted.append(float(np.sum((d_star - full) ** 2)))
    inside = d_star @ v
    tail = float(np.sum(d_star**2) - np.sum(inside**2))
    # population least squares with identity input covariance
    eps_pop = d_star @ v @ np.linalg.inv(v.T @ v)
    population = float(np.sum((d_star - eps_pop @ v.T) ** 2))
    return ProbeCurve(list(map(int, sample_sizes)), restricted, unrestricted, tail, population)


# -- continual runs ---------------------------------------------------------------


@dataclass
class ContinualRun:
    order: list
    task_names: list
    states: list
    grid: EvalGrid
    reports: list
    bootstrap_k: int


def task_score(state: ShareState, task: SyntheticTask):
    """``1 / (1 + relative held-out MSE)`` of one task under ``state``."""
    data = task.regression_data()
    coeffs = state.task(task.task_name)
    rel = relative_mse(lambda x: forward_delta(state.factors, coeffs, data.layer_id, x), data)
    return 1.0 / (1.0 + rel)


def run_continual(
    stream,
    hyper: HyperParams,
    train_cfg: TrainConfig = TrainConfig(),
    order=None,
    relax_cl=False,
    seed=0,
    threads=None,
):
    """Bootstrap from an adapter fitted on the first task, then adapt and merge every task.

    After each merge every task seen so far is scored under the new state. With
    ``relax_cl`` the coefficients of earlier tasks are also finetuned on their
    data after each merge, which breaks the replay-free setting.
    """
    order = list(range(len(stream))) if order is None else list(order)
    tasks = [stream[i] for i in order]
    baseline = fit_baseline_lora(tasks[0], hyper.lora_rank, train_cfg, task_name=f"{tasks[0].task_name}_bootstrap")
    if hyper.variance_threshold is not None:
        factors = bootstrap_factors(baseline, variance_threshold=hyper.variance_threshold)
    else:
        factors = bootstrap_factors(baseline, k=hyper.k)
    state = ShareState(factors, (), hyper, ())
    bootstrap_k = factors.k
    states, reports, scores = [], [], []
    for t, task in enumerate(tasks):
        phi = min(hyper.phi, state.k)
        tmp = spawn_temporary(state, phi, seed=[seed, t], task_name=task.task_name)
        tmp = train_temporary(tmp, task, train_cfg)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            if hyper.variance_threshold is not None:
                state, rep = merge(
                    state, tmp, task.task_name, variance_threshold=hyper.variance_threshold, k_cap=hyper.k,
                    threads=threads,
                )
            else:
                state, rep = merge(state, tmp, task.task_name, k=hyper.k, threads=threads)
        if relax_cl:
            for past in tasks[: t + 1]:
                state = state.replace_task(train_coefficients_only(state, past.task_name, past, train_cfg))
        states.append(state)
        reports.append(rep)
        scores.append([task_score(state, tasks[i]) for i in range(t + 1)])
        logger.info("t=%d %s k=%d scores=%s", t, task.task_name, state.k, np.round(scores[-1], 4).tolist())
    grid = EvalGrid(scores, [t.task_name for t in tasks], metric="1/(1+relMSE)", higher_is_better=True)
    return ContinualRun(order, [t.task_name for t in tasks], states, grid, reports, bootstrap_k)


def default_orderings(num_tasks, count=3, seed=0):
    """Identity plus ``count - 1`` distinct seeded permutations."""
    rng = np.random.default_rng(seed)
    out = [list(range(num_tasks))]
    while len(out) < count:
        perm = rng.permutation(num_tasks).tolist()
        if perm not in out or num_tasks < 3:
            out.append(perm)
    return out


@dataclass
class OrderingResult:
    orderings: list
    trajectories: list
    cross_cka: list
    projector_gaps: list
    runs: list = field(repr=False, default_factory=list)

    def rows(self):
        out = []
        for j, traj in enumerate(self.trajectories):
            out += [(f"ordering{j}", t, v) for t, v in enumerate(traj)]
        return out


def run_fig1_experiment(
    cfg: StreamConfig,
    hyper: HyperParams,
    train_cfg: TrainConfig = TrainConfig(),
    orderings=None,
    seed=0,
):
    """CKA between the evolving ``beta`` factors and the planted basis, for several task orders."""
    stream = gen_stream(cfg)
    orderings = orderings or default_orderings(len(stream), 3, seed)
    runs = [run_continual(stream, hyper, train_cfg, order=o, seed=seed) for o in orderings]
    trajectories = [
        [linear_cka(st.factors.layers[LAYER_ID].beta, stream.basis_beta) for st in run.states] for run in runs
    ]
    finals = [run.states[-1].factors.layers[LAYER_ID].beta for run in runs]
    cross, gaps = [], []
    for i in range(len(finals)):
        for j in range(i + 1, len(finals)):
            cross.append(linear_cka(finals[i], finals[j]))
            pi = finals[i] @ finals[i].T
            pj = finals[j] @ finals[j].T
            gaps.append(float(np.linalg.norm(pi - pj)))
    return OrderingResult(orderings, trajectories, cross, gaps, runs)

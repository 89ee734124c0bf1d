import numpy as np
import pytest

from sharecl.model import HyperParams
from sharecl.sim import (
    LAYER_ID,
    StreamConfig,
    default_orderings,
    delta_similarity,
    gen_planted_adapters,
    gen_stream,
    mean_delta_similarity,
    run_continual,
    run_fig1_experiment,
    theorem1_probe,
)


def in_span_energy(stream, w):
    return float(np.sum(stream.project_planted(w) ** 2))


# -- stream generation ----------------------------------------------------------------


def test_stream_is_deterministic():
    cfg = StreamConfig(num_tasks=3, seed=11)
    s1, s2 = gen_stream(cfg), gen_stream(cfg)
    assert np.array_equal(s1.w0, s2.w0)
    for a, b in zip(s1, s2):
        assert np.array_equal(a.w_star, b.w_star)
        assert np.array_equal(a.regression_data().x, b.regression_data().x)
    other = gen_stream(StreamConfig(num_tasks=3, seed=12))
    assert not np.array_equal(s1[0].w_star, other[0].w_star)


def test_w0_unit_spectral_norm():
    s = gen_stream(StreamConfig(num_tasks=1))
    assert np.linalg.norm(s.w0, 2) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("rho", [0.0, 0.1, 0.5, 0.9, 1.0])
def test_energy_split_exact(rho):
    s = gen_stream(StreamConfig(num_tasks=4, off_subspace_energy=rho, task_scale=2.0))
    for task in s:
        total = np.sum(task.w_star**2)
        inside = in_span_energy(s, task.w_star)
        assert abs(total - 4.0) <= 1e-10
        assert abs(inside / total - (1 - rho)) <= 1e-10
        assert abs((total - inside) / total - rho) <= 1e-10


def test_rho_zero_is_low_rank_in_span():
    s = gen_stream(StreamConfig(num_tasks=3, off_subspace_energy=0.0, k_star=5))
    for task in s:
        np.testing.assert_allclose(s.project_planted(task.w_star), task.w_star, atol=1e-12)
        sv = np.linalg.svd(task.w_star, compute_uv=False)
        assert np.all(sv[5:] <= 1e-12 * sv[0])


def test_rho_one_leaves_planted_span_empty():
    # a basis of size k_star fit to the planted span explains none of the task
    s = gen_stream(StreamConfig(num_tasks=3, off_subspace_energy=1.0))
    for task in s:
        assert in_span_energy(s, task.w_star) <= 1e-20
        resid = np.sum((task.w_star - s.project_planted(task.w_star)) ** 2)
        assert resid == pytest.approx(np.sum(task.w_star**2), rel=1e-12)


def test_train_and_held_out_draws_differ():
    task = gen_stream(StreamConfig(num_tasks=1))[0]
    data = task.regression_data()
    assert data.x.shape == (1024, 32) and data.x_val.shape == (512, 32)
    assert not np.allclose(data.x[:10], data.x_val[:10])


@pytest.mark.parametrize("rho,shared", [(0.1, 0.0), (0.3, 0.5), (0.0, 0.8)])
def test_delta_similarity_matches_closed_form(rho, shared):
    # unit-norm deltas: E||Di - Dj||^2 = 2 - 2 <Di, Dj> and only the shared core correlates
    s = gen_stream(StreamConfig(num_tasks=20, off_subspace_energy=rho, shared_fraction=shared))
    expect = 2.0 - 2.0 * (1.0 - rho) * shared
    assert abs(mean_delta_similarity(s) - expect) <= 0.1 * expect


def test_delta_similarity_basics():
    w = np.random.default_rng(0).standard_normal((4, 3))
    assert delta_similarity(w, w) == 0.0
    assert delta_similarity(w, -w) == pytest.approx(4.0)


@pytest.mark.parametrize("kw", [{"k_star": 0}, {"k_star": 40}, {"off_subspace_energy": 1.5}, {"num_tasks": 0}])
def test_stream_config_validation(kw):
    with pytest.raises(ValueError):
        StreamConfig(**kw)


@pytest.mark.parametrize("rho", [0.0, 0.05, 0.5])
def test_planted_adapters_energy_split(rho):
    ads, vb, va = gen_planted_adapters(5, 20, 16, 4, 6, rho, seed=3)
    for ad in ads:
        ly = ad.layers[LAYER_ID]
        b_in = np.sum((vb.T @ ly.b) ** 2) / np.sum(ly.b**2)
        a_in = np.sum((ly.a @ va) ** 2) / np.sum(ly.a**2)
        assert abs(b_in - (1 - rho)) <= 1e-10 and abs(a_in - (1 - rho)) <= 1e-10


# -- least-squares probe --------------------------------------------------------------


def probe_median(rho, seeds=range(5), sizes=(64, 256, 1024, 4096)):
    curves = []
    for seed in seeds:
        s = gen_stream(StreamConfig(num_tasks=1, off_subspace_energy=rho, seed=seed))
        curves.append(theorem1_probe(s[0], s.basis_alpha, sizes, seed=seed))
    return curves, np.median([c.restricted_error for c in curves], axis=0)


def test_probe_in_span_converges():
    _, med = probe_median(0.0)
    assert np.all(np.diff(med) <= 0)
    assert med[-1] < 1e-3


def test_probe_off_span_plateaus_at_tail():
    curves, _ = probe_median(0.5)
    for c in curves:
        assert c.tail_mass > 0.1
        assert c.restricted_error[-1] >= 0.9 * c.tail_mass
        assert c.unrestricted_error[-1] < c.tail_mass


def test_probe_population_limit_is_projection_error():
    s = gen_stream(StreamConfig(num_tasks=1, off_subspace_energy=0.3))
    c = theorem1_probe(s[0], s.basis_alpha, (64,))
    w, v = s[0].w_star, s.basis_alpha
    assert c.population_error == pytest.approx(np.sum((w - w @ v @ v.T) ** 2), rel=1e-12)
    assert c.population_error == pytest.approx(c.tail_mass, rel=1e-10)
    assert [r[0] for r in c.rows()][-2:] == ["tail_mass", "population_restricted"]


# -- continual runs -------------------------------------------------------------------


def small_hyper(k=4):
    return HyperParams(k=k, p=4, phi=2, lora_rank=4)


def test_run_continual_grid_shape_and_determinism():
    s = gen_stream(StreamConfig(n=12, d=10, k_star=3, num_tasks=3, n_train=256, n_val=128))
    r1 = run_continual(s, small_hyper(3), order=[2, 0, 1])
    r2 = run_continual(s, small_hyper(3), order=[2, 0, 1])
    assert r1.task_names == ["task2", "task0", "task1"]
    assert [len(row) for row in r1.grid.scores] == [1, 2, 3]
    assert r1.grid.scores == r2.grid.scores
    for st in r1.states:
        st.factors.check_orthonormal()
    assert all(0 < v <= 1 for row in r1.grid.scores for v in row)


def test_run_continual_one_data_merge_per_task():
    s = gen_stream(StreamConfig(n=12, d=10, k_star=3, num_tasks=3, n_train=256, n_val=128))
    run = run_continual(s, small_hyper(3))
    # one coefficient set and one history entry per task seen so far
    assert [len(st.tasks) for st in run.states] == [1, 2, 3]
    assert [e.source for e in run.states[-1].history].count("data") == 3


def test_default_orderings_distinct():
    o = default_orderings(6, 3, seed=0)
    assert o[0] == list(range(6))
    assert len({tuple(x) for x in o}) == 3
    assert all(sorted(x) == list(range(6)) for x in o)


def test_orderings_exact_recovery_without_off_span_mass():
    cfg = StreamConfig(off_subspace_energy=0.0, num_tasks=8)
    res = run_fig1_experiment(cfg, HyperParams(k=8, p=8, phi=4, lora_rank=8), orderings=[list(range(8))])
    assert res.trajectories[0][7] >= 0.999


def test_orderings_projector_gap_measured():
    # the projector gap across orderings is reported, and the subspaces agree closely
    res = run_fig1_experiment(StreamConfig(), HyperParams(k=8, p=8, phi=4, lora_rank=8))
    assert len(res.projector_gaps) == 3 and len(res.cross_cka) == 3
    assert max(res.projector_gaps) < 0.25
    assert min(res.cross_cka) > 0.99
    assert [r[0] for r in res.rows()][:6] == ["ordering0"] * 6

import warnings

import numpy as np
import pytest

from sharecl.errors import ConsistencyError, RankError
from sharecl.linalg import center_rows, select_k_by_variance, svd, truncation_error_sq
from sharecl.model import LoraAdapter, ShareFactors, forward_delta, reconstructed_delta
from sharecl.subspace import (
    bootstrap_factors,
    compress_pseudo_rank,
    init_coefficients,
    init_factors,
    project_known_adapters,
    stack_adapters,
)


def adapter(seed, n=10, d=8, r=4, name=None, layers=("l0",)):
    g = np.random.default_rng(seed)
    return LoraAdapter(name or f"a{seed}", r, {lid: (g.standard_normal((r, d)), g.standard_normal((n, r))) for lid in layers})


def test_stack_single():
    st = stack_adapters([adapter(0)], "l0")
    assert st.d_b.shape == (4, 10) and st.d_a.shape == (4, 8)


def test_stack_three_spans_and_unstack():
    ads = [adapter(i, r=2) for i in range(3)]
    st = stack_adapters(ads, "l0")
    assert st.d_a.shape[0] == 6
    assert list(st.spans.values()) == [(0, 2), (2, 4), (4, 6)]
    for ad in ads:
        b, a = st.unstack(ad.task_name)
        np.testing.assert_array_equal(b, ad.layers["l0"].b)
        np.testing.assert_array_equal(a, ad.layers["l0"].a)


def test_stack_shape_mismatch():
    with pytest.raises(ConsistencyError):
        stack_adapters([adapter(0), adapter(1, n=11)], "l0")


def test_stack_duplicate_names():
    with pytest.raises(ConsistencyError):
        stack_adapters([adapter(0, name="x"), adapter(1, name="x")], "l0")


def test_single_adapter_exact_with_k_r_minus_1():
    ad = adapter(2, r=4)
    f = init_factors([ad], k=3)
    st = stack_adapters([ad], "l0")
    for side, m, basis in (("b", st.d_b, f.layers["l0"].beta), ("a", st.d_a, f.layers["l0"].alpha)):
        c, _ = center_rows(m)
        assert truncation_error_sq(c, 3) <= 1e-9
        np.testing.assert_allclose(c @ basis @ basis.T, c, atol=1e-9)


def test_single_adapter_clamps_with_warning():
    with pytest.warns(RuntimeWarning, match="clamping"):
        f = init_factors([adapter(3, r=4)], k=10)
    assert f.k == 3


def test_bootstrap_rank_one_uses_raw_direction():
    g = np.random.default_rng(5)
    a, b = g.standard_normal((1, 6)), g.standard_normal((7, 1))
    with pytest.raises(RankError):
        init_factors([LoraAdapter("r1", 1, {"l0": (a, b)})], k=1)
    f = bootstrap_factors(LoraAdapter("r1", 1, {"l0": (a, b)}), k=3)
    ly = f.layers["l0"]
    assert f.k == 1 and not np.any(ly.mean_a) and not np.any(ly.mean_b)
    np.testing.assert_allclose(np.abs(ly.alpha[:, 0]), np.abs(a[0]) / np.linalg.norm(a), atol=1e-12)


def test_bootstrap_clamps_quietly():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert bootstrap_factors(adapter(3, r=4), k=10).k == 3


def test_multi_adapter_rank_error_reports_achievable():
    ads = [adapter(i, r=2) for i in range(2)]
    with pytest.raises(RankError) as info:
        init_factors(ads, k=5)
    assert info.value.achievable_k == 3


def test_duplicate_adapters_same_factors():
    ad = adapter(4)
    twin = LoraAdapter("twin", ad.rank, {"l0": ad.layers["l0"]})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f1 = init_factors([ad], k=3)
    f2 = init_factors([ad, twin], k=3)
    for side in ("alpha", "beta"):
        q1, q2 = getattr(f1.layers["l0"], side), getattr(f2.layers["l0"], side)
        np.testing.assert_allclose(q1 @ q1.T, q2 @ q2.T, atol=1e-10)


def test_variance_policy_default():
    ads = [adapter(i) for i in range(5)]
    f = init_factors(ads)  # 0.6 of the energy
    st = stack_adapters(ads, "l0")
    expect = max(select_k_by_variance(svd(center_rows(m)[0]).s, 0.6) for m in (st.d_a, st.d_b))
    assert f.k == expect


def test_factors_are_orthonormal_and_deterministic():
    ads = [adapter(i) for i in range(4)]
    f1, f2 = init_factors(ads, k=6), init_factors(ads, k=6)
    f1.check_orthonormal()
    np.testing.assert_array_equal(f1.layers["l0"].beta, f2.layers["l0"].beta)


def test_permutation_invariance_of_projectors():
    ads = [adapter(i) for i in range(5)]
    f1 = init_factors(ads, k=6)
    f2 = init_factors(ads[::-1], k=6)
    for side in ("alpha", "beta"):
        q1, q2 = getattr(f1.layers["l0"], side), getattr(f2.layers["l0"], side)
        assert np.linalg.norm(q1 @ q1.T - q2 @ q2.T) <= 1e-8


def test_truncation_identity_at_init():
    ads = [adapter(i, n=12, d=9, r=3) for i in range(4)]
    st = stack_adapters(ads, "l0")
    for k in range(1, 10):
        f = init_factors(ads, k=k)
        for m, basis in ((st.d_b, f.layers["l0"].beta), (st.d_a, f.layers["l0"].alpha)):
            c, _ = center_rows(m)
            resid = np.sum((c - c @ basis @ basis.T) ** 2)
            tail = truncation_error_sq(c, k)
            assert abs(resid - tail) <= 1e-8 * max(tail, np.sum(c**2) * 1e-16, 1e-300) + 1e-12


def test_init_coefficients():
    f = init_factors([adapter(i) for i in range(3)], k=4)
    c0 = init_coefficients(f, 2, sigma=0.0, seed=1)
    assert np.all(reconstructed_delta(f, c0, "l0") == 0)
    c1, c2 = init_coefficients(f, 2, seed=5), init_coefficients(f, 2, seed=5)
    np.testing.assert_array_equal(c1.layers["l0"].eps_alpha, c2.layers["l0"].eps_alpha)
    assert np.std(c1.layers["l0"].eps_beta) < 0.1
    with pytest.raises(ValueError):
        init_coefficients(f, 0)


def test_project_known_in_span_zero_residual():
    ads = [adapter(i, r=3) for i in range(3)]
    f = init_factors(ads, k=8)  # full centered rank: 9 rows - 1
    for pa in project_known_adapters(f, ads):
        assert pa.residual_b["l0"] <= 1e-9 and pa.residual_a["l0"] <= 1e-9
        assert pa.coefficients.p == 3


def test_project_orthogonal_adapter_residual_is_its_norm():
    g = np.random.default_rng(9)
    n = d = 12
    q_b = np.linalg.qr(g.standard_normal((n, n)))[0]
    q_a = np.linalg.qr(g.standard_normal((d, d)))[0]
    # init adapters live in the first 4 coordinates of a rotated frame
    ads = [
        LoraAdapter(f"a{i}", 2, {"l0": ((q_a[:, :4] @ g.standard_normal((4, 2))).T, q_b[:, :4] @ g.standard_normal((4, 2)))})
        for i in range(3)
    ]
    f = init_factors(ads, k=3)
    f = ShareFactors(f.k, {"l0": (f.layers["l0"].alpha, f.layers["l0"].beta, np.zeros(d), np.zeros(n))})
    outsider = LoraAdapter(
        "out", 2, {"l0": ((q_a[:, 6:] @ g.standard_normal((6, 2))).T, q_b[:, 6:] @ g.standard_normal((6, 2)))}
    )
    pa = project_known_adapters(f, [outsider])[0]
    assert pa.residual_b["l0"] == pytest.approx(np.linalg.norm(outsider.layers["l0"].b), rel=1e-10)
    assert pa.residual_a["l0"] == pytest.approx(np.linalg.norm(outsider.layers["l0"].a), rel=1e-10)


def test_residual_non_increasing_in_k():
    ads = [adapter(i) for i in range(4)]
    probe = adapter(99)
    prev = np.inf
    for k in range(1, 9):
        f = init_factors(ads, k=k)
        pa = project_known_adapters(f, [probe])[0]
        cur = pa.residual_b["l0"] + pa.residual_a["l0"]
        assert cur <= prev + 1e-10
        prev = cur


def test_compress_pseudo_rank_is_best_rank_p():
    ads = [adapter(i, r=4) for i in range(3)]
    f = init_factors(ads, k=6)
    c = project_known_adapters(f, ads[:1])[0].coefficients
    c2 = compress_pseudo_rank(f, c, 2)
    assert c2.p == 2
    full = reconstructed_delta(f, c, "l0")
    cut = reconstructed_delta(f, c2, "l0")
    assert np.sum((full - cut) ** 2) == pytest.approx(truncation_error_sq(full, 2), rel=1e-8, abs=1e-20)
    x = np.random.default_rng(0).standard_normal(8)
    np.testing.assert_allclose(forward_delta(f, c2, "l0", x), cut @ x, atol=1e-10)

import numpy as np
import pytest

from sharecl.errors import ConsistencyError
from sharecl.linalg import project_coefficients
from sharecl.model import (
    HyperParams,
    LayerShape,
    LoraAdapter,
    MergeEvent,
    ShareFactors,
    ShareState,
    TaskCoefficients,
    forward_delta,
    lora_param_count,
    reconstruct_adapter,
    reconstructed_delta,
    savings_fraction,
    trainable_param_count,
)


def orthonormal(r, rows, cols):
    return np.linalg.qr(r.standard_normal((rows, cols)))[0]


def make_factors(n=7, d=5, k=3, seed=0, layers=("l0",)):
    r = np.random.default_rng(seed)
    return ShareFactors(k, {lid: (orthonormal(r, d, k), orthonormal(r, n, k), np.zeros(d), np.zeros(n)) for lid in layers})


def make_coeffs(factors, p=2, seed=1, name="t"):
    r = np.random.default_rng(seed)
    return TaskCoefficients(
        name, p, {lid: (r.standard_normal((factors.k, p)), r.standard_normal((factors.k, p))) for lid in factors.layers}
    )


def test_layer_shape_rejects_zero():
    with pytest.raises(ValueError):
        LayerShape("x", 0, 3)


def test_adapter_rank_mismatch():
    with pytest.raises(ConsistencyError):
        LoraAdapter("t", 2, {"l0": (np.zeros((3, 4)), np.zeros((5, 2)))})


def test_adapter_delta_and_layout():
    r = np.random.default_rng(0)
    a, b = r.standard_normal((2, 4)), r.standard_normal((5, 2))
    ad = LoraAdapter("t", 2, {"l0": (a, b)})
    np.testing.assert_allclose(ad.delta("l0"), b @ a)
    assert ad.layout == [LayerShape("l0", 5, 4)]


def test_factors_orthonormality_check():
    f = make_factors()
    f.check_orthonormal()
    bad = ShareFactors(1, {"l0": (np.ones((5, 1)), np.ones((7, 1)), np.zeros(5), np.zeros(7))})
    with pytest.raises(ConsistencyError):
        bad.check_orthonormal()


def test_task_k_must_match():
    f = make_factors(k=3)
    c = TaskCoefficients("t", 2, {"l0": (np.zeros((4, 2)), np.zeros((4, 2)))})
    with pytest.raises(ConsistencyError):
        ShareState(f, [c])


def test_state_unique_names():
    f = make_factors()
    with pytest.raises(ConsistencyError):
        ShareState(f, [make_coeffs(f, name="a"), make_coeffs(f, name="a")])


def test_hyper_phi_le_k():
    with pytest.raises(ValueError):
        HyperParams(k=2, phi=3)
    assert HyperParams().k == 32 and HyperParams().p == 8 and HyperParams().phi == 4


def test_merge_event_source():
    with pytest.raises(ValueError):
        MergeEvent(0, "t", "replay")


def test_state_is_a_value():
    f = make_factors()
    s = ShareState(f, [make_coeffs(f, name="a")])
    s2 = s.replace_task(make_coeffs(f, seed=9, name="a"))
    assert s2 is not s
    assert not np.allclose(s.task("a").layers["l0"].eps_alpha, s2.task("a").layers["l0"].eps_alpha)
    with pytest.raises(KeyError):
        s.task("zzz")


# -- reconstruction -------------------------------------------------------------


def test_zero_coefficients_zero_delta():
    f = make_factors()
    c = TaskCoefficients("t", 2, {"l0": (np.zeros((3, 2)), np.zeros((3, 2)))})
    assert np.all(reconstructed_delta(f, c, "l0") == 0)


def test_identity_coefficients():
    f = make_factors(k=3)
    c = TaskCoefficients("t", 3, {"l0": (np.eye(3), np.eye(3))})
    b_hat, a_hat = reconstruct_adapter(f, c)["l0"]
    np.testing.assert_array_equal(b_hat, f.layers["l0"].beta)
    np.testing.assert_array_equal(a_hat, f.layers["l0"].alpha.T)


def test_projected_in_span_adapter_reconstructs():
    f = make_factors(n=8, d=6, k=3, seed=3)
    r = np.random.default_rng(4)
    ly = f.layers["l0"]
    b = ly.beta @ r.standard_normal((3, 2))
    a = (ly.alpha @ r.standard_normal((3, 2))).T
    c = TaskCoefficients(
        "t", 2, {"l0": (project_coefficients(ly.alpha, a.T), project_coefficients(ly.beta, b))}
    )
    np.testing.assert_allclose(reconstructed_delta(f, c, "l0"), b @ a, atol=1e-8)


def test_layer_mismatch_names_layer():
    f = make_factors(layers=("l0", "l1"))
    c = make_coeffs(make_factors(layers=("l0",)))
    with pytest.raises(ConsistencyError) as info:
        reconstruct_adapter(f, c)
    assert info.value.layer_id == "l1"


def test_rank_bound():
    f = make_factors(n=9, d=8, k=5)
    c = make_coeffs(f, p=2)
    s = np.linalg.svd(reconstructed_delta(f, c, "l0"), compute_uv=False)
    assert np.all(s[2:] <= 1e-8 * s[0])


def test_with_mean_adds_rank_one_offsets():
    f0 = make_factors()
    ly = f0.layers["l0"]
    r = np.random.default_rng(2)
    mean_a, mean_b = r.standard_normal(5), r.standard_normal(7)
    f = ShareFactors(3, {"l0": (ly.alpha, ly.beta, mean_a, mean_b)})
    c = make_coeffs(f)
    b0, a0 = reconstruct_adapter(f, c)["l0"]
    b1, a1 = reconstruct_adapter(f, c, with_mean=True)["l0"]
    np.testing.assert_allclose(b1 - b0, np.tile(mean_b[:, None], (1, 2)))
    np.testing.assert_allclose(a1 - a0, np.tile(mean_a[None, :], (2, 1)))


# -- forward ---------------------------------------------------------------------


def test_forward_zero_cases():
    f = make_factors()
    c = TaskCoefficients("t", 2, {"l0": (np.zeros((3, 2)), np.zeros((3, 2)))})
    x = np.random.default_rng(0).standard_normal(5)
    assert np.all(forward_delta(f, c, "l0", x) == 0)
    assert np.all(forward_delta(f, make_coeffs(f), "l0", np.zeros(5)) == 0)


def test_forward_matches_materialized():
    f = make_factors(n=11, d=9, k=4, seed=5)
    c = make_coeffs(f, p=3)
    r = np.random.default_rng(6)
    delta = reconstructed_delta(f, c, "l0")
    for _ in range(10):
        x = r.standard_normal(9)
        np.testing.assert_allclose(forward_delta(f, c, "l0", x), delta @ x, atol=1e-10)
    xb = r.standard_normal((4, 9))
    np.testing.assert_allclose(forward_delta(f, c, "l0", xb), xb @ delta.T, atol=1e-10)


def test_forward_matches_single_adapter():
    # factors spanning one (centered) adapter reproduce its forward pass
    r = np.random.default_rng(7)
    n, d, rank = 10, 8, 3
    b, a = r.standard_normal((n, rank)), r.standard_normal((rank, d))
    beta = np.linalg.qr(b)[0]
    alpha = np.linalg.qr(a.T)[0]
    f = ShareFactors(rank, {"l0": (alpha, beta, np.zeros(d), np.zeros(n))})
    c = TaskCoefficients("t", rank, {"l0": (project_coefficients(alpha, a.T), project_coefficients(beta, b))})
    x = r.standard_normal(d)
    np.testing.assert_allclose(forward_delta(f, c, "l0", x), b @ (a @ x), atol=1e-8)


def test_forward_unknown_layer():
    f = make_factors()
    with pytest.raises(KeyError):
        forward_delta(f, make_coeffs(f), "nope", np.zeros(5))


# -- parameter accounting --------------------------------------------------------------


def test_param_counts_roberta_layer():
    shapes = [LayerShape("l", 768, 768)]
    assert trainable_param_count(shapes, r=32) == 49152
    assert trainable_param_count(shapes, k=32, p=8) == 512
    assert trainable_param_count(shapes, r=32) / trainable_param_count(shapes, k=32, p=8) == 96
    assert savings_fraction(768, 768, 32, 32, 8) == pytest.approx(1 - 256 / (1536 * 32))


def test_param_counts_headline():
    # 24 square 768 projections (query/value in 12 blocks), rank 32
    shapes = [LayerShape(f"l{i}", 768, 768) for i in range(24)]
    lora = trainable_param_count(shapes, r=32)
    share = trainable_param_count(shapes, k=32, p=8)
    assert round(lora / 1e6, 1) == 1.2
    assert round(share / 1e6, 3) == 0.012
    assert round(lora / share) == 96


@pytest.mark.parametrize("kw", [{"k": 0, "p": 0}, {"k": 0, "p": 3}, {"r": 0}])
def test_param_counts_reject_zero(kw):
    with pytest.raises(ValueError):
        trainable_param_count([LayerShape("l", 4, 4)], **kw)


def test_param_counts_random_layouts():
    r = np.random.default_rng(8)
    for _ in range(20):
        shapes = [LayerShape(f"l{i}", int(r.integers(1, 500)), int(r.integers(1, 500))) for i in range(r.integers(1, 6))]
        rank, k, p, T = (int(v) for v in r.integers(1, 40, size=4))
        lora_storage = T * lora_param_count(shapes, rank)
        assert lora_storage == T * sum(rank * (s.n + s.d) for s in shapes)
        share_storage = sum(k * (s.n + s.d) for s in shapes) + T * trainable_param_count(shapes, k=k, p=p)
        assert share_storage == sum(k * (s.d + s.n) + T * 2 * k * p for s in shapes)

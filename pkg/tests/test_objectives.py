import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalfed.errors import ConfigurationError, InputError
from causalfed.numerics import finite_diff_grad, relative_error, softmax_cross_entropy
from causalfed.objectives import (
    EnvBatch,
    MatchPairing,
    PenaltyConfig,
    build_matches,
    erm_loss,
    irm_penalty,
    rmatch_penalty,
    server_loss,
)


def _batch(rng, n, k, d=3, domain=0, scale=1.0):
    return EnvBatch(domain, rng.standard_normal((n, d)), scale * rng.standard_normal((n, k)), rng.integers(0, k, n))


def _dummy_scale_derivative(z, y, eps=1e-6):
    """Scalar finite difference of the mean loss w.r.t. a logit scale at w=1."""
    return (softmax_cross_entropy((1 + eps) * z, y)[0] - softmax_cross_entropy((1 - eps) * z, y)[0]) / (2 * eps)


def test_erm_loss_zero_logits_is_log2():
    loss, _ = erm_loss([EnvBatch(0, None, np.zeros((4, 2)), [0, 1, 0, 1])])
    assert loss == pytest.approx(np.log(2), abs=1e-15)


def test_erm_two_identical_envs_equal_one():
    rng = np.random.default_rng(0)
    b = _batch(rng, 5, 3)
    twin = EnvBatch(1, b.h, b.z, b.labels)
    assert erm_loss([b, twin])[0] == pytest.approx(erm_loss([b])[0], abs=1e-15)


def test_erm_empty_inputs_rejected():
    with pytest.raises(InputError):
        erm_loss([])
    with pytest.raises(InputError):
        EnvBatch(0, None, np.zeros((0, 2)), [])


def test_irm_penalty_zero_logits():
    d, g = irm_penalty(EnvBatch(0, None, np.zeros((3, 2)), [0, 1, 1]))
    assert d == 0.0 and not np.any(g)


def test_irm_penalty_hand_example():
    z, y = np.array([[2.0, 0.0]]), np.array([0])
    d, _ = irm_penalty(EnvBatch(0, None, z, y))
    p0 = np.exp(2) / (np.exp(2) + 1)
    g = 2 * (p0 - 1)
    assert g == pytest.approx(-0.238406, abs=1e-6)
    assert d == pytest.approx(0.056837, abs=1e-6)
    assert d == pytest.approx(_dummy_scale_derivative(z, y) ** 2, rel=1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_irm_penalty_matches_dummy_scale_derivative(seed):
    rng = np.random.default_rng(seed)
    b = _batch(rng, 6, 4, scale=2.0)
    assert irm_penalty(b)[0] == pytest.approx(_dummy_scale_derivative(b.z, b.labels) ** 2, rel=1e-7)


@pytest.mark.parametrize("seed", range(10))
def test_irm_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    b = _batch(rng, 5, 3, scale=1.5)
    fd = finite_diff_grad(lambda z: irm_penalty(EnvBatch(0, None, z, b.labels))[0], b.z, 1e-6)
    assert relative_error(irm_penalty(b)[1], fd) <= 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(2, 5))
def test_irm_penalty_permutation_invariant_and_nonnegative(seed, n, k):
    rng = np.random.default_rng(seed)
    b = _batch(rng, n, k, scale=3.0)
    perm = rng.permutation(n)
    d, g = irm_penalty(b)
    d2, g2 = irm_penalty(EnvBatch(0, None, b.z[perm], b.labels[perm]))
    assert d >= 0
    assert d2 == pytest.approx(d, rel=1e-12, abs=1e-15)
    np.testing.assert_allclose(g2, g[perm], rtol=1e-10, atol=1e-15)


def test_rmatch_hand_example():
    a = EnvBatch(0, np.array([[1.0, 0.0]]), None, [0])
    b = EnvBatch(1, np.array([[0.0, 0.0]]), None, [0])
    pen, (ga, gb) = rmatch_penalty([a, b], MatchPairing(np.array([[0, 0, 1, 0]])))
    assert pen == 1.0
    np.testing.assert_array_equal(ga, [[2.0, 0.0]])
    np.testing.assert_array_equal(gb, [[-2.0, 0.0]])


def test_rmatch_zero_when_representations_coincide():
    h = np.arange(6.0).reshape(3, 2)
    batches = [EnvBatch(0, h, None, [0, 1, 0]), EnvBatch(1, h.copy(), None, [0, 1, 0])]
    pairing = MatchPairing(np.array([[0, i, 1, i] for i in range(3)]))
    assert rmatch_penalty(batches, pairing)[0] == 0.0


def test_rmatch_symmetric_in_pair_order():
    rng = np.random.default_rng(1)
    batches = [_batch(rng, 4, 2, domain=0), _batch(rng, 4, 2, domain=1)]
    pairs = np.array([[0, 1, 1, 2], [0, 3, 1, 0]])
    swapped = pairs[:, [2, 3, 0, 1]]
    assert rmatch_penalty(batches, MatchPairing(pairs))[0] == pytest.approx(
        rmatch_penalty(batches, MatchPairing(swapped))[0], rel=1e-15)


def test_rmatch_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    batches = [_batch(rng, 4, 2, domain=3), _batch(rng, 5, 2, domain=7)]
    pairing = MatchPairing(np.array([[3, 0, 7, 1], [3, 2, 7, 4], [3, 0, 7, 0]]))
    _, grads = rmatch_penalty(batches, pairing)
    for i in range(2):
        def f(h, i=i):
            bs = list(batches)
            bs[i] = EnvBatch(bs[i].domain_id, h, None, bs[i].labels)
            return rmatch_penalty(bs, pairing)[0]
        assert relative_error(grads[i], finite_diff_grad(f, batches[i].h, 1e-6)) <= 1e-6


def test_rmatch_rejects_bad_indices():
    batches = [EnvBatch(0, np.zeros((2, 2)), None, [0, 1]), EnvBatch(1, np.zeros((2, 2)), None, [0, 1])]
    with pytest.raises(InputError):
        rmatch_penalty(batches, MatchPairing(np.array([[0, 5, 1, 0]])))
    with pytest.raises(InputError):
        rmatch_penalty(batches, MatchPairing(np.array([[0, 0, 9, 0]])))


def test_build_matches_counting_and_invariants():
    a = EnvBatch(0, None, None, [0, 1, 0, 1, 0])
    b = EnvBatch(1, None, None, [1, 1, 0, 0])
    m = build_matches([a, b], 5, seed=3)
    assert len(m) == 10
    for da, j, db, k in m.pairs:
        assert da != db
        assert [a, b][da].labels[j] == [a, b][db].labels[k]
    np.testing.assert_array_equal(m.pairs, build_matches([a, b], 5, seed=3).pairs)


def test_build_matches_skips_missing_class_and_needs_two_envs():
    a = EnvBatch(0, None, None, [0, 0])
    b = EnvBatch(1, None, None, [1, 1])
    assert len(build_matches([a, b], 4, 0)) == 0
    with pytest.raises(ConfigurationError):
        build_matches([a], 4, 0)


def test_penalty_schedule():
    cfg = PenaltyConfig(100.0, warmup_rounds=3, lambda_initial=1.0)
    assert [cfg.effective(t) for t in range(5)] == [1.0, 1.0, 1.0, 100.0, 100.0]
    assert PenaltyConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        PenaltyConfig(-1.0)


@pytest.mark.parametrize("objective", ["erm", "irm", "rmatch"])
def test_server_loss_lambda_zero_is_erm(objective):
    rng = np.random.default_rng(4)
    batches = [_batch(rng, 4, 2, domain=0), _batch(rng, 4, 2, domain=1)]
    pairing = build_matches(batches, 3, 0)
    loss, gz, gh, _ = server_loss(batches, PenaltyConfig(0.0, 0, 0.0), objective, 0, pairing)
    erm, egz = erm_loss(batches)
    assert loss == erm
    for a, b in zip(gz, egz):
        np.testing.assert_array_equal(a, b)
    assert not any(np.any(g) for g in gh)


def test_server_loss_uses_warmup_lambda():
    rng = np.random.default_rng(5)
    batches = [_batch(rng, 4, 2, domain=0)]
    cfg = PenaltyConfig(50.0, warmup_rounds=2, lambda_initial=1.0)
    assert server_loss(batches, cfg, "irm", 1)[3]["lambda"] == 1.0
    assert server_loss(batches, cfg, "irm", 2)[3]["lambda"] == 50.0
    with pytest.raises(ConfigurationError):
        server_loss(batches, cfg, "vrex", 0)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from causalfed import fedproto as fp
from causalfed.errors import ConfigurationError, ProtocolError, StateError
from causalfed.numerics import (
    Gradients,
    ModelParams,
    backward,
    finite_diff_grad,
    forward,
    init_params,
    relative_error,
    sgd_step,
    softmax_cross_entropy,
)
from causalfed.objectives import PenaltyConfig, build_matches, EnvBatch, server_loss

from conftest import tiny_arch, toy_env


def _cfg(**kw):
    base = dict(algorithm="fed_erm", rounds=3, batch_size=8, eta=0.1, penalty=PenaltyConfig(0.0, 0, 0.0))
    base.update(kw)
    return fp.FedConfig(**base)


def _centralized_step(params, x, y, eta):
    _, z, cache = forward(params, x)
    _, gz = softmax_cross_entropy(z, y)
    gf, gh, _ = backward(params, cache, gz)
    return sgd_step(params, Gradients(gf, gh), eta)


def test_split_round_equals_centralized_step():
    env = toy_env(20)
    cfg = _cfg(batch_size=8, clients_per_round=1)
    state = fp.init_state(tiny_arch(), 1, 0)
    after = fp.run_causalfed_round(state, [env], cfg)
    rng = fp.derive_rng(cfg.seed, fp._BATCH, 0, 0)
    idx = np.sort(rng.choice(20, size=8, replace=False))
    ref = _centralized_step(state.params, env.x[idx], env.y[idx], cfg.eta)
    assert np.max(np.abs(after.params.flat() - ref.flat())) <= 1e-12


def test_client_representation_contract():
    env = toy_env(100)
    params = init_params(tiny_arch(), 0)
    p1, _ = fp.client_representation(params, env, 64, fp.derive_rng(0, 2, 0, 0))
    p2, _ = fp.client_representation(params, env, 64, fp.derive_rng(0, 2, 0, 0))
    assert p1.h.shape == (64, params.arch.d)
    np.testing.assert_array_equal(p1.labels, p2.labels)
    np.testing.assert_array_equal(p1.h, p2.h)
    # the payload carries no pixels
    assert set(vars(p1)) == {"client_id", "domain_id", "h", "labels"}


def test_client_representation_rejects_empty_env():
    with pytest.raises(ConfigurationError):
        fp.client_representation(init_params(tiny_arch(), 0), toy_env(4).subset([]), 4, fp.derive_rng(0))


def _payloads(rng, d=4, n=6, k=3, domains=(0, 1)):
    return [fp.ClientPayload(i, dom, rng.standard_normal((n, d)), rng.integers(0, k, n)) for i, dom in enumerate(domains)]


@pytest.mark.parametrize("objective", ["erm", "irm", "rmatch"])
def test_server_grad_h_matches_finite_differences(objective):
    rng = np.random.default_rng(1)
    head = rng.standard_normal((4, 3))
    payloads = _payloads(rng)
    pen = PenaltyConfig(2.0, 0, 1.0)

    def loss_given(hs):
        batches = [EnvBatch(p.domain_id, h, h @ head, p.labels) for p, h in zip(payloads, hs)]
        pairing = build_matches(batches, 4, [0, 3, 0]) if objective == "rmatch" else None
        return server_loss(batches, pen, objective, 0, pairing)[0]

    _, grads, _ = fp.server_causal_update(head, payloads, objective, pen, 0, 0.1, 4, [0, 3, 0])
    for i, p in enumerate(payloads):
        def f(h, i=i):
            hs = [q.h for q in payloads]
            hs[i] = h
            return loss_given(hs)
        assert relative_error(grads[i], finite_diff_grad(f, p.h, 1e-6)) <= 1e-5


def test_server_identical_payloads_get_identical_gradients():
    rng = np.random.default_rng(2)
    h, y = rng.standard_normal((5, 4)), rng.integers(0, 3, 5)
    payloads = [fp.ClientPayload(0, 0, h, y), fp.ClientPayload(1, 1, h.copy(), y.copy())]
    _, grads, _ = fp.server_causal_update(rng.standard_normal((4, 3)), payloads, "irm", PenaltyConfig(5.0), 0, 0.1)
    np.testing.assert_array_equal(grads[0], grads[1])


def test_server_rejects_width_mismatch_and_duplicates():
    rng = np.random.default_rng(3)
    head = rng.standard_normal((4, 3))
    bad = [fp.ClientPayload(0, 0, np.zeros((2, 4)), [0, 1]), fp.ClientPayload(1, 1, np.zeros((2, 5)), [0, 1])]
    with pytest.raises(ProtocolError):
        fp.server_causal_update(head, bad, "erm", PenaltyConfig(), 0, 0.1)
    dup = [fp.ClientPayload(0, 0, np.zeros((2, 4)), [0, 1]), fp.ClientPayload(1, 0, np.zeros((2, 4)), [0, 1])]
    with pytest.raises(ProtocolError):
        fp.server_causal_update(head, dup, "erm", PenaltyConfig(), 0, 0.1)
    with pytest.raises(ProtocolError):
        fp.server_causal_update(head, [], "erm", PenaltyConfig(), 0, 0.1)


def test_client_update_zero_gradient_and_stale_cache():
    params = init_params(tiny_arch(), 0)
    env = toy_env(10)
    payload, cache = fp.client_representation(params, env, 4, fp.derive_rng(0))
    same = fp.client_update(params, cache, np.zeros_like(payload.h), 0.1)
    for a, b in zip(same.featurizer, params.featurizer):
        np.testing.assert_array_equal(a, b)
    moved = fp.client_update(params, cache, np.ones_like(payload.h), 0.1)
    with pytest.raises(StateError):
        fp.client_update(moved, cache, np.ones_like(payload.h), 0.1)


def test_client_update_linear_in_eta():
    params = init_params(tiny_arch(), 0)
    payload, cache = fp.client_representation(params, toy_env(10), 4, fp.derive_rng(0))
    g = np.random.default_rng(0).standard_normal(payload.h.shape)
    d1 = fp.client_update(params, cache, g, 0.1).flat() - params.flat()
    d2 = fp.client_update(params, cache, g, 0.3).flat() - params.flat()
    np.testing.assert_allclose(d2, 3 * d1, rtol=1e-10, atol=1e-15)


def test_shared_featurizer_and_history_after_rounds():
    envs = [toy_env(30, domain_id=i) for i in range(3)]
    cfg = _cfg(algorithm="causalfed_irm", rounds=4, penalty=PenaltyConfig(1.0, 2, 0.5))
    state = fp.train(envs, cfg, tiny_arch())
    assert len(state.history) == 4 and [h["round"] for h in state.history] == [0, 1, 2, 3]
    for f in state.client_featurizers:
        assert all(a.tobytes() == b.tobytes() for a, b in zip(f, state.params.featurizer))


@pytest.mark.parametrize("algorithm", fp.ALGORITHMS)
def test_training_is_bitwise_deterministic(algorithm):
    envs = [toy_env(24, domain_id=i) for i in range(2)]
    cfg = _cfg(algorithm=algorithm, rounds=2, penalty=PenaltyConfig(1.0, 1, 0.5))
    share = None
    if cfg.protocol == "gsd":
        share = fp.make_global_share([toy_env(20, domain_id=1000 + i, role="global_shared") for i in range(2)], 0.5, 0)
    a = fp.train(envs, cfg, tiny_arch(), share)
    b = fp.train(envs, cfg, tiny_arch(), share)
    assert a.params.flat().tobytes() == b.params.flat().tobytes()


def test_full_selection_and_seeded_subsets():
    cfg = _cfg(clients_per_round=None)
    assert fp.select_clients(4, cfg, 0) == [0, 1, 2, 3]
    a = [tuple(fp.select_clients(5, _cfg(clients_per_round=2, seed=0), t)) for t in range(20)]
    b = [tuple(fp.select_clients(5, _cfg(clients_per_round=2, seed=1), t)) for t in range(20)]
    assert a != b
    assert all(len(set(s)) == 2 for s in a)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        _cfg(algorithm="fedprox").validate()
    with pytest.raises(ConfigurationError):
        _cfg(rounds=0).validate()
    with pytest.raises(ConfigurationError):
        _cfg(clients_per_round=4).validate(3)
    with pytest.raises(ConfigurationError):
        _cfg(algorithm="causalfedgsd_irm", global_share_fraction=0.0).validate()
    with pytest.raises(ConfigurationError):
        _cfg(sequential_clients=True).validate()
    cfg = _cfg(algorithm="causalfed_rm", penalty=PenaltyConfig(3.0, 2, 0.5))
    assert fp.FedConfig.from_dict(cfg.to_dict()) == cfg


def test_local_train_reduces_loss_on_separable_toy():
    rng = np.random.default_rng(0)
    n = 64
    y = np.arange(n) % 2
    x = rng.uniform(0, 0.2, (n, 1, 4, 4))
    x[y == 1, 0, 0, :] += 0.8
    from causalfed.data import Environment
    env = Environment(x=x, y=y, domain_id=0, shift_kind="rotated", shift_param=0.0, role="client",
                      source_ids=np.arange(n), color=np.full(n, -1), angle=np.zeros(n), digit=y, n_classes=2)
    arch = tiny_arch(k=2)
    params = init_params(arch, 0)
    losses = [fp.evaluate(params, env)[1]]
    cfg = _cfg(batch_size=16, eta=0.5)
    for epoch in range(5):
        params, _ = fp.local_train(params, [env], "erm", cfg, epoch)
        losses.append(fp.evaluate(params, env)[1])
    assert losses[-1] < losses[0]
    assert fp.evaluate(params, env)[0] == 1.0


def test_gsd_without_penalty_is_erm_over_union():
    env, g = toy_env(16, domain_id=0), toy_env(16, domain_id=1000, seed=5, role="global_shared")
    cfg = _cfg(algorithm="causalfedgsd_irm", batch_size=4)
    params = init_params(tiny_arch(), 0)
    a, _ = fp.local_train(params, [env, g], "irm", cfg)
    b, _ = fp.local_train(params, [env, g], "erm", cfg)
    assert a.flat().tobytes() == b.flat().tobytes()


def test_aggregate_hand_cases():
    arch = tiny_arch()
    zero = init_params(arch, 0)
    mk = lambda v: ModelParams(arch, tuple(np.full(p.shape, v) for p in zero.featurizer), np.full(zero.head.shape, v))
    agg = fp.aggregate_fedavg([mk(0.0), mk(4.0)], [1, 3])
    assert np.all(agg.flat() == 3.0)
    same = fp.aggregate_fedavg([zero, zero, zero], [2, 5, 7])
    np.testing.assert_allclose(same.flat(), zero.flat(), rtol=0, atol=1e-15)
    with pytest.raises(ProtocolError):
        fp.aggregate_fedavg([zero], [0])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=2, max_size=5), st.integers(0, 2**31 - 1))
def test_aggregate_permutation_invariant_and_equal_weights_mean(counts, seed):
    arch = tiny_arch()
    rng = np.random.default_rng(seed)
    params = [init_params(arch, int(s)) for s in rng.integers(0, 10**6, len(counts))]
    perm = rng.permutation(len(counts))
    a = fp.aggregate_fedavg(params, counts)
    b = fp.aggregate_fedavg([params[i] for i in perm], [counts[i] for i in perm])
    assert a.flat().tobytes() == b.flat().tobytes()
    eq = fp.aggregate_fedavg(params, [1] * len(params))
    np.testing.assert_allclose(eq.flat(), np.mean([p.flat() for p in params], axis=0), rtol=0, atol=1e-15)


def test_global_share_fraction_and_gsd_equivalence():
    G = [toy_env(40, domain_id=1000, role="global_shared")]
    share = fp.make_global_share(G, 0.25, 0)
    assert len(share.G0[0]) == 10 and set(share.G0[0].source_ids) <= set(G[0].source_ids)
    # fraction 1, one client whose data equals G: a GSD round is centralized
    # training over two identical copies, which equals ERM on one copy
    full = fp.make_global_share(G, 1.0, 0)
    client = G[0]
    cfg = _cfg(algorithm="causalfedgsd_irm", batch_size=40, rounds=1)
    state = fp.init_state(tiny_arch(), 1, 0)
    gsd = fp.run_gsd_round(state, [client], full, cfg)
    ref = _centralized_step(state.params, client.x, client.y, cfg.eta)
    assert np.max(np.abs(gsd.params.flat() - ref.flat())) <= 1e-12


def test_gsd_share_is_fixed_across_rounds():
    envs = [toy_env(16, domain_id=i) for i in range(2)]
    share = fp.make_global_share([toy_env(20, domain_id=1000, role="global_shared")], 0.5, 0)
    ids = share.G0[0].source_ids.copy()
    fp.train(envs, _cfg(algorithm="causalfedgsd_irm", rounds=2), tiny_arch(), share)
    np.testing.assert_array_equal(share.G0[0].source_ids, ids)


def test_evaluate_examples():
    arch = tiny_arch(k=2)
    params = init_params(arch, 0)
    env = toy_env(1, k=2)
    z = forward(params, env.x)[1]
    one = env.with_data(y=np.array([int(z.argmax())]))
    assert fp.evaluate(params, one)[0] == 1.0
    big = toy_env(2000, k=2, seed=4)
    acc, _ = fp.evaluate(params, big)
    assert abs(acc - 0.5) <= 0.05
    assert fp.evaluate(params, big) == fp.evaluate(params, big)


def test_checkpoint_round_trip(tmp_path):
    params = init_params(tiny_arch(), 3)
    fp.save_checkpoint(tmp_path / "ck", params, 7, "abc")
    back, manifest = fp.load_checkpoint(tmp_path / "ck")
    assert back.flat().tobytes() == params.flat().tobytes()
    assert manifest["round"] == 7 and manifest["config_hash"] == "abc"


def test_fedavg_matches_split_erm_with_full_batches():
    # equal client sizes, one full-batch step each: the averaged local step and
    # the split-learning step follow the same gradient
    envs = [toy_env(12, domain_id=i, seed=i) for i in range(3)]
    cfg = dict(rounds=3, batch_size=12, penalty=PenaltyConfig(0.0, 0, 0.0))
    a = fp.train(envs, _cfg(algorithm="fedavg", **cfg), tiny_arch())
    b = fp.train(envs, _cfg(algorithm="fed_erm", **cfg), tiny_arch())
    assert np.max(np.abs(a.params.flat() - b.params.flat())) <= 1e-12

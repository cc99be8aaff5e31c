import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_chunks, random_params, tiny_config, token_memory
from epman import tensor as T
from epman.decoder import (
    DecoderConfig,
    attend_epman,
    build_chunk_kv,
    build_context_kv,
    causal_attention,
    forward_standard,
    forward_with_memory,
    generate_greedy,
    generate_standard,
    prefill,
)
from epman.epmem import MemorySelection, Mode
from epman.tensor import DimensionError, Tensor


def test_config_invariants():
    with pytest.raises(ValueError):
        DecoderConfig(10, n_heads=2, d_model=8, d_head=3)
    with pytest.raises(ValueError):
        DecoderConfig(10, chunk_len=256, episode_size=16, max_positions=1024)


def test_single_token_logits_shape(tokenizer):
    cfg = tiny_config(tokenizer.vocab_size)
    assert forward_standard([7], random_params(cfg), cfg).shape == (1, tokenizer.vocab_size)


def test_causal_property():
    cfg = tiny_config(30)
    params = random_params(cfg, 1)
    a = forward_standard([6, 7, 8, 9, 10], params, cfg).data
    b = forward_standard([6, 7, 8, 20, 21], params, cfg).data
    np.testing.assert_array_equal(a[:3], b[:3])
    assert not np.allclose(a[3:], b[3:])


def test_zero_head_gives_uniform_logits():
    cfg = tiny_config(30, head_init_scale=0.0)
    from epman.decoder import DecoderParams

    logits = forward_standard([6, 7, 8], DecoderParams.init(cfg, 0), cfg).data
    assert np.all(logits == logits[:, :1])


def test_all_parameters_finite_at_init():
    from epman.decoder import DecoderParams

    assert DecoderParams.init(tiny_config(30), 0).all_finite()


def test_chunk_kv_shapes_and_empty_chunk():
    cfg = tiny_config(30, n_layers=2, chunk_len=8)
    params = random_params(cfg)
    kv = build_chunk_kv([6] * 8, np.arange(8), params, cfg)
    assert kv.n_layers == 2
    assert all(k.shape == (8, 2, 4) and k.shape == v.shape for k, v in zip(kv.keys, kv.values))
    with pytest.raises(ValueError):
        build_chunk_kv([], [], params, cfg)
    with pytest.raises(ValueError):
        build_chunk_kv([6] * 9, np.arange(9), params, cfg)


def test_joint_prefill_matches_concatenated_sequence():
    cfg = tiny_config(30, n_layers=2)
    params = random_params(cfg, 2)
    a, b = [6, 7, 8], [9, 10, 11, 12]
    parts = build_context_kv([(0, a), (1, b)], params, cfg)
    with T.no_grad():
        full = prefill(a + b, np.arange(7), params, cfg)
    for layer in range(2):
        k = np.concatenate([p.keys[layer] for p in parts])
        np.testing.assert_array_equal(k, np.transpose(full[layer][0].data, (1, 0, 2)))
    assert parts[1].prefix_ids == (0,)
    np.testing.assert_array_equal(parts[1].positions, [3, 4, 5, 6])


def test_attend_epman_unit_weights_equal_causal_attention():
    rng = np.random.default_rng(0)
    q, k, v = (Tensor(rng.normal(size=(2, 9, 4))) for _ in range(3))
    full = causal_attention(q, k, v).data
    out = attend_epman(
        Tensor(q.data[:, 5:]), Tensor(k.data[:, :5]), Tensor(v.data[:, :5]), np.ones(5),
        Tensor(k.data[:, 5:]), Tensor(v.data[:, 5:]),
    ).data
    assert np.max(np.abs(out - full[:, 5:])) < 1e-12


def test_attend_epman_analytic_cases():
    v = Tensor(np.array([[[2.0, -1.0]]]))
    out = attend_epman(Tensor(np.ones((1, 1, 2))), Tensor(np.ones((1, 1, 2))), v, [0.3]).data
    np.testing.assert_allclose(out, 0.3 * v.data)
    v2 = Tensor(np.array([[[1.0, 2.0], [5.0, 7.0]]]))
    out = attend_epman(Tensor(np.zeros((1, 1, 2))), Tensor(np.ones((1, 2, 2))), v2, [1.0, 0.0]).data
    np.testing.assert_allclose(out[0, 0], 0.5 * v2.data[0, 0])


def test_attend_epman_weight_length_mismatch():
    x = Tensor(np.ones((1, 3, 2)))
    with pytest.raises(DimensionError):
        attend_epman(x, x, x, [1.0, 1.0])


def test_attend_epman_gradient():
    rng = np.random.default_rng(5)
    q, ck, cv, sk, sv = (Tensor(rng.normal(size=(2, n, 3)), requires_grad=True) for n in (3, 4, 4, 3, 3))
    w = Tensor(rng.uniform(0.2, 1.0, 4), requires_grad=True)
    err = T.finite_diff_check(lambda: (attend_epman(q, ck, cv, w, sk, sv) ** 2).sum(), [q, ck, cv, sk, sv, w])
    assert err < 1e-4


def _selection(ids, weights=None, mode=Mode.NARROW):
    return MemorySelection(list(ids), list(weights if weights is not None else [1.0] * len(ids)), mode)


def test_all_chunks_unit_weights_equal_standard(tokenizer):
    rng = np.random.default_rng(1)
    cfg = tiny_config(tokenizer.vocab_size, n_layers=2)
    params = random_params(cfg, 3)
    chunks = random_chunks(rng, 4, tokenizer.vocab_size, 8)
    mem = token_memory(tokenizer, chunks)
    query = [4, 9, 10, 5]
    with T.no_grad():
        got = forward_with_memory(query, _selection(range(4)), mem, params, cfg).data
        ref = forward_standard(sum(chunks, []) + query, params, cfg).data[-len(query):]
    assert np.max(np.abs(got - ref)) < 1e-12
    mem.close()


def test_single_chunk_selection_ignores_other_chunks(tokenizer):
    rng = np.random.default_rng(2)
    cfg = tiny_config(tokenizer.vocab_size)
    params = random_params(cfg, 4)
    chunks = random_chunks(rng, 3, tokenizer.vocab_size, 8)
    other = [chunks[0], random_chunks(rng, 1, tokenizer.vocab_size, 8)[0], chunks[2]]
    m1, m2 = token_memory(tokenizer, chunks), token_memory(tokenizer, other)
    with T.no_grad():
        a = forward_with_memory([4, 7], _selection([2]), m1, params, cfg).data
        b = forward_with_memory([4, 7], _selection([2]), m2, params, cfg).data
    np.testing.assert_array_equal(a, b)


def test_selection_order_is_normalised(tokenizer):
    rng = np.random.default_rng(3)
    cfg = tiny_config(tokenizer.vocab_size)
    params = random_params(cfg, 5)
    mem = token_memory(tokenizer, random_chunks(rng, 4, tokenizer.vocab_size, 8))
    with T.no_grad():
        a = forward_with_memory([4, 7], _selection([3, 0, 2], [0.5, 0.9, 0.7]), mem, params, cfg).data
        b = forward_with_memory([4, 7], _selection([0, 2, 3], [0.9, 0.7, 0.5]), mem, params, cfg).data
    np.testing.assert_array_equal(a, b)


def test_weights_change_output(tokenizer):
    rng = np.random.default_rng(4)
    cfg = tiny_config(tokenizer.vocab_size)
    params = random_params(cfg, 6)
    mem = token_memory(tokenizer, random_chunks(rng, 2, tokenizer.vocab_size, 8))
    with T.no_grad():
        a = forward_with_memory([4, 7], _selection([0, 1], [1.0, 1.0]), mem, params, cfg).data
        b = forward_with_memory([4, 7], _selection([0, 1], [0.2, 1.0]), mem, params, cfg).data
    assert not np.allclose(a, b)


def test_tier_route_equals_graph_route(tokenizer):
    rng = np.random.default_rng(5)
    cfg = tiny_config(tokenizer.vocab_size, n_layers=2)
    params = random_params(cfg, 7)
    mem = token_memory(tokenizer, random_chunks(rng, 4, tokenizer.vocab_size, 8))
    sel = _selection([1, 3], [0.4, 0.8])
    graph = forward_with_memory([4, 9, 5], sel, mem, params, cfg, use_tier=False).data
    tier = forward_with_memory([4, 9, 5], sel, mem, params, cfg, use_tier=True).data
    again = forward_with_memory([4, 9, 5], sel, mem, params, cfg, use_tier=True).data
    np.testing.assert_array_equal(graph, tier)
    np.testing.assert_array_equal(tier, again)


def test_isolated_prefill_uses_local_positions(tokenizer):
    rng = np.random.default_rng(6)
    cfg = tiny_config(tokenizer.vocab_size, prefill="isolated")
    params = random_params(cfg, 8)
    entries = build_context_kv([(0, [6, 7, 8]), (1, [9, 10])], params, cfg)
    np.testing.assert_array_equal(entries[1].positions, [0, 1])
    assert entries[1].prefix_ids == ()
    mem = token_memory(tokenizer, random_chunks(rng, 3, tokenizer.vocab_size, 8))
    with T.no_grad():
        out = forward_with_memory([4, 7], _selection([0, 2]), mem, params, cfg).data
    assert np.all(np.isfinite(out))


def test_generate_one_token_is_argmax(tokenizer):
    rng = np.random.default_rng(7)
    cfg = tiny_config(tokenizer.vocab_size)
    params = random_params(cfg, 9)
    mem = token_memory(tokenizer, random_chunks(rng, 3, tokenizer.vocab_size, 8))
    sel = _selection([0, 1])
    out = generate_greedy([4, 9, 5], sel, mem, params, cfg, max_new=1)
    with T.no_grad():
        logits = forward_with_memory([4, 9, 5], sel, mem, params, cfg).data
    assert out == [int(np.argmax(logits[-1]))]


def test_argmax_ties_go_to_lowest_id():
    cfg = tiny_config(30, head_init_scale=0.0)
    from epman.decoder import DecoderParams

    assert generate_standard([6, 7], DecoderParams.init(cfg, 0), cfg, max_new=1) == [0]


def test_generation_stops_at_eos():
    cfg = tiny_config(30)
    params = random_params(cfg, 10)
    params["head"].data[:] = 0.0
    params["head"].data[:, 3] = 1.0
    params["lnf.b"].data[:] = 1.0
    assert generate_standard([6, 7], params, cfg, max_new=5) == [3]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n_chunks=st.integers(1, 4), n_layers=st.integers(1, 2))
def test_uniform_weight_reduction_property(tokenizer, seed, n_chunks, n_layers):
    rng = np.random.default_rng(seed)
    cfg = tiny_config(tokenizer.vocab_size, n_layers=n_layers)
    params = random_params(cfg, seed)
    chunks = random_chunks(rng, n_chunks, tokenizer.vocab_size, 8)
    mem = token_memory(tokenizer, chunks)
    ids = sorted(rng.choice(n_chunks, size=int(rng.integers(1, n_chunks + 1)), replace=False).tolist())
    query = [4] + list(rng.integers(6, tokenizer.vocab_size, size=3)) + [5]
    with T.no_grad():
        got = forward_with_memory(query, _selection(ids), mem, params, cfg).data
        ref = forward_standard([t for i in ids for t in chunks[i]] + query, params, cfg).data[-len(query):]
    mem.close()
    assert np.max(np.abs(got - ref)) < 1e-12

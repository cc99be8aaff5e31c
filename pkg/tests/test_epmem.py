import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epman.datagen import FILLER_WORDS, FIRST_NAMES, LAST_NAMES
from epman.epmem import (
    Chunk,
    EmbedderConfig,
    EpisodicMemory,
    MemoryMLP,
    MemorySelection,
    Mode,
    ReadResult,
    broadcast_weights,
    chunk_document,
    encode_frozen,
    inspect_snapshot,
    make_selection,
    rank_scores,
)
from epman.tokenizer import Tokenizer


def sentence(n_tokens, word="river"):
    return " ".join([word] * (n_tokens - 1)) + " ."


def test_greedy_sentence_packing(tokenizer):
    text = " ".join(sentence(100) for _ in range(3))
    chunks = chunk_document(text, tokenizer, chunk_len=256)
    assert [len(c) for c in chunks] == [200, 100]
    assert chunk_document(text, tokenizer, 256) == chunks


def test_long_sentence_hard_split(tokenizer):
    chunks = chunk_document(sentence(300), tokenizer, chunk_len=256)
    assert [len(c) for c in chunks] == [256, 44]


def test_chunk_lengths_bounded(tokenizer):
    rng = np.random.default_rng(0)
    text = " ".join(sentence(int(rng.integers(2, 60))) for _ in range(40))
    chunks = chunk_document(text, tokenizer, chunk_len=32)
    assert all(1 <= len(c) <= 32 for c in chunks)
    assert sum(len(c) for c in chunks) == len(tokenizer.encode(text))


def test_mode_aliases():
    assert Mode.parse("NarrowAttn") is Mode.NARROW
    assert Mode.parse("uniform") is Mode.NARROW
    assert Mode.parse("BroadAttn") is Mode.BROAD
    with pytest.raises(ValueError):
        Mode.parse("wide")


def test_encoding_unit_norm_and_deterministic():
    a = encode_frozen("the river and the stone bridge")
    assert abs(np.linalg.norm(a) - 1.0) < 1e-9
    np.testing.assert_array_equal(a, encode_frozen("the river and the stone bridge"))


def test_token_ids_encode_like_text(tokenizer):
    text = "the color of alden ashcombe is teal ."
    np.testing.assert_array_equal(encode_frozen(text), encode_frozen(tokenizer.encode(text), tokenizer=tokenizer))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(FILLER_WORDS), min_size=1, max_size=40))
def test_any_input_unit_norm(ws):
    assert abs(np.linalg.norm(encode_frozen(" ".join(ws))) - 1.0) < 1e-9


def disjoint_pair(rng, lo, hi):
    vocab = np.array(FILLER_WORDS + FIRST_NAMES + LAST_NAMES)
    perm = rng.permutation(len(vocab))
    left, right = vocab[perm[: len(vocab) // 2]], vocab[perm[len(vocab) // 2 :]]
    n = int(rng.integers(lo, hi + 1))
    return " ".join(rng.choice(left, n)), " ".join(rng.choice(right, n))


def test_disjoint_texts_nearly_orthogonal():
    # the spread of hash-collision cosines is about 1/sqrt(d_enc); see the bound test below
    rng = np.random.default_rng(0)
    cos = []
    for _ in range(1000):
        a, b = disjoint_pair(rng, 20, 60)
        cos.append(abs(encode_frozen(a) @ encode_frozen(b)))
    cos = np.array(cos)
    assert np.percentile(cos, 99) < 0.2
    assert cos.max() < 0.3
    assert cos.mean() < 0.08


def test_write_sixteen_chunks_in_order(tokenizer):
    texts = [f"the {w} river ." for w in FILLER_WORDS[:16]]
    mem = EpisodicMemory.from_texts(texts, tokenizer)
    assert mem.encodings.shape == (16, 256)
    for i, t in enumerate(texts):
        np.testing.assert_array_equal(mem.encodings[i], encode_frozen(t))
        assert mem.chunks[i].chunk_id == i
    again = EpisodicMemory.from_texts(texts, tokenizer)
    np.testing.assert_array_equal(mem.encodings, again.encodings)


def test_identity_mlp_matches_frozen(tokenizer):
    texts = ["the river .", "a stone bridge .", "the quiet valley ."]
    mlp = MemoryMLP(256, 16, seed=0, prefix="write")
    mem = EpisodicMemory.from_texts(texts, tokenizer, use_mlp=True, write_mlp=mlp)
    np.testing.assert_allclose(mem.encodings, mem.frozen_encodings, atol=1e-12)


def test_read_analytic_cosine(tokenizer):
    mem = EpisodicMemory(tokenizer, EmbedderConfig(d_enc=8))
    mem.write([Chunk(0, [6], "x"), Chunk(1, [7], "y")])
    mem.encodings = np.eye(8)[:2]
    mem.encode_query = lambda q, use_mlp=False: np.eye(8)[0]
    r = mem.read("anything", k=1)
    assert r.ids == [0] and r.scores == [1.0]


def test_read_clips_k(small_memory):
    r = small_memory.read("the river", k=10)
    assert r.k == 4 and len(r.ids) == 4


def test_read_errors(tokenizer, small_memory):
    with pytest.raises(ValueError):
        EpisodicMemory(tokenizer).read("q")
    with pytest.raises(ValueError):
        small_memory.read("   ")
    with pytest.raises(ValueError):
        small_memory.read("river", k=0)


def test_rank_scores_ties_to_lower_id():
    assert rank_scores(np.array([0.5, 0.9, 0.5, 0.9])).tolist() == [1, 3, 0, 2]


@settings(max_examples=1000, deadline=None)
@given(n=st.integers(1, 64), k=st.integers(1, 70), seed=st.integers(0, 2**31), ties=st.booleans())
def test_read_matches_bruteforce_oracle(tokenizer, n, k, seed, ties):
    rng = np.random.default_rng(seed)
    enc = rng.normal(size=(n, 6))
    if ties:
        enc = np.round(enc)
        enc[rng.integers(n)] = enc[0]
    enc = enc / np.maximum(np.linalg.norm(enc, axis=1, keepdims=True), 1e-12)
    q = rng.normal(size=6)
    q /= np.linalg.norm(q)
    mem = EpisodicMemory(tokenizer, EmbedderConfig(d_enc=6))
    mem.chunks = [Chunk(i, [6], "x") for i in range(n)]
    mem.encodings = enc
    mem.encode_query = lambda query, use_mlp=False: q
    r = mem.read("q", k)
    scores = enc @ q
    # oracle: stable sort on descending score keeps lower ids first among equals
    oracle = sorted(range(n), key=lambda i: (-scores[i], i))[: min(k, n)]
    assert r.ids == oracle
    assert all(-1 - 1e-12 <= s <= 1 + 1e-12 for s in r.scores)
    assert all(a >= b for a, b in zip(r.scores, r.scores[1:]))


def rr(ids, scores=None):
    return ReadResult(list(ids), list(scores if scores is not None else [0.5] * len(ids)), len(ids))


def test_broad_selection_examples():
    assert make_selection(rr([7]), Mode.BROAD, 20).ids == [6, 7, 8]
    assert make_selection(rr([0]), Mode.BROAD, 20).ids == [0, 1]
    assert make_selection(rr([3, 4]), Mode.BROAD, 20).ids == [2, 3, 4, 5]


def test_exact_and_narrow_selection():
    sel = make_selection(rr([5, 2], [0.8, 1.3]), Mode.EXACT, 10)
    assert sel.ids == [2, 5] and sel.weights == [1.0, 0.8]
    sel = make_selection(rr([5, 2], [0.8, -0.1]), Mode.EXACT, 10)
    assert sel.weights == [0.0, 0.8]
    sel = make_selection(rr([5, 2]), Mode.NARROW, 10)
    assert sel.ids == [2, 5] and sel.weights == [1.0, 1.0]


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 40), data=st.data())
def test_selection_invariants(n, data):
    k = data.draw(st.integers(1, n))
    ids = data.draw(st.lists(st.integers(0, n - 1), min_size=k, max_size=k, unique=True))
    scores = data.draw(st.lists(st.floats(-1, 1), min_size=k, max_size=k))
    for mode in Mode:
        sel = make_selection(rr(ids, scores), mode, n)
        assert all(a < b for a, b in zip(sel.ids, sel.ids[1:]))
        assert len(sel.ids) == len(sel.weights)
        assert all(0.0 <= w <= 1.0 for w in sel.weights)
        if mode is Mode.BROAD:
            assert k <= len(sel.ids) <= min(3 * k, n)
            assert set(ids) <= set(sel.ids)
        else:
            assert sorted(ids) == sel.ids


def test_broadcast_weights(tokenizer):
    mem = EpisodicMemory(tokenizer, chunk_len=256)
    mem.write([Chunk(0, [6] * 256, "a"), Chunk(1, [7] * 256, "b"), Chunk(2, [8] * 100, "c")])
    w = broadcast_weights(MemorySelection([0, 1], [0.9, 1.0]), mem)
    assert w.shape == (512,)
    assert np.all(w[:256] == 0.9) and np.all(w[256:] == 1.0)
    assert np.all(broadcast_weights(MemorySelection([2], [0.5]), mem) == 0.5)
    assert np.all(broadcast_weights(MemorySelection([0, 2], [1.0, 1.0]), mem) == 1.0)
    with pytest.raises(KeyError):
        broadcast_weights(MemorySelection([5], [1.0]), mem)


def test_snapshot_round_trip(tmp_path, small_memory):
    from epman.decoder import build_context_kv
    from conftest import random_params, tiny_config

    cfg = tiny_config(small_memory.tokenizer.vocab_size, chunk_len=16)
    params = random_params(cfg)
    segs = [(c.chunk_id, c.token_ids) for c in small_memory.chunks[:2]]
    for e in build_context_kv(segs, params, cfg):
        small_memory.kv_put(e.chunk_id, e)
    manifest = small_memory.save_snapshot(tmp_path / "mem.json")
    info = inspect_snapshot(manifest)
    assert info["chunks"] == 4 and info["kv_entries"] == 2 and info["spill_records_verified"] == 2
    loaded = EpisodicMemory.load_snapshot(manifest)
    np.testing.assert_array_equal(loaded.encodings, small_memory.encodings)
    assert [c.token_ids for c in loaded.chunks] == [c.token_ids for c in small_memory.chunks]
    for cid in (0, 1):
        a, b = loaded.kv_get(cid), small_memory.kv_get(cid)
        assert all(np.array_equal(x, y) for x, y in zip(a.keys, b.keys))
    assert loaded.kv_lookup(2) is None


def test_tokenizer_round_trip():
    tok = Tokenizer(["the", "river", "."])
    assert tok.decode(tok.encode("The river.")) == "the river."
    assert tok.encode("unknownword") == [1]

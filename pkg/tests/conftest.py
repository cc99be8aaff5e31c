import numpy as np
import pytest

from epman.datagen import default_tokenizer
from epman.decoder import DecoderConfig, DecoderParams
from epman.epmem import EmbedderConfig, EpisodicMemory


@pytest.fixture(scope="session")
def tokenizer():
    return default_tokenizer()


def tiny_config(vocab_size=20, **kw):
    base = dict(n_layers=1, n_heads=2, d_model=8, d_head=4, d_ff=16, max_positions=64, chunk_len=8, episode_size=4)
    base.update(kw)
    return DecoderConfig(vocab_size, **base)


def random_params(config, seed=0, scale=0.5):
    """Parameters with non-trivial magnitudes so attention patterns are not flat."""
    params = DecoderParams.init(config, seed)
    rng = np.random.default_rng(seed + 100)
    for name, t in params.items():
        if not name.endswith((".g", ".b", "b1", "b2")):
            t.data = rng.normal(0, scale, t.shape)
    return params


@pytest.fixture
def small_memory(tokenizer):
    texts = [
        "the river and the stone bridge .",
        "the best thing to do in san francisco is eat a sandwich .",
        "a quiet meadow beyond the valley .",
        "the color of alden ashcombe is teal .",
    ]
    mem = EpisodicMemory.from_texts(texts, tokenizer, chunk_len=16, embedder=EmbedderConfig(d_enc=64))
    yield mem
    mem.close()


def token_memory(tokenizer, token_chunks, chunk_len=8, **kw):
    """Memory holding chunks given directly as token ids."""
    from epman.epmem import Chunk

    mem = EpisodicMemory(tokenizer, EmbedderConfig(d_enc=32), chunk_len=chunk_len, **kw)
    mem.write([Chunk(i, list(map(int, toks)), "") for i, toks in enumerate(token_chunks)])
    return mem


def random_chunks(rng, n_chunks, vocab_size, max_len):
    return [list(rng.integers(6, vocab_size, size=int(rng.integers(1, max_len + 1)))) for _ in range(n_chunks)]


def make_checkpoint(tokenizer, seed=0, with_memory=True, **kw):
    """Random-weight checkpoint sized for 16-chunk, 32-token episodes."""
    from epman.checkpoint import Checkpoint
    from epman.training import MemoryOps

    base = dict(chunk_len=32, episode_size=16, max_positions=576)
    base.update(kw)
    cfg = tiny_config(tokenizer.vocab_size, **base)
    ops = MemoryOps(EmbedderConfig(d_enc=64), d_hidden=8, seed=seed) if with_memory else None
    return Checkpoint(cfg, random_params(cfg, seed), tokenizer, ops)


@pytest.fixture(scope="session")
def tiny_ckpt(tokenizer):
    return make_checkpoint(tokenizer)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])

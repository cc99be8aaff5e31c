"""Toy pre-LayerNorm transformer decoder with a memory-reweighted attention path.

Two forward routes share every weight:

* :func:`forward_standard` is plain causal self-attention over one sequence.
* :func:`forward_with_memory` splits the sequence into a context segment (the
  selected memory chunks, in document order) and a query segment. Context
  tokens are prefilled with ordinary causal attention; the resulting per-layer
  keys/values are what the episodic memory stores. Query tokens then attend
  over ``[context ; query]`` with :func:`attend_epman`, which scales each
  context value row by its chunk's relevance weight before the value product.

With every weight equal to one the two routes agree to rounding error.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad
from .tokenizer import EOS

if TYPE_CHECKING:
    from .epmem import EpisodicMemory, MemorySelection


@dataclass
class DecoderConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_head: int = 32
    d_ff: int = 128
    max_positions: int = 4096
    chunk_len: int = 256
    episode_size: int = 16
    prefill: str = "joint"  # "joint" (exact) or "isolated" (per-chunk, approximate)
    init_std: float = 0.02
    head_init_scale: float = 1.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads * d_head ({self.n_heads} * {self.d_head})"
            )
        if self.chunk_len * self.episode_size > self.max_positions:
            raise ValueError(
                f"chunk_len * episode_size = {self.chunk_len * self.episode_size} "
                f"exceeds max_positions = {self.max_positions}"
            )
        if self.prefill not in ("joint", "isolated"):
            raise ValueError(f"prefill must be 'joint' or 'isolated', got {self.prefill!r}")
        for name in ("vocab_size", "n_layers", "n_heads", "d_head", "d_ff", "chunk_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class DecoderParams:
    """Named parameter tensors of a decoder.

    ``version`` is bumped by the optimiser so cached key/value material can be
    invalidated when weights change.
    """

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)
        self.version = 0
        self._fp_cache: tuple[int, str] | None = None

    @classmethod
    def init(cls, config: DecoderConfig, seed: int = 0) -> "DecoderParams":
        rng = np.random.default_rng(seed)
        d, std = config.d_model, config.init_std

        def normal(*shape, scale=1.0):
            return Tensor(rng.normal(0.0, std * scale, size=shape), requires_grad=True)

        def const(value, *shape):
            return Tensor(np.full(shape, value), requires_grad=True)

        t = {
            "tok_emb": normal(config.vocab_size, d),
            "pos_emb": normal(config.max_positions, d),
        }
        # residual projections scaled down with depth, GPT-2 style
        resid = 1.0 / np.sqrt(2 * config.n_layers)
        for layer in range(config.n_layers):
            p = f"layer{layer}."
            t[p + "ln1.g"] = const(1.0, d)
            t[p + "ln1.b"] = const(0.0, d)
            t[p + "wq"] = normal(d, d)
            t[p + "wk"] = normal(d, d)
            t[p + "wv"] = normal(d, d)
            t[p + "wo"] = normal(d, d, scale=resid)
            t[p + "ln2.g"] = const(1.0, d)
            t[p + "ln2.b"] = const(0.0, d)
            t[p + "w1"] = normal(d, config.d_ff)
            t[p + "b1"] = const(0.0, config.d_ff)
            t[p + "w2"] = normal(config.d_ff, d, scale=resid)
            t[p + "b2"] = const(0.0, d)
        t["lnf.g"] = const(1.0, d)
        t["lnf.b"] = const(0.0, d)
        t["head"] = normal(d, config.vocab_size, scale=config.head_init_scale)
        for name, tensor in t.items():
            tensor.name = name
        return cls(t)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "DecoderParams":
        out = DecoderParams(
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.tensors.items()}
        )
        out.version = self.version
        return out

    def fingerprint(self) -> str:
        """SHA-256 over names, shapes and raw bytes; cached per ``version``."""
        if self._fp_cache is not None and self._fp_cache[0] == self.version:
            return self._fp_cache[1]
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        digest = h.hexdigest()
        self._fp_cache = (self.version, digest)
        return digest

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())


@dataclass
class ChunkKV:
    """Per-layer keys/values of one chunk, each ``[tokens, n_heads, d_head]``.

    ``prefix_ids`` lists the chunk ids that preceded this one in the prefill
    (empty for isolated prefill); together with ``positions`` and
    ``params_fingerprint`` it identifies when cached material is reusable.
    """

    chunk_id: int
    keys: list[np.ndarray]
    values: list[np.ndarray]
    positions: np.ndarray
    prefix_ids: tuple[int, ...] = ()
    params_fingerprint: str = ""

    def __post_init__(self):
        if len(self.keys) != len(self.values):
            raise ValueError("keys and values need the same layer count")
        for k, v in zip(self.keys, self.values):
            if k.shape != v.shape:
                raise ValueError(f"key/value shape mismatch {k.shape} vs {v.shape}")
            if k.shape[0] != len(self.positions):
                raise ValueError("key rows must match the number of positions")

    @property
    def n_tokens(self) -> int:
        return len(self.positions)

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    def nbytes(self) -> int:
        return sum(k.nbytes + v.nbytes for k, v in zip(self.keys, self.values))


# -- building blocks ------------------------------------------------------------


def _split_heads(x: Tensor, config: DecoderConfig) -> Tensor:
    n = x.shape[0]
    return x.reshape(n, config.n_heads, config.d_head).transpose(1, 0, 2)


def _merge_heads(x: Tensor, config: DecoderConfig) -> Tensor:
    n = x.shape[1]
    return x.transpose(1, 0, 2).reshape(n, config.d_model)


def _embed(tokens, positions, params: DecoderParams, config: DecoderConfig) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    if len(tokens) == 0:
        raise ValueError("empty token sequence")
    if positions.max() >= config.max_positions:
        raise ValueError(
            f"position {int(positions.max())} exceeds max_positions={config.max_positions}"
        )
    return T.take_rows(params["tok_emb"], tokens) + T.take_rows(params["pos_emb"], positions)


def _ln(x: Tensor, params: DecoderParams, prefix: str, config: DecoderConfig) -> Tensor:
    return T.layer_norm(x, params[prefix + ".g"], params[prefix + ".b"], config.ln_eps)


def _mlp(x: Tensor, params: DecoderParams, layer: int, config: DecoderConfig) -> Tensor:
    p = f"layer{layer}."
    h = _ln(x, params, p + "ln2", config)
    h = T.gelu(h @ params[p + "w1"] + params[p + "b1"])
    return x + (h @ params[p + "w2"] + params[p + "b2"])


def _qkv(x: Tensor, params: DecoderParams, layer: int, config: DecoderConfig):
    p = f"layer{layer}."
    h = _ln(x, params, p + "ln1", config)
    q = _split_heads(h @ params[p + "wq"], config)
    k = _split_heads(h @ params[p + "wk"], config)
    v = _split_heads(h @ params[p + "wv"], config)
    return q, k, v


def _causal_mask(n_rows: int, n_cols: int, offset: int) -> np.ndarray:
    """True where row ``i`` (absolute index ``offset + i``) must not see column ``j``."""
    rows = np.arange(n_rows)[:, None] + offset
    cols = np.arange(n_cols)[None, :]
    return cols > rows


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention with a causal mask; tensors are ``[H, T, d]``."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 2, 1)) * scale
    n = q.shape[1]
    scores = T.masked_fill(scores, _causal_mask(n, n, 0), -np.inf)
    return T.softmax(scores, axis=-1) @ v


def attend_epman(
    q: Tensor,
    context_k: Tensor,
    context_v: Tensor,
    token_weights,
    self_k: Tensor | None = None,
    self_v: Tensor | None = None,
) -> Tensor:
    """Memory-reweighted attention for query rows, all tensors ``[H, T, d]``.

    Scores run over ``[context ; self]`` and are softmax-normalised first;
    context value rows are then multiplied by their broadcast token weights,
    while the query's own rows keep weight one. Query row ``i`` sees every
    context token and query tokens ``0..i``.

    Raises:
        DimensionError: when ``len(token_weights)`` differs from the number of
            context tokens.
    """
    n_ctx = context_k.shape[1]
    w = token_weights if isinstance(token_weights, Tensor) else Tensor(np.asarray(token_weights, dtype=float))
    if w.ndim != 1 or w.shape[0] != n_ctx:
        raise T.DimensionError(f"token weights of length {w.shape} for {n_ctx} context tokens")
    if (self_k is None) != (self_v is None):
        raise ValueError("self_k and self_v must be given together")
    weighted_v = context_v * w.reshape(1, n_ctx, 1)
    if self_k is None:
        keys, values = context_k, weighted_v
        mask = None
    else:
        keys = T.concat([context_k, self_k], axis=1)
        values = T.concat([weighted_v, self_v], axis=1)
        mask = _causal_mask(q.shape[1], keys.shape[1], n_ctx)
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q @ keys.transpose(0, 2, 1)) * scale
    if mask is not None:
        scores = T.masked_fill(scores, mask, -np.inf)
    return T.softmax(scores, axis=-1) @ values


def _attn_out(ctx: Tensor, x: Tensor, params: DecoderParams, layer: int, config: DecoderConfig) -> Tensor:
    return x + _merge_heads(ctx, config) @ params[f"layer{layer}.wo"]


def _logits(x: Tensor, params: DecoderParams, config: DecoderConfig) -> Tensor:
    return _ln(x, params, "lnf", config) @ params["head"]


# -- standard route -------------------------------------------------------------


def forward_standard(tokens: Sequence[int], params: DecoderParams, config: DecoderConfig, positions=None) -> Tensor:
    """Next-token logits ``[len(tokens), vocab]`` under causal self-attention."""
    if len(tokens) > config.max_positions:
        raise ValueError(f"sequence of {len(tokens)} tokens exceeds max_positions={config.max_positions}")
    if positions is None:
        positions = np.arange(len(tokens))
    x = _embed(tokens, positions, params, config)
    for layer in range(config.n_layers):
        q, k, v = _qkv(x, params, layer, config)
        x = _attn_out(causal_attention(q, k, v), x, params, layer, config)
        x = _mlp(x, params, layer, config)
    return _logits(x, params, config)


def prefill(tokens: Sequence[int], positions, params: DecoderParams, config: DecoderConfig):
    """Run the context through every layer; return per-layer ``(k, v)`` as ``[H, T, d]`` tensors."""
    x = _embed(tokens, positions, params, config)
    kv = []
    for layer in range(config.n_layers):
        q, k, v = _qkv(x, params, layer, config)
        kv.append((k, v))
        if layer + 1 < config.n_layers:
            # the last layer's outputs are never read by anyone
            x = _attn_out(causal_attention(q, k, v), x, params, layer, config)
            x = _mlp(x, params, layer, config)
    return kv


def _to_chunk_layout(t: Tensor) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(t.data, (1, 0, 2)))


def build_chunk_kv(
    chunk_tokens: Sequence[int],
    positions,
    params: DecoderParams,
    config: DecoderConfig,
    chunk_id: int = 0,
) -> ChunkKV:
    """Keys/values of a single chunk prefilled on its own at ``positions``."""
    if len(chunk_tokens) == 0:
        raise ValueError("cannot build KV for an empty chunk")
    if len(chunk_tokens) > config.chunk_len:
        raise ValueError(f"chunk of {len(chunk_tokens)} tokens exceeds chunk_len={config.chunk_len}")
    positions = np.asarray(positions, dtype=np.int64)
    if len(positions) != len(chunk_tokens):
        raise ValueError("positions and tokens differ in length")
    with no_grad():
        kv = prefill(chunk_tokens, positions, params, config)
    return ChunkKV(
        chunk_id=chunk_id,
        keys=[_to_chunk_layout(k) for k, _ in kv],
        values=[_to_chunk_layout(v) for _, v in kv],
        positions=positions,
        params_fingerprint=params.fingerprint(),
    )


def build_context_kv(
    segments: Sequence[tuple[int, Sequence[int]]],
    params: DecoderParams,
    config: DecoderConfig,
) -> list[ChunkKV]:
    """Prefill ``(chunk_id, tokens)`` segments and cut the result per chunk.

    Joint prefill runs one causal pass over the concatenation (positions
    ``0..C-1``); isolated prefill runs each chunk alone at positions
    ``0..n-1``.
    """
    out: list[ChunkKV] = []
    if config.prefill == "isolated":
        for cid, toks in segments:
            out.append(build_chunk_kv(toks, np.arange(len(toks)), params, config, chunk_id=cid))
        return out
    tokens = [t for _, toks in segments for t in toks]
    positions = np.arange(len(tokens))
    with no_grad():
        kv = prefill(tokens, positions, params, config)
    keys = [_to_chunk_layout(k) for k, _ in kv]
    values = [_to_chunk_layout(v) for _, v in kv]
    start = 0
    prefix: list[int] = []
    fp = params.fingerprint()
    for cid, toks in segments:
        stop = start + len(toks)
        out.append(
            ChunkKV(
                chunk_id=cid,
                keys=[k[start:stop].copy() for k in keys],
                values=[v[start:stop].copy() for v in values],
                positions=positions[start:stop].copy(),
                prefix_ids=tuple(prefix),
                params_fingerprint=fp,
            )
        )
        prefix.append(cid)
        start = stop
    return out


# -- memory route ---------------------------------------------------------------


def _context_kv_graph(segments, params: DecoderParams, config: DecoderConfig):
    """Per-layer context ``(k, v)`` tensors, kept on the autodiff graph."""
    if config.prefill == "joint":
        tokens = [t for _, toks in segments for t in toks]
        return prefill(tokens, np.arange(len(tokens)), params, config)
    parts = [prefill(toks, np.arange(len(toks)), params, config) for _, toks in segments]
    return [
        (T.concat([p[layer][0] for p in parts], axis=1), T.concat([p[layer][1] for p in parts], axis=1))
        for layer in range(config.n_layers)
    ]


def _context_kv_from_chunks(chunks: Sequence[ChunkKV]):
    n_layers = chunks[0].n_layers
    out = []
    for layer in range(n_layers):
        k = np.concatenate([c.keys[layer] for c in chunks], axis=0)
        v = np.concatenate([c.values[layer] for c in chunks], axis=0)
        out.append((Tensor(np.transpose(k, (1, 0, 2))), Tensor(np.transpose(v, (1, 0, 2)))))
    return out


def query_forward(
    query_tokens: Sequence[int],
    context_kv,
    token_weights,
    params: DecoderParams,
    config: DecoderConfig,
) -> Tensor:
    """Logits for the query segment given per-layer context keys/values."""
    n_ctx = context_kv[0][0].shape[1]
    n_q = len(query_tokens)
    if n_ctx + n_q > config.max_positions:
        raise ValueError(f"context ({n_ctx}) + query ({n_q}) exceeds max_positions={config.max_positions}")
    x = _embed(query_tokens, np.arange(n_ctx, n_ctx + n_q), params, config)
    for layer in range(config.n_layers):
        q, k, v = _qkv(x, params, layer, config)
        ck, cv = context_kv[layer]
        ctx = attend_epman(q, ck, cv, token_weights, k, v)
        x = _attn_out(ctx, x, params, layer, config)
        x = _mlp(x, params, layer, config)
    return _logits(x, params, config)


def _ordered(selection: "MemorySelection"):
    pairs = sorted(zip(selection.ids, selection.weights))
    return [p[0] for p in pairs], [p[1] for p in pairs]


def selection_inputs(selection: "MemorySelection", memory: "EpisodicMemory"):
    """Document-ordered ``(chunk_id, tokens)`` segments and the token weight vector."""
    from .epmem import broadcast_weights

    ids, weights = _ordered(selection)
    for cid in ids:
        if not memory.has_chunk(cid):
            raise KeyError(f"chunk {cid} is not in memory")
    segments = [(cid, memory.chunks[cid].token_ids) for cid in ids]
    token_weights = broadcast_weights(type(selection)(ids=ids, weights=weights, mode=selection.mode), memory)
    return segments, token_weights


def memory_context_kv(segments, memory: "EpisodicMemory", params: DecoderParams, config: DecoderConfig):
    """Context keys/values routed through the memory's KV tier (inference only).

    Entries are reused when their prefix, positions and weights fingerprint
    match; otherwise they are rebuilt and written back to the tier.
    """
    fp = params.fingerprint()
    cached: list[ChunkKV] = []
    offset = 0
    prefix: list[int] = []
    for cid, toks in segments:
        if config.prefill == "joint":
            want_pos, want_prefix = np.arange(offset, offset + len(toks)), tuple(prefix)
        else:
            want_pos, want_prefix = np.arange(len(toks)), ()
        entry = memory.kv_lookup(cid)
        if (
            entry is None
            or entry.params_fingerprint != fp
            or entry.prefix_ids != want_prefix
            or not np.array_equal(entry.positions, want_pos)
        ):
            cached = None
            break
        cached.append(entry)
        offset += len(toks)
        prefix.append(cid)
    if cached is None:
        for entry in build_context_kv(segments, params, config):
            memory.kv_put(entry.chunk_id, entry)
        cached = [memory.kv_get(cid) for cid, _ in segments]
    return _context_kv_from_chunks(cached)


def forward_with_memory(
    query_tokens: Sequence[int],
    selection: "MemorySelection",
    memory: "EpisodicMemory",
    params: DecoderParams,
    config: DecoderConfig,
    use_tier: bool | None = None,
) -> Tensor:
    """Query-segment logits ``[len(query_tokens), vocab]`` over the selected chunks.

    Chunks are placed in document order whatever order the selection lists
    them in, positions run contiguously over the concatenation, and every
    layer uses :func:`attend_epman` with the selection's broadcast weights.
    When gradients are being recorded the context is prefilled on the graph;
    otherwise (``use_tier`` defaults to that) the keys/values come from the
    memory's KV tier.
    """
    segments, token_weights = selection_inputs(selection, memory)
    if use_tier is None:
        use_tier = not (T.grad_enabled() and any(p.requires_grad for p in params))
    if use_tier:
        context_kv = memory_context_kv(segments, memory, params, config)
    else:
        context_kv = _context_kv_graph(segments, params, config)
    return query_forward(query_tokens, context_kv, token_weights, params, config)


def _argmax_lowest(row: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties
    return int(np.argmax(row))


def generate_greedy(
    query_tokens: Sequence[int],
    selection: "MemorySelection",
    memory: "EpisodicMemory",
    params: DecoderParams,
    config: DecoderConfig,
    max_new: int,
    eos_id: int = EOS,
) -> list[int]:
    """Argmax decoding on the memory route. The EOS token, if produced, is included."""
    if max_new < 1:
        raise ValueError("max_new must be at least 1")
    with no_grad():
        segments, token_weights = selection_inputs(selection, memory)
        context_kv = memory_context_kv(segments, memory, params, config)
        seq = list(query_tokens)
        out: list[int] = []
        for _ in range(max_new):
            logits = query_forward(seq, context_kv, token_weights, params, config)
            tok = _argmax_lowest(logits.data[-1])
            out.append(tok)
            if tok == eos_id:
                break
            seq.append(tok)
    return out


def generate_standard(
    tokens: Sequence[int],
    params: DecoderParams,
    config: DecoderConfig,
    max_new: int,
    eos_id: int = EOS,
) -> list[int]:
    """Argmax decoding with plain causal attention over ``tokens``."""
    if max_new < 1:
        raise ValueError("max_new must be at least 1")
    seq = list(tokens)
    out: list[int] = []
    with no_grad():
        for _ in range(max_new):
            tok = _argmax_lowest(forward_standard(seq, params, config).data[-1])
            out.append(tok)
            if tok == eos_id:
                break
            seq.append(tok)
    return out

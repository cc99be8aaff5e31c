"""Episodic memory: chunking, encodings, cosine read, selection modes, KV tier."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .decoder import ChunkKV
from .kvstore import KVTier, MissingEntryError, scan_spill_file
from .tensor import Tensor
from .tokenizer import SPECIAL_TOKENS, Tokenizer, split_sentences, words


class Mode(str, Enum):
    EXACT = "exact"
    NARROW = "narrow"
    BROAD = "broad"

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        if isinstance(value, Mode):
            return value
        key = value.strip().lower()
        aliases = {
            "exact": cls.EXACT,
            "narrow": cls.NARROW,
            "narrowattn": cls.NARROW,
            "uniform": cls.NARROW,
            "broad": cls.BROAD,
            "broadattn": cls.BROAD,
        }
        if key not in aliases:
            raise ValueError(f"unknown selection mode {value!r}")
        return aliases[key]


@dataclass
class Chunk:
    chunk_id: int
    token_ids: list[int]
    text: str
    doc_id: int = 0
    encoding: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class ReadResult:
    ids: list[int]
    scores: list[float]
    k: int


@dataclass
class MemorySelection:
    ids: list[int]
    weights: list[float]
    mode: Mode = Mode.NARROW

    def __post_init__(self):
        if len(self.ids) != len(self.weights):
            raise ValueError("ids and weights differ in length")


# -- chunking ---------------------------------------------------------------


def chunk_document(text: str, tokenizer: Tokenizer, chunk_len: int = 256, doc_id: int = 0) -> list[Chunk]:
    """Greedily pack whole sentences into chunks of at most ``chunk_len`` tokens.

    A sentence longer than ``chunk_len`` is cut into ``chunk_len``-token pieces.
    """
    if not text or not text.strip():
        raise ValueError("cannot chunk empty text")
    pieces: list[tuple[list[int], str]] = []
    for sent in split_sentences(text):
        ids = tokenizer.encode(sent)
        if not ids:
            continue
        if len(ids) <= chunk_len:
            pieces.append((ids, sent))
            continue
        for start in range(0, len(ids), chunk_len):
            part = ids[start : start + chunk_len]
            pieces.append((part, tokenizer.decode(part, skip_special=False)))
    chunks: list[Chunk] = []
    cur_ids: list[int] = []
    cur_text: list[str] = []
    for ids, sent in pieces:
        if cur_ids and len(cur_ids) + len(ids) > chunk_len:
            chunks.append(Chunk(len(chunks), cur_ids, " ".join(cur_text), doc_id))
            cur_ids, cur_text = [], []
        cur_ids = cur_ids + ids
        cur_text.append(sent)
    if cur_ids:
        chunks.append(Chunk(len(chunks), cur_ids, " ".join(cur_text), doc_id))
    if not chunks:
        raise ValueError("text produced no tokens")
    return chunks


# -- frozen encoder -------------------------------------------------------------


@dataclass(frozen=True)
class EmbedderConfig:
    """Signed feature hashing of word n-grams (a stand-in for a frozen retriever)."""

    d_enc: int = 256
    seed: int = 0
    ngrams: tuple[int, ...] = (1, 2)


@lru_cache(maxsize=1 << 16)
def _feature_slot(feature: str, d_enc: int, seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, key=seed.to_bytes(8, "little")).digest()
    h = int.from_bytes(digest, "little")
    return h % d_enc, (1.0 if (h >> 63) & 1 else -1.0)


def hashed_features(tokens: Sequence[str], config: EmbedderConfig) -> np.ndarray:
    vec = np.zeros(config.d_enc)
    for n in config.ngrams:
        for i in range(len(tokens) - n + 1):
            slot, sign = _feature_slot(" ".join(tokens[i : i + n]), config.d_enc, config.seed)
            vec[slot] += sign
    return vec


def encode_frozen(text_or_tokens, config: EmbedderConfig = EmbedderConfig(), tokenizer: Tokenizer | None = None) -> np.ndarray:
    """Unit-norm hashed n-gram encoding of a text (or of token ids via ``tokenizer``).

    Input that hashes to the zero vector (every feature cancelled) falls back
    to the unit vector along slot 0 so the output stays unit norm.
    """
    if isinstance(text_or_tokens, str):
        toks = words(text_or_tokens)
    else:
        if tokenizer is None:
            raise ValueError("token ids need a tokenizer to be encoded")
        toks = [tokenizer.itos[int(i)] for i in text_or_tokens]
    if not toks:
        raise ValueError("cannot encode empty input")
    vec = hashed_features(toks, config)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec = np.zeros(config.d_enc)
        vec[0] = 1.0
        return vec
    return vec / norm


# -- learnable read/write ---------------------------------------------------------


class MemoryMLP:
    """``y = x A + tanh(x C + c) B`` followed by L2 normalisation.

    ``A`` starts as the identity and ``B`` as zero, so a fresh MLP returns its
    (already unit-norm) input unchanged.
    """

    def __init__(self, d_enc: int, d_hidden: int = 64, seed: int = 0, prefix: str = "mlp"):
        rng = np.random.default_rng(seed)
        self.prefix = prefix
        self.params = {
            f"{prefix}.A": Tensor(np.eye(d_enc), requires_grad=True, name=f"{prefix}.A"),
            f"{prefix}.C": Tensor(rng.normal(0, 1 / np.sqrt(d_enc), (d_enc, d_hidden)), requires_grad=True, name=f"{prefix}.C"),
            f"{prefix}.c": Tensor(np.zeros(d_hidden), requires_grad=True, name=f"{prefix}.c"),
            f"{prefix}.B": Tensor(np.zeros((d_hidden, d_enc)), requires_grad=True, name=f"{prefix}.B"),
        }

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
        p = self.prefix
        y = x @ self.params[f"{p}.A"] + T.tanh(x @ self.params[f"{p}.C"] + self.params[f"{p}.c"]) @ self.params[f"{p}.B"]
        return l2_normalize_rows(y)

    def apply(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self(np.atleast_2d(x)).data

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"unexpected MLP parameter {k}")
            if self.params[k].shape != np.shape(v):
                raise ValueError(f"shape mismatch for {k}: {self.params[k].shape} vs {np.shape(v)}")
            self.params[k].data = np.array(v, dtype=np.float64)


def l2_normalize_rows(x: Tensor) -> Tensor:
    return x * T.power((x * x).sum(axis=-1, keepdims=True), -0.5)


# -- memory -------------------------------------------------------------------------


class EpisodicMemory:
    """Chunk table, encoding matrix, optional read/write MLPs and a KV tier."""

    def __init__(
        self,
        tokenizer: Tokenizer,
        embedder: EmbedderConfig = EmbedderConfig(),
        chunk_len: int = 256,
        read_mlp: MemoryMLP | None = None,
        write_mlp: MemoryMLP | None = None,
        kv_budget_bytes: int | None = None,
        spill_path: str | os.PathLike | None = None,
    ):
        self.tokenizer = tokenizer
        self.embedder = embedder
        self.chunk_len = chunk_len
        self.read_mlp = read_mlp
        self.write_mlp = write_mlp
        self.chunks: list[Chunk] = []
        self.encodings = np.zeros((0, embedder.d_enc))
        self.frozen_encodings = np.zeros((0, embedder.d_enc))
        self.kv = KVTier(kv_budget_bytes, spill_path)

    def __len__(self) -> int:
        return len(self.chunks)

    def has_chunk(self, chunk_id: int) -> bool:
        return 0 <= chunk_id < len(self.chunks)

    @classmethod
    def from_texts(cls, texts: Sequence[str], tokenizer: Tokenizer, use_mlp: bool = False, **kwargs) -> "EpisodicMemory":
        """Memory whose chunks are exactly ``texts`` (one chunk each, in order)."""
        mem = cls(tokenizer, **kwargs)
        chunks = []
        for i, text in enumerate(texts):
            ids = tokenizer.encode(text)
            if not ids:
                raise ValueError(f"chunk {i} has no tokens")
            if len(ids) > mem.chunk_len:
                raise ValueError(f"chunk {i} has {len(ids)} tokens, over chunk_len={mem.chunk_len}")
            chunks.append(Chunk(i, ids, text))
        mem.write(chunks, use_mlp=use_mlp)
        return mem

    def write(self, chunks: Sequence[Chunk], use_mlp: bool = False) -> "EpisodicMemory":
        """Append chunks (renumbered in table order) and their encodings."""
        if not chunks:
            raise ValueError("nothing to write")
        frozen = np.stack([encode_frozen(c.text or c.token_ids, self.embedder, self.tokenizer) for c in chunks])
        if frozen.shape[1] != self.embedder.d_enc:
            raise ValueError("encoding width does not match d_enc")
        enc = frozen
        if use_mlp:
            if self.write_mlp is None:
                raise ValueError("use_mlp=True but memory has no write MLP")
            enc = self.write_mlp.apply(frozen)
        start = len(self.chunks)
        for offset, (c, e) in enumerate(zip(chunks, enc)):
            self.chunks.append(dataclasses.replace(c, chunk_id=start + offset, encoding=e.copy()))
        self.encodings = np.vstack([self.encodings, enc])
        self.frozen_encodings = np.vstack([self.frozen_encodings, frozen])
        return self

    def reencode(self, use_mlp: bool) -> None:
        """Recompute the encoding matrix from the frozen encodings (after MLP training)."""
        enc = self.write_mlp.apply(self.frozen_encodings) if use_mlp else self.frozen_encodings.copy()
        self.encodings = enc
        for c, e in zip(self.chunks, enc):
            c.encoding = e.copy()

    def encode_query(self, query, use_mlp: bool = False) -> np.ndarray:
        q = encode_frozen(query, self.embedder, self.tokenizer)
        if use_mlp:
            if self.read_mlp is None:
                raise ValueError("use_mlp=True but memory has no read MLP")
            q = self.read_mlp.apply(q)[0]
        return q

    def scores(self, query, use_mlp: bool = False) -> np.ndarray:
        return self.encodings @ self.encode_query(query, use_mlp)

    def read(self, query, k: int = 5, use_mlp: bool = False) -> ReadResult:
        """Top-``k`` chunks by cosine similarity, ties to the lower chunk id."""
        if len(self.chunks) == 0:
            raise ValueError("memory is empty")
        if k < 1:
            raise ValueError("k must be at least 1")
        if isinstance(query, str) and not query.strip():
            raise ValueError("empty query")
        scores = self.scores(query, use_mlp)
        order = rank_scores(scores)
        k = min(k, len(order))
        top = order[:k]
        return ReadResult(ids=[int(i) for i in top], scores=[float(scores[i]) for i in top], k=k)

    # -- KV tier --

    def kv_put(self, chunk_id: int, entry: ChunkKV) -> None:
        if not self.has_chunk(chunk_id):
            raise KeyError(f"chunk {chunk_id} is not in memory")
        if entry.chunk_id != chunk_id:
            raise ValueError("entry chunk id does not match")
        if entry.n_tokens > self.chunk_len:
            raise ValueError("entry longer than chunk_len")
        self.kv.put(entry)

    def kv_get(self, chunk_id: int) -> ChunkKV:
        if not self.has_chunk(chunk_id):
            raise KeyError(f"chunk {chunk_id} is not in memory")
        return self.kv.get(chunk_id)

    def kv_lookup(self, chunk_id: int) -> ChunkKV | None:
        try:
            return self.kv_get(chunk_id)
        except MissingEntryError:
            return None

    def close(self) -> None:
        self.kv.close()

    # -- snapshots --

    def save_snapshot(self, manifest_path) -> Path:
        """Write a JSON manifest; KV entries are flushed to the spill file it references."""
        manifest_path = Path(manifest_path)
        index = self.kv.flush_index()
        resident = set(self.kv.resident_ids)
        doc = {
            "format": "EPMAN-MEM-v1",
            "chunk_len": self.chunk_len,
            "embedder": {"d_enc": self.embedder.d_enc, "seed": self.embedder.seed, "ngrams": list(self.embedder.ngrams)},
            "vocab": self.tokenizer.itos,
            "chunks": [
                {"chunk_id": c.chunk_id, "doc_id": c.doc_id, "text": c.text, "token_ids": c.token_ids}
                for c in self.chunks
            ],
            "encodings": self.encodings.tolist(),
            "frozen_encodings_sha256": hashlib.sha256(np.ascontiguousarray(self.frozen_encodings, "<f8").tobytes()).hexdigest(),
            "spill_file": os.path.relpath(self.kv.spill_path, manifest_path.parent) if index else None,
            "kv_index": [
                {"chunk_id": cid, "offset": off, "tier": "resident" if cid in resident else "spilled"}
                for cid, off in sorted(index.items())
            ],
        }
        manifest_path.write_text(json.dumps(doc, indent=1))
        return manifest_path

    @classmethod
    def load_snapshot(cls, manifest_path) -> "EpisodicMemory":
        manifest_path = Path(manifest_path)
        doc = json.loads(manifest_path.read_text())
        if doc.get("format") != "EPMAN-MEM-v1":
            raise ValueError(f"{manifest_path} is not an EPMAN-MEM-v1 manifest")
        emb = doc["embedder"]
        spill = manifest_path.parent / doc["spill_file"] if doc.get("spill_file") else None
        mem = cls(
            Tokenizer(doc["vocab"][len(SPECIAL_TOKENS):]),
            EmbedderConfig(emb["d_enc"], emb["seed"], tuple(emb["ngrams"])),
            chunk_len=doc["chunk_len"],
            spill_path=spill,
        )
        enc = np.asarray(doc["encodings"], dtype=np.float64).reshape(-1, emb["d_enc"])
        for c, e in zip(doc["chunks"], enc):
            mem.chunks.append(Chunk(c["chunk_id"], c["token_ids"], c["text"], c["doc_id"], e.copy()))
        mem.encodings = enc
        mem.frozen_encodings = np.stack(
            [encode_frozen(c.text or c.token_ids, mem.embedder, mem.tokenizer) for c in mem.chunks]
        ) if mem.chunks else np.zeros((0, emb["d_enc"]))
        if spill is not None:
            mem.kv.adopt({e["chunk_id"]: e["offset"] for e in doc["kv_index"]})
        return mem


def rank_scores(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; equal scores keep ascending index order."""
    ids = np.arange(len(scores))
    return np.lexsort((ids, -np.asarray(scores)))


def make_selection(read_result: ReadResult, mode, memory: "EpisodicMemory | int", radius: int = 1) -> MemorySelection:
    """Turn a read into document-ordered chunk ids with weights.

    ``exact`` keeps the top-K scores (clamped to ``[0, 1]``) as weights,
    ``narrow`` gives the top-K weight one, and ``broad`` additionally pulls
    in neighbours within ``radius`` of every top-K chunk, also at weight one.
    """
    mode = Mode.parse(mode)
    n_chunks = memory if isinstance(memory, int) else len(memory)
    if mode is Mode.EXACT:
        pairs = sorted(
            (cid, float(np.clip(s, 0.0, 1.0))) for cid, s in zip(read_result.ids, read_result.scores)
        )
        return MemorySelection([p[0] for p in pairs], [p[1] for p in pairs], mode)
    ids = set(read_result.ids)
    if mode is Mode.BROAD:
        for cid in read_result.ids:
            for d in range(1, radius + 1):
                for nb in (cid - d, cid + d):
                    if 0 <= nb < n_chunks:
                        ids.add(nb)
    ordered = sorted(ids)
    return MemorySelection(ordered, [1.0] * len(ordered), mode)


def broadcast_weights(selection: MemorySelection, memory: EpisodicMemory) -> np.ndarray:
    """Token-level weights over the document-ordered concatenation of the selection."""
    pairs = sorted(zip(selection.ids, selection.weights))
    parts = []
    for cid, w in pairs:
        if not memory.has_chunk(cid):
            raise KeyError(f"chunk {cid} is not in memory")
        parts.append(np.full(len(memory.chunks[cid].token_ids), float(w)))
    return np.concatenate(parts) if parts else np.zeros(0)


def inspect_snapshot(manifest_path) -> dict:
    """Summary of a memory snapshot; verifies every spill record's checksum."""
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    info = {
        "chunks": len(doc["chunks"]),
        "tokens": sum(len(c["token_ids"]) for c in doc["chunks"]),
        "d_enc": doc["embedder"]["d_enc"],
        "kv_entries": len(doc["kv_index"]),
        "resident": sum(e["tier"] == "resident" for e in doc["kv_index"]),
        "spilled": sum(e["tier"] == "spilled" for e in doc["kv_index"]),
        "spill_records_verified": 0,
    }
    if doc.get("spill_file"):
        info["spill_records_verified"] = len(scan_spill_file(manifest_path.parent / doc["spill_file"]))
    return info

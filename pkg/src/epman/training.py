"""Losses, noisy relevance weights, Adam, and the two training phases."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .datagen import GeneratedEpisode
from .decoder import DecoderConfig, DecoderParams, forward_with_memory
from .epmem import EmbedderConfig, EpisodicMemory, MemoryMLP, MemorySelection, Mode, l2_normalize_rows, make_selection
from .tensor import Tensor
from .tokenizer import ANSWER, EOS, QUERY, Tokenizer

log = logging.getLogger(__name__)

METRIC_FIELDS = ["phase", "epoch", "loss", "episodic_loss", "retrieval_top1", "eval_recall"]


@dataclass
class TrainingExample:
    """Query ``q``, ordered context chunks ``C``, relevant position ``l``, answer ``a``."""

    query: str
    chunks: list[str]
    relevant_index: int
    answer: str
    weights: list[float] | None = None

    def __post_init__(self):
        if not 0 <= self.relevant_index < len(self.chunks):
            raise ValueError(f"relevant_index {self.relevant_index} outside 0..{len(self.chunks) - 1}")
        if self.weights is not None and len(self.weights) != len(self.chunks):
            raise ValueError("one weight per chunk is required")

    @classmethod
    def from_episode(cls, ep: GeneratedEpisode) -> "TrainingExample":
        return cls(ep.query, list(ep.chunks), ep.relevant_index, ep.gold_answer)


@dataclass
class NoiseConfig:
    """Noisy top-K weights drawn from ``Uniform[low, 1]``.

    ``low = 1 - beta * k * scale``. With the default ``scale=0.1`` the
    defaults ``beta=0.2, k=5`` give the interval ``[0.9, 1.0]``.
    """

    k: int = 5
    beta: float = 0.2
    permute: bool = True
    seed: int = 0
    scale: float = 0.1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.low < 0:
            raise ValueError(f"1 - beta*k*scale = {self.low} is negative")

    @property
    def low(self) -> float:
        return 1.0 - self.beta * self.k * self.scale


def sample_noisy_weights(config: NoiseConfig, rng: np.random.Generator) -> np.ndarray:
    """``k`` i.i.d. draws from ``Uniform[low, 1]``."""
    if config.low == 1.0:
        return np.ones(config.k)
    return rng.uniform(config.low, 1.0, size=config.k)


def permute_episode(example: TrainingExample, rng: np.random.Generator | None = None, perm=None) -> TrainingExample:
    """Reorder chunks; ``relevant_index`` (and any per-chunk weights) follow them.

    New position ``i`` holds old chunk ``perm[i]``.
    """
    n = len(example.chunks)
    perm = rng.permutation(n) if perm is None else np.asarray(perm)
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("perm is not a permutation")
    new_l = int(np.nonzero(perm == example.relevant_index)[0][0])
    return TrainingExample(
        example.query,
        [example.chunks[i] for i in perm],
        new_l,
        example.answer,
        None if example.weights is None else [example.weights[i] for i in perm],
    )


# -- losses ------------------------------------------------------------------------


def episodic_loss(scores: Tensor, relevant_index: int, temperature: float = 1.0) -> Tensor:
    """Cross-entropy between ``softmax(scores / temperature)`` and a one-hot at ``relevant_index``.

    At temperature 1 the cosine scores span at most 2 nats, so the loss is
    dominated by the many easy distractors; a lower temperature concentrates
    it on the chunks that actually compete with the relevant one.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scores = T.as_tensor(scores)
    n = scores.shape[-1]
    if n < 2:
        raise ValueError("episode needs at least two chunks")
    if not 0 <= relevant_index < n:
        raise IndexError(f"relevant_index {relevant_index} outside 0..{n - 1}")
    if temperature != 1.0:
        scores = scores * (1.0 / temperature)
    return -T.log_softmax(scores.reshape(1, n), axis=-1)[0, relevant_index]


def decoder_nll_loss(logits: Tensor, answer_tokens: Sequence[int]) -> Tensor:
    """Mean NLL of ``answer_tokens`` predicted by the last ``len(answer_tokens)`` logit rows."""
    n = len(answer_tokens)
    if n == 0:
        raise ValueError("answer must not be empty")
    if n > logits.shape[0]:
        raise ValueError("more answer tokens than logit rows")
    rows = logits[logits.shape[0] - n :]
    return T.cross_entropy(rows, answer_tokens)


def query_segment(tokenizer: Tokenizer, query: str, answer: str | None = None) -> tuple[list[int], list[int]]:
    """Decoder input for a query, and the answer targets (``answer`` + EOS).

    Input is ``<q> query <a> answer`` (teacher forcing); the final row of the
    logits predicts EOS.
    """
    seq = [QUERY] + tokenizer.encode(query) + [ANSWER]
    if answer is None:
        return seq, []
    ans = tokenizer.encode(answer)
    return seq + ans, ans + [EOS]


def encode_episode_scores(example: TrainingExample, memory_ops: "MemoryOps") -> Tensor:
    """Cosine scores of every chunk against the query, on the graph of the MLPs."""
    emb = memory_ops.embedder
    from .epmem import encode_frozen

    chunk_enc = np.stack([encode_frozen(c, emb) for c in example.chunks])
    q_enc = encode_frozen(example.query, emb)[None, :]
    chunks = memory_ops.write_mlp(chunk_enc)
    query = memory_ops.read_mlp(q_enc)
    return (chunks @ query.T).reshape(len(example.chunks))


@dataclass
class MemoryOps:
    """Embedder plus the learnable read/write MLPs."""

    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    d_hidden: int = 64
    seed: int = 0
    read_mlp: MemoryMLP | None = None
    write_mlp: MemoryMLP | None = None

    def __post_init__(self):
        if self.read_mlp is None:
            self.read_mlp = MemoryMLP(self.embedder.d_enc, self.d_hidden, self.seed, prefix="read")
        if self.write_mlp is None:
            self.write_mlp = MemoryMLP(self.embedder.d_enc, self.d_hidden, self.seed + 1, prefix="write")

    def tensors(self) -> list[Tensor]:
        return self.read_mlp.tensors() + self.write_mlp.tensors()

    def state(self) -> dict[str, np.ndarray]:
        return {**self.read_mlp.state(), **self.write_mlp.state()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.read_mlp.load_state({k: v for k, v in state.items() if k.startswith("read.")})
        self.write_mlp.load_state({k: v for k, v in state.items() if k.startswith("write.")})


# -- optimiser -------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def optimizer_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimizerState) -> None:
    """Bias-corrected Adam update, in place. ``None`` gradients count as zero."""
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter is required")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


# -- one example ----------------------------------------------------------------------


def _episode_memory(example: TrainingExample, tokenizer: Tokenizer, memory_ops: MemoryOps | None, use_mlp: bool, chunk_len: int) -> EpisodicMemory:
    kwargs = {}
    if memory_ops is not None:
        kwargs = dict(embedder=memory_ops.embedder, read_mlp=memory_ops.read_mlp, write_mlp=memory_ops.write_mlp)
    return EpisodicMemory.from_texts(example.chunks, tokenizer, use_mlp=use_mlp, chunk_len=chunk_len, **kwargs)


def training_selection(
    memory: EpisodicMemory,
    example: TrainingExample,
    noise: NoiseConfig,
    rng: np.random.Generator,
    uniform: bool = False,
    use_mlp: bool = False,
    mode: Mode | str = Mode.NARROW,
) -> MemorySelection:
    """Top-K read with the relevant chunk forced in, carrying noisy (or unit) weights.

    A missing relevant chunk replaces the lowest-ranked retrieved one.
    """
    read = memory.read(example.query, noise.k, use_mlp=use_mlp)
    ids = list(read.ids)
    if example.relevant_index not in ids:
        ids[-1] = example.relevant_index
    if Mode.parse(mode) is Mode.BROAD:
        ids = make_selection(dataclasses.replace(read, ids=ids), Mode.BROAD, memory).ids
    if uniform:
        weights = np.ones(len(ids))
    else:
        weights = sample_noisy_weights(noise, rng)
        if len(ids) != noise.k:
            # broad selections (or clipped reads) draw from the same interval
            weights = rng.uniform(noise.low, 1.0, size=len(ids)) if noise.low < 1.0 else np.ones(len(ids))
        if not np.all((weights >= noise.low) & (weights <= 1.0)):
            raise AssertionError("noisy weight outside [low, 1]")
    return MemorySelection([int(i) for i in ids], [float(w) for w in weights], Mode.parse(mode))


def total_loss(
    example: TrainingExample,
    params: DecoderParams,
    config: DecoderConfig,
    tokenizer: Tokenizer,
    noise: NoiseConfig,
    rng: np.random.Generator,
    memory_ops: MemoryOps | None = None,
    alpha: float = 0.1,
    memory_trainable: bool = False,
    uniform: bool = False,
    selection: MemorySelection | None = None,
    train_mode: Mode | str = Mode.NARROW,
    temperature: float = 1.0,
) -> tuple[Tensor, dict]:
    """``alpha * episodic + nll``; the episodic term only when read/write are trainable.

    Returns the loss and a dict of its parts (floats) plus the selection used.
    """
    use_mlp = memory_trainable and memory_ops is not None
    memory = _episode_memory(example, tokenizer, memory_ops, use_mlp, config.chunk_len)
    try:
        if selection is None:
            selection = training_selection(memory, example, noise, rng, uniform, use_mlp, train_mode)
        seq, targets = query_segment(tokenizer, example.query, example.answer)
        logits = forward_with_memory(seq, selection, memory, params, config, use_tier=False)
        nll = decoder_nll_loss(logits, targets)
    finally:
        memory.close()
    parts = {"nll": nll.item(), "episodic": 0.0, "selection": selection}
    if use_mlp and alpha != 0.0:
        ep = episodic_loss(encode_episode_scores(example, memory_ops), example.relevant_index, temperature)
        parts["episodic"] = ep.item()
        return nll + ep * alpha, parts
    return nll, parts


# -- phases ------------------------------------------------------------------------------


@dataclass
class PhaseResult:
    metrics: list[dict]
    weights_log: list[list[float]] = field(default_factory=list)


def retrieval_top1(examples: Sequence[TrainingExample], memory_ops: MemoryOps | None, use_mlp: bool) -> float:
    """Fraction of examples whose highest-scoring chunk is the relevant one."""
    if not examples:
        return float("nan")
    from .epmem import encode_frozen, rank_scores

    hits = 0
    emb = memory_ops.embedder if memory_ops else EmbedderConfig()
    for ex in examples:
        enc = np.stack([encode_frozen(c, emb) for c in ex.chunks])
        q = encode_frozen(ex.query, emb)
        if use_mlp:
            enc = memory_ops.write_mlp.apply(enc)
            q = memory_ops.read_mlp.apply(q)[0]
        hits += int(rank_scores(enc @ q)[0] == ex.relevant_index)
    return hits / len(examples)


def train_phase1(
    dataset: Sequence[TrainingExample],
    memory_ops: MemoryOps,
    epochs: int,
    optimizer: OptimizerState,
    heldout: Sequence[TrainingExample] = (),
    seed: int = 0,
    batch_size: int = 16,
    metrics_path=None,
    temperature: float = 1.0,
) -> PhaseResult:
    """Fit the read/write MLPs to the episodic loss; the decoder is not touched."""
    if not dataset:
        raise ValueError("empty dataset")
    params = memory_ops.tensors()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    metrics = []
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            for p in params:
                p.grad = None
            for i in batch:
                loss = episodic_loss(
                    encode_episode_scores(dataset[i], memory_ops), dataset[i].relevant_index, temperature
                )
                (loss * (1.0 / len(batch))).backward()
                total += loss.item()
                count += 1
            optimizer_step(params, [p.grad for p in params], optimizer)
        row = {
            "phase": 1,
            "epoch": epoch + 1,
            "loss": total / count,
            "episodic_loss": total / count,
            "retrieval_top1": retrieval_top1(heldout, memory_ops, True) if heldout else float("nan"),
            "eval_recall": float("nan"),
        }
        metrics.append(row)
        log.info("phase1 epoch %d loss %.4f top1 %.3f", row["epoch"], row["loss"], row["retrieval_top1"])
        _append_metrics(metrics_path, row)
    for p in params:
        p.grad = None
    return PhaseResult(metrics)


def train_phase2(
    dataset: Sequence[TrainingExample],
    params: DecoderParams,
    config: DecoderConfig,
    tokenizer: Tokenizer,
    epochs: int,
    noise: NoiseConfig,
    optimizer: OptimizerState,
    memory_ops: MemoryOps | None = None,
    use_mlp: bool = False,
    uniform: bool = False,
    batch_size: int = 8,
    clip_norm: float = 1.0,
    train_mode: Mode | str = Mode.NARROW,
    eval_fn: Callable[[int], float] | None = None,
    metrics_path=None,
    log_weights: bool = False,
    start_epoch: int = 0,
    on_epoch_end: Callable[[int], None] | None = None,
    weights_log: list | None = None,
) -> PhaseResult:
    """Decoder-only training on the noisy (or uniform) relevance scheme.

    Per example: optionally permute the chunks, read top-K (relevant chunk
    forced in), attach noisy or unit weights, run the memory route and step on
    the answer NLL. Read/write MLPs are never updated here. With
    ``log_weights`` every training selection's weights are appended to
    ``weights_log`` (a fresh list if none is passed).
    """
    if not dataset:
        raise ValueError("empty dataset")
    tensors = list(params)
    metrics = []
    if weights_log is None:
        weights_log = []
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng(np.random.SeedSequence(noise.seed, spawn_key=(2, epoch)))
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            params.zero_grad()
            for i in batch:
                ex = dataset[i]
                if noise.permute:
                    ex = permute_episode(ex, rng)
                loss, parts = total_loss(
                    ex, params, config, tokenizer, noise, rng,
                    memory_ops=memory_ops, alpha=0.0, memory_trainable=use_mlp,
                    uniform=uniform, train_mode=train_mode,
                )
                if log_weights:
                    weights_log.append(list(parts["selection"].weights))
                (loss * (1.0 / len(batch))).backward()
                total += parts["nll"]
                count += 1
            clip_grad_norm(tensors, clip_norm)
            optimizer_step(tensors, [p.grad for p in tensors], optimizer)
            params.version += 1
        params.zero_grad()
        if not params.all_finite():
            raise FloatingPointError("non-finite decoder parameter after update")
        row = {
            "phase": 2,
            "epoch": epoch + 1,
            "loss": total / count,
            "episodic_loss": float("nan"),
            "retrieval_top1": float("nan"),
            "eval_recall": eval_fn(epoch) if eval_fn else float("nan"),
        }
        metrics.append(row)
        log.info("phase2 epoch %d loss %.4f recall %.3f", row["epoch"], row["loss"], row["eval_recall"])
        _append_metrics(metrics_path, row)
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1)
    return PhaseResult(metrics, weights_log)


def _append_metrics(path, row: dict) -> None:
    if path is None:
        return
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in METRIC_FIELDS})

"""Recall/F1 scoring, EpMAN and baseline evaluation runs, ablation grids and reports."""

from __future__ import annotations

import csv
import re
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .datagen import GeneratedEpisode
from .decoder import generate_greedy, generate_standard
from .epmem import EpisodicMemory, MemorySelection, Mode, ReadResult, make_selection
from .training import query_segment

REPORT_FIELDS = ["system", "train_scheme", "mode", "K", "dataset", "n", "metric", "score", "seed", "checkpoint"]
SYSTEMS = ("epman", "baseline_full_context", "baseline_rag_concat")

_PUNCT_RE = re.compile(f"[{re.escape(string.punctuation)}]")


def normalize_answer(text: str) -> str:
    """Lower-case, drop punctuation, collapse whitespace."""
    return " ".join(_PUNCT_RE.sub(" ", text.lower()).split())


def recall_score(prediction: str, gold: str) -> int:
    """1 iff the normalised gold answer occurs in the normalised prediction."""
    g = normalize_answer(gold)
    return int(g in normalize_answer(prediction))


def token_f1(prediction: str, gold: str) -> float:
    p, g = normalize_answer(prediction).split(), normalize_answer(gold).split()
    if not p or not g:
        return 0.0
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


# -- runs -----------------------------------------------------------------------------


@dataclass
class EvalRun:
    dataset: str
    mode: str
    system: str
    k: int
    checkpoint: str
    seed: int = 0
    train_scheme: str = ""
    metric: str = "recall"
    records: list[dict] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.records)

    def mean(self, metric: str | None = None) -> float:
        """Mean per-episode score as a percentage in ``[0, 100]``."""
        key = metric or self.metric
        if not self.records:
            return float("nan")
        return 100.0 * float(np.mean([r[key] for r in self.records]))

    @property
    def aggregate(self) -> float:
        return self.mean()

    def row(self, metric: str | None = None) -> dict:
        return {
            "system": self.system,
            "train_scheme": self.train_scheme,
            "mode": self.mode,
            "K": self.k,
            "dataset": self.dataset,
            "n": self.n,
            "metric": metric or self.metric,
            "score": f"{self.mean(metric):.1f}",
            "seed": self.seed,
            "checkpoint": self.checkpoint[:16],
        }


@dataclass
class MemoryBuilder:
    """Builds a fresh episodic memory for an episode, with the checkpoint's read/write ops.

    ``kv_budget_bytes=0`` spills every KV entry to disk as soon as it is written.
    """

    ckpt: Checkpoint
    use_mlp: bool = False
    kv_budget_bytes: int | None = None

    def __call__(self, episode: GeneratedEpisode) -> EpisodicMemory:
        kwargs = {}
        ops = self.ckpt.memory_ops
        if ops is not None:
            kwargs = dict(embedder=ops.embedder, read_mlp=ops.read_mlp, write_mlp=ops.write_mlp)
        return EpisodicMemory.from_texts(
            episode.chunks,
            self.ckpt.tokenizer,
            use_mlp=self.use_mlp,
            chunk_len=self.ckpt.config.chunk_len,
            kv_budget_bytes=self.kv_budget_bytes,
            **kwargs,
        )


@dataclass
class RankNoise:
    """Puts the relevant chunk at a uniformly drawn rank inside the top-K.

    The top-K score list (descending) is kept; the relevant chunk takes the
    score of its drawn rank and the other retrieved chunks shift to fill the
    remaining ranks in their original order.
    """

    seed: int = 0

    def apply(self, read: ReadResult, relevant: int, index: int) -> ReadResult:
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(index,)))
        rank = int(rng.integers(read.k))
        others = [i for i in read.ids if i != relevant][: read.k - 1]
        ids = others[:rank] + [relevant] + others[rank:]
        return ReadResult(ids=ids, scores=list(read.scores), k=read.k)


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _score_record(ckpt: Checkpoint, episode: GeneratedEpisode, out_ids: Sequence[int], **extra) -> dict:
    prediction = ckpt.tokenizer.decode(out_ids)
    return {
        "prediction": prediction,
        "gold": episode.gold_answer,
        "recall": recall_score(prediction, episode.gold_answer),
        "f1": token_f1(prediction, episode.gold_answer),
        **extra,
    }


def epman_selection(
    episode: GeneratedEpisode,
    memory: EpisodicMemory,
    mode,
    k: int,
    use_mlp: bool = False,
    rank_noise: RankNoise | None = None,
    index: int = 0,
) -> MemorySelection:
    read = memory.read(episode.query, k, use_mlp=use_mlp)
    if rank_noise is not None:
        read = rank_noise.apply(read, episode.relevant_index, index)
    return make_selection(read, mode, memory)


def run_epman_eval(
    episodes: Sequence[GeneratedEpisode],
    ckpt: Checkpoint,
    mode="narrow",
    k: int = 5,
    memory_builder: Callable[[GeneratedEpisode], EpisodicMemory] | None = None,
    use_mlp: bool = False,
    rank_noise: RankNoise | None = None,
    max_new: int = 16,
    dataset: str = "dataset",
    train_scheme: str = "",
    seed: int = 0,
    threads: int = 1,
) -> EvalRun:
    """Per episode: build memory, read top-K, select by mode, generate greedily, score."""
    mode = Mode.parse(mode)
    builder = memory_builder or MemoryBuilder(ckpt, use_mlp)

    def one(item):
        i, ep = item
        memory = builder(ep)
        try:
            selection = epman_selection(ep, memory, mode, k, use_mlp, rank_noise, i)
            seq, _ = query_segment(ckpt.tokenizer, ep.query)
            out = generate_greedy(seq, selection, memory, ckpt.params, ckpt.config, max_new)
        finally:
            memory.close()
        return _score_record(
            ckpt, ep, out, selection=list(selection.ids), weights=list(selection.weights), output_ids=out
        )

    run = EvalRun(dataset, mode.value, "epman", k, ckpt.fingerprint(), seed, train_scheme)
    run.records = _map(one, list(enumerate(episodes)), threads)
    return run


def truncate_middle(tokens: Sequence[int], budget: int) -> list[int]:
    """Keep everything if it fits, else the first ``budget // 2`` and last ``budget - budget // 2`` tokens."""
    tokens = list(tokens)
    if budget < 0:
        raise ValueError("budget must be non-negative")
    if len(tokens) <= budget:
        return tokens
    head = budget // 2
    tail = budget - head
    return tokens[:head] + (tokens[len(tokens) - tail :] if tail else [])


def full_context_tokens(episode: GeneratedEpisode, ckpt: Checkpoint, max_new: int = 16) -> list[int]:
    seq, _ = query_segment(ckpt.tokenizer, episode.query)
    ctx = [t for c in episode.chunks for t in ckpt.tokenizer.encode(c)]
    budget = ckpt.config.max_positions - len(seq) - max_new
    return truncate_middle(ctx, budget) + seq


def run_baseline_full_context(
    episodes: Sequence[GeneratedEpisode],
    ckpt: Checkpoint,
    max_new: int = 16,
    dataset: str = "dataset",
    train_scheme: str = "",
    seed: int = 0,
    threads: int = 1,
) -> EvalRun:
    """Whole episode in context (middle-truncated when over budget), standard attention."""

    def one(ep):
        out = generate_standard(full_context_tokens(ep, ckpt, max_new), ckpt.params, ckpt.config, max_new)
        return _score_record(ckpt, ep, out, output_ids=out)

    run = EvalRun(dataset, "full", "baseline_full_context", len(episodes[0].chunks) if episodes else 0,
                  ckpt.fingerprint(), seed, train_scheme)
    run.records = _map(one, list(episodes), threads)
    return run


def rag_concat_tokens(episode: GeneratedEpisode, ids: Sequence[int], ckpt: Checkpoint) -> list[int]:
    seq, _ = query_segment(ckpt.tokenizer, episode.query)
    return [t for i in sorted(ids) for t in ckpt.tokenizer.encode(episode.chunks[i])] + seq


def run_baseline_rag_concat(
    episodes: Sequence[GeneratedEpisode],
    ckpt: Checkpoint,
    k: int = 5,
    memory_builder: Callable[[GeneratedEpisode], EpisodicMemory] | None = None,
    use_mlp: bool = False,
    max_new: int = 16,
    dataset: str = "dataset",
    train_scheme: str = "",
    seed: int = 0,
    threads: int = 1,
) -> EvalRun:
    """Top-K chunks concatenated in document order, plain causal attention, no weights."""
    builder = memory_builder or MemoryBuilder(ckpt, use_mlp)

    def one(ep):
        memory = builder(ep)
        try:
            ids = memory.read(ep.query, k, use_mlp=use_mlp).ids
        finally:
            memory.close()
        out = generate_standard(rag_concat_tokens(ep, ids, ckpt), ckpt.params, ckpt.config, max_new)
        return _score_record(ckpt, ep, out, selection=sorted(ids), output_ids=out)

    run = EvalRun(dataset, "concat", "baseline_rag_concat", k, ckpt.fingerprint(), seed, train_scheme)
    run.records = _map(one, list(episodes), threads)
    return run


def topk_retrieval_accuracy(
    episodes: Sequence[GeneratedEpisode],
    memory_builder: Callable[[GeneratedEpisode], EpisodicMemory],
    k: int = 5,
    use_mlp: bool = False,
) -> dict:
    """Fractions of episodes whose relevant chunk is ranked first / within the top ``k``."""
    top1 = topk = 0
    for ep in episodes:
        memory = memory_builder(ep)
        try:
            ids = memory.read(ep.query, max(k, 1), use_mlp=use_mlp).ids
        finally:
            memory.close()
        top1 += int(ids[0] == ep.relevant_index)
        topk += int(ep.relevant_index in ids)
    n = max(len(episodes), 1)
    return {"top1": top1 / n, "topk": topk / n, "k": k, "n": len(episodes)}


def ablation_grid(
    datasets: Mapping[str, Sequence[GeneratedEpisode]],
    modes: Sequence,
    schemes: Mapping[str, Checkpoint],
    k_values: Sequence[int],
    use_mlp: bool = False,
    rank_noise: RankNoise | None = None,
    max_new: int = 16,
    seed: int = 0,
    threads: int = 1,
) -> list[EvalRun]:
    """Every (scheme, mode, K, dataset) combination, in that nesting order."""
    runs = []
    for scheme, ckpt in schemes.items():
        for mode in modes:
            for k in k_values:
                for name, episodes in datasets.items():
                    runs.append(
                        run_epman_eval(
                            episodes, ckpt, mode, k, use_mlp=use_mlp, rank_noise=rank_noise, max_new=max_new,
                            dataset=name, train_scheme=scheme, seed=seed, threads=threads,
                        )
                    )
    return runs


# -- judge prompts and reports -----------------------------------------------------------


def judge_template() -> str:
    return resources.files("epman").joinpath("judge_prompt.txt").read_text(encoding="utf-8")


def emit_judge_prompt(prediction: str, gold: str) -> str:
    """The pairwise answer-similarity prompt with both answers filled in. No model is called."""
    return judge_template().replace("<<generated answer>>", prediction).replace("<<gold answer>>", gold)


def write_judge_prompts(run: EvalRun, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, rec in enumerate(run.records):
        p = directory / f"{run.dataset}_{run.system}_{run.mode}_k{run.k}_{i:05d}.txt"
        p.write_text(emit_judge_prompt(rec["prediction"], rec["gold"]), encoding="utf-8")
        paths.append(p)
    return paths


def report_rows(runs: Sequence[EvalRun], metrics: Sequence[str] | None = None) -> list[dict]:
    rows = []
    for run in runs:
        for metric in metrics or [run.metric]:
            rows.append(run.row(metric))
    return rows


def write_report(runs: Sequence[EvalRun], path, metrics: Sequence[str] | None = None) -> tuple[Path, Path]:
    """CSV at ``path`` (``.csv`` added if missing) and a Markdown table next to it."""
    path = Path(path)
    if path.suffix != ".csv":
        path = path.with_suffix(".csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = report_rows(runs, metrics)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    md = path.with_suffix(".md")
    md.write_text(markdown_table(rows), encoding="utf-8")
    return path, md


def load_report(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["K"] = int(r["K"])
        r["n"] = int(r["n"])
        r["seed"] = int(r["seed"])
    return rows


def markdown_table(rows: Sequence[dict]) -> str:
    """Systems (and training scheme) down the side, ``mode/K/dataset/metric`` settings across."""
    systems, settings, cells = [], [], {}
    for r in rows:
        sys_key = r["system"] + (f" ({r['train_scheme']})" if r["train_scheme"] else "")
        setting = f"{r['mode']} K={r['K']} {r['dataset']} {r['metric']}"
        if sys_key not in systems:
            systems.append(sys_key)
        if setting not in settings:
            settings.append(setting)
        cells[(sys_key, setting)] = r["score"]
    lines = ["| system | " + " | ".join(settings) + " |", "|---|" + "---|" * len(settings)]
    for s in systems:
        lines.append(f"| {s} | " + " | ".join(cells.get((s, c), "") for c in settings) + " |")
    return "\n".join(lines) + "\n"

"""Flat ``key = value`` run configuration.

A config file is one ``key = value`` per line; ``#`` starts a comment. Values
are parsed by the type of the key's default. Unknown keys are errors, both in
files and in overrides, and overrides are applied after file values.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Option:
    default: Any
    help: str
    kind: type = str  # int, float, bool, str, list


def _o(default, help, kind=None):
    return Option(default, help, kind or type(default))


OPTIONS: dict[str, Option] = {
    # shared
    "seed": _o(0, "master seed; every random stream is spawned from it"),
    "out": _o("epman_out", "output directory (EPMAN_OUT overrides the config file value)"),
    "threads": _o(os.cpu_count() or 1, "worker cap for per-episode evaluation"),
    # datagen
    "kind": _o("needle", "episode kind: needle, fact or split"),
    "n": _o(200, "number of episodes"),
    "chunks": _o(16, "chunks per episode"),
    "chunk_len": _o(256, "maximum tokens per chunk"),
    "hard_negatives": _o(0, "hard-negative chunks per fact episode"),
    "unrelated_facts": _o(3, "unrelated fact chunks per fact episode"),
    "cfi": _o(False, "insert a confusing near-duplicate fact"),
    "kpr": _o(False, "replace the answer entity everywhere"),
    "vary_completion": _o(False, "randomise the needle completion per episode"),
    "name": _o("", "dataset / report base name (default derived from kind or inputs)"),
    # model
    "n_layers": _o(2, "decoder layers"),
    "d_model": _o(64, "decoder width"),
    "n_heads": _o(2, "attention heads"),
    "d_ff": _o(128, "feed-forward width"),
    "max_positions": _o(0, "position table size (0: chunk_len * episode_size + 64)"),
    "episode_size": _o(16, "chunks per episode the model is sized for"),
    "prefill": _o("joint", "context prefill: joint (exact) or isolated"),
    "d_enc": _o(256, "chunk/query encoding width"),
    "d_hidden": _o(64, "read/write MLP hidden width"),
    # training
    "dataset": _o("", "training dataset (JSON Lines)"),
    "heldout": _o("", "held-out dataset for per-epoch metrics"),
    "scheme": _o("noisy", "relevance weights during decoder training: noisy or uniform"),
    "phase": _o("both", "training phases to run: 1, 2 or both"),
    "epochs1": _o(5, "phase-1 (read/write) epochs"),
    "epochs2": _o(5, "phase-2 (decoder) epochs"),
    "k": _o(5, "top-K chunks read from memory"),
    "beta": _o(0.2, "noise slope; weights ~ Uniform[1 - beta*k*beta_scale, 1]"),
    "beta_scale": _o(0.1, "scale on beta*k (0.1 gives [0.9, 1] at the defaults)"),
    "alpha": _o(0.1, "weight of the episodic loss"),
    "permute": _o(True, "permute episode chunks during decoder training"),
    "lr": _o(1e-3, "Adam learning rate"),
    "lr1": _o(1e-3, "phase-1 learning rate"),
    "temperature": _o(1.0, "softmax temperature of the episodic loss"),
    "batch_size": _o(8, "examples per optimiser step"),
    "clip_norm": _o(1.0, "global gradient-norm clip"),
    "train_mode": _o("narrow", "selection used while training: narrow or broad"),
    "use_mlp": _o("auto", "read through trained MLPs: auto, true or false"),
    "checkpoint": _o("", "checkpoint path"),
    "resume": _o(False, "continue from an existing checkpoint at the same path"),
    # evaluation
    "datasets": _o([], "evaluation datasets (comma-separated paths)", list),
    "checkpoints": _o([], "scheme=path pairs for ablate (comma-separated)", list),
    "mode": _o("narrow", "inference mode: exact, narrow or broad"),
    "modes": _o(["exact", "narrow", "broad"], "inference modes for ablate", list),
    "k_values": _o([5], "top-K values for ablate", list),
    "system": _o("epman", "epman, baseline_full_context or baseline_rag_concat"),
    "rank_noise": _o(False, "place the relevant chunk at a random top-K rank"),
    "max_new": _o(16, "generation length cap"),
    "kv_budget": _o(-1, "resident KV bytes per memory (-1: unlimited, 0: spill everything)"),
    "judge": _o(False, "also write judge prompts, one file per episode"),
    "snapshot": _o(False, "save the first episode's memory snapshot"),
}


def parse_value(key: str, raw) -> Any:
    if key not in OPTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    opt = OPTIONS[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if opt.kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if opt.kind is int:
            return int(text)
        if opt.kind is float:
            return float(text)
        if opt.kind is list:
            items = [s.strip() for s in text.split(",") if s.strip()]
            if opt.default and isinstance(opt.default[0], int):
                return [int(s) for s in items]
            return items
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {opt.kind.__name__})") from None
    return text


def parse_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return out


def parse_overrides(pairs: Iterable[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        out[key.strip()] = parse_value(key.strip(), value)
    return out


def resolve(file_path=None, overrides: dict | None = None, env=None) -> dict:
    """Defaults, then the config file, then ``EPMAN_OUT``, then overrides."""
    env = os.environ if env is None else env
    cfg = {k: o.default for k, o in OPTIONS.items()}
    if file_path:
        cfg.update(parse_file(file_path))
    if env.get("EPMAN_OUT"):
        cfg["out"] = env["EPMAN_OUT"]
    for key, value in (overrides or {}).items():
        cfg[key] = parse_value(key, value)
    return cfg


def derive_seed(master: int, *keys: int) -> int:
    """A 32-bit seed for the stream ``keys`` under ``master``."""
    return int(np.random.SeedSequence(master, spawn_key=tuple(keys)).generate_state(1)[0])


def dump(cfg: dict, keys: Iterable[str] | None = None) -> str:
    lines = []
    for key in keys or sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"

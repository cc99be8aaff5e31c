"""``epman`` command line: datagen, train, eval, ablate, inspect.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .checkpoint import MAGIC as CKPT_MAGIC, Checkpoint, CheckpointError, inspect_checkpoint, load_checkpoint, save_checkpoint
from .datagen import default_tokenizer, generate_dataset, load_dataset, serialize_dataset
from .decoder import DecoderConfig, DecoderParams, generate_greedy
from .epmem import EmbedderConfig, EpisodicMemory, Mode, inspect_snapshot
from .evaluation import (
    MemoryBuilder,
    RankNoise,
    ablation_grid,
    epman_selection,
    run_baseline_full_context,
    run_baseline_rag_concat,
    run_epman_eval,
    write_judge_prompts,
    write_report,
)
from .kvstore import RECORD_MAGIC, SpillCorruptError, scan_spill_file
from .training import MemoryOps, NoiseConfig, OptimizerState, TrainingExample, query_segment, train_phase1, train_phase2

log = logging.getLogger("epman")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# shown on every subcommand so the headline defaults are always visible
SHARED_KEYS = ["seed", "out", "threads", "k", "beta", "alpha", "chunk_len"]
COMMAND_KEYS = {
    "datagen": ["kind", "n", "chunks", "hard_negatives", "unrelated_facts", "cfi", "kpr", "vary_completion", "name"],
    "train": [
        "dataset", "heldout", "scheme", "phase", "epochs1", "epochs2", "beta_scale", "permute", "lr", "lr1", "temperature",
        "batch_size", "clip_norm", "train_mode", "use_mlp", "checkpoint", "resume", "episode_size", "n_layers",
        "d_model", "n_heads", "d_ff", "max_positions", "prefill", "d_enc", "d_hidden",
    ],
    "eval": [
        "checkpoint", "datasets", "mode", "system", "rank_noise", "max_new", "kv_budget", "use_mlp", "judge",
        "snapshot", "name",
    ],
    "ablate": ["checkpoints", "datasets", "modes", "k_values", "rank_noise", "max_new", "use_mlp", "name"],
    "inspect": [],
}
DESCRIPTIONS = {
    "datagen": "Generate a synthetic episode dataset (JSON Lines) and its manifest.",
    "train": "Train read/write MLPs (phase 1) and/or the decoder (phase 2); writes a checkpoint and metrics CSV.",
    "eval": "Evaluate a checkpoint on datasets; writes CSV and Markdown reports.",
    "ablate": "Evaluate a grid of training schemes x inference modes x K values.",
    "inspect": "Summarise a checkpoint, memory snapshot or spill file, verifying checksums.",
}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value) or "(none)"
    return str(value) if value != "" else "(none)"


def _add_option(parser, key: str, flag: str | None = None, dest: str | None = None):
    opt = C.OPTIONS[key]
    flag = flag or "--" + key.replace("_", "-")
    dest = dest or key
    text = f"{opt.help} (default: {_fmt(opt.default)})"
    if opt.kind is bool:
        parser.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None, help=text)
    else:
        parser.add_argument(flag, dest=dest, default=None, metavar=key.upper(), help=text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="epman", description="Episodic memory attention toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in ("datagen", "train", "eval", "ablate", "inspect"):
        p = sub.add_parser(name, help=DESCRIPTIONS[name], description=DESCRIPTIONS[name])
        p.add_argument("--config", default=None, help="key = value config file (default: none)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key; applied after the config file (repeatable)")
        for key in SHARED_KEYS:
            if name == "ablate" and key == "k":
                # ablate takes a list of K values under the short flag
                _add_option(p, "k_values", flag="--k", dest="k_values")
                continue
            _add_option(p, key)
        for key in COMMAND_KEYS[name]:
            if name == "ablate" and key == "k_values":
                continue
            if key == "datasets":
                _add_option(p, key, flag="--datasets")
                p.add_argument("--dataset", dest="datasets", default=None, help=argparse.SUPPRESS)
                continue
            _add_option(p, key)
        if name == "inspect":
            p.add_argument("path", help="checkpoint, memory manifest or spill file")
    return parser


def _resolve(ns) -> tuple[dict, set]:
    overrides = C.parse_overrides(ns.overrides)
    for key in C.OPTIONS:
        value = getattr(ns, key, None)
        if value is not None:
            overrides[key] = value
    file_values = C.parse_file(ns.config) if ns.config else {}
    cfg = C.resolve(ns.config, overrides)
    return cfg, set(overrides) | set(file_values)


def _out(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- datagen ------------------------------------------------------------------------------


def cmd_datagen(cfg: dict, explicit: set) -> int:
    if cfg["kind"] not in ("needle", "fact", "split"):
        raise UsageError(f"unknown --kind {cfg['kind']!r} (choose needle, fact or split)")
    episodes = generate_dataset(
        cfg["kind"], cfg["n"], cfg["seed"], n_chunks=cfg["chunks"], chunk_len=cfg["chunk_len"],
        hard_negatives=cfg["hard_negatives"], cfi=cfg["cfi"], kpr=cfg["kpr"],
        vary_completion=cfg["vary_completion"], n_unrelated_facts=cfg["unrelated_facts"],
    )
    name = cfg["name"] or cfg["kind"] + "".join(f"_{f}" for f in ("cfi", "kpr") if cfg[f])
    out = _out(cfg)
    path = serialize_dataset(episodes, out / f"{name}.jsonl")
    manifest = {
        "dataset": path.name,
        "seed": cfg["seed"],
        "kind": cfg["kind"],
        "count": len(episodes),
        "chunks_per_episode": cfg["chunks"],
        "chunk_len": cfg["chunk_len"],
        "flags": {k: cfg[k] for k in ("cfi", "kpr", "vary_completion", "hard_negatives", "unrelated_facts")},
        "relevant_index_counts": np.bincount([e.relevant_index for e in episodes], minlength=cfg["chunks"]).tolist(),
        "sha256": _sha256(path),
    }
    (out / f"{name}.manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(episodes)} episodes to {path}")
    return 0


# -- train ----------------------------------------------------------------------------------

_HYPER_KEYS = [
    "seed", "scheme", "k", "beta", "beta_scale", "alpha", "permute", "lr", "lr1", "temperature", "batch_size", "clip_norm",
    "train_mode", "use_mlp", "chunk_len", "episode_size", "n_layers", "d_model", "n_heads", "d_ff",
    "max_positions", "prefill", "d_enc", "d_hidden",
]


def _load_examples(path_text: str, what: str) -> list[TrainingExample]:
    if not path_text:
        raise UsageError(f"--{what} is required")
    path = Path(path_text)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return [TrainingExample.from_episode(e) for e in load_dataset(path)]


def _fresh_checkpoint(cfg: dict) -> Checkpoint:
    tokenizer = default_tokenizer()
    max_pos = cfg["max_positions"] or cfg["chunk_len"] * cfg["episode_size"] + 64
    dcfg = DecoderConfig(
        vocab_size=tokenizer.vocab_size, n_layers=cfg["n_layers"], n_heads=cfg["n_heads"], d_model=cfg["d_model"],
        d_head=cfg["d_model"] // cfg["n_heads"], d_ff=cfg["d_ff"], max_positions=max_pos,
        chunk_len=cfg["chunk_len"], episode_size=cfg["episode_size"], prefill=cfg["prefill"],
    )
    params = DecoderParams.init(dcfg, C.derive_seed(cfg["seed"], 1))
    ops = MemoryOps(EmbedderConfig(cfg["d_enc"], C.derive_seed(cfg["seed"], 2)), cfg["d_hidden"], C.derive_seed(cfg["seed"], 3))
    meta = {"hyper": {k: cfg[k] for k in _HYPER_KEYS}, "phase1_epochs": 0, "phase2_epochs": 0}
    return Checkpoint(dcfg, params, tokenizer, ops, None, meta)


def cmd_train(cfg: dict, explicit: set) -> int:
    if cfg["scheme"] not in ("noisy", "uniform"):
        raise UsageError("--scheme must be noisy or uniform")
    if str(cfg["phase"]) not in ("1", "2", "both"):
        raise UsageError("--phase must be 1, 2 or both")
    if cfg["use_mlp"] not in ("auto", "true", "false"):
        raise UsageError("--use-mlp must be auto, true or false")
    phase = str(cfg["phase"])
    examples = _load_examples(cfg["dataset"], "dataset")
    heldout = _load_examples(cfg["heldout"], "heldout") if cfg["heldout"] else []
    out = _out(cfg)
    ckpt_path = Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / "model.ckpt"
    metrics_path = ckpt_path.with_suffix(".metrics.csv")

    if cfg["resume"] and ckpt_path.exists():
        ckpt = load_checkpoint(ckpt_path)
        want = {k: cfg[k] for k in _HYPER_KEYS}
        if ckpt.meta.get("hyper") != want:
            diff = sorted(k for k in want if ckpt.meta.get("hyper", {}).get(k) != want[k])
            raise ValueError(f"cannot resume {ckpt_path}: settings differ for {', '.join(diff)}")
        log.info("resuming %s (phase1 epochs %d, phase2 epochs %d)", ckpt_path,
                 ckpt.meta["phase1_epochs"], ckpt.meta["phase2_epochs"])
    else:
        ckpt = _fresh_checkpoint(cfg)
        if metrics_path.exists():
            metrics_path.unlink()
    ckpt.meta["dataset_sha256"] = _sha256(cfg["dataset"])

    if phase in ("1", "both") and ckpt.meta["phase1_epochs"] < cfg["epochs1"]:
        if ckpt.meta["phase1_epochs"]:
            raise ValueError("phase 1 can only be resumed from its start or end")
        train_phase1(examples, ckpt.memory_ops, cfg["epochs1"], OptimizerState(lr=cfg["lr1"]), heldout,
                     seed=C.derive_seed(cfg["seed"], 4), metrics_path=metrics_path, temperature=cfg["temperature"])
        ckpt.meta["phase1_epochs"] = cfg["epochs1"]
        save_checkpoint(ckpt, ckpt_path)

    if phase in ("2", "both"):
        use_mlp = cfg["use_mlp"] == "true" or (cfg["use_mlp"] == "auto" and ckpt.meta["phase1_epochs"] > 0)
        noise = NoiseConfig(cfg["k"], cfg["beta"], cfg["permute"], C.derive_seed(cfg["seed"], 5), cfg["beta_scale"])
        if ckpt.optimizer is None:
            ckpt.optimizer = OptimizerState(lr=cfg["lr"])
        uniform = cfg["scheme"] == "uniform"
        eval_fn = None
        if heldout:
            from .datagen import GeneratedEpisode

            held_eps = [GeneratedEpisode(h.chunks, h.query, h.answer, h.relevant_index) for h in heldout]

            def eval_fn(epoch):
                return run_epman_eval(held_eps, ckpt, "narrow", cfg["k"], use_mlp=use_mlp).aggregate / 100.0

        weights_seen: list[list[float]] = []

        def on_epoch_end(done):
            flat = [w for ws in weights_seen for w in ws]
            ckpt.meta["phase2_epochs"] = done
            ckpt.meta["use_mlp"] = use_mlp
            ckpt.meta["weight_range"] = [min(flat), max(flat)] if flat else []
            log.info("epoch %d training weights (%s scheme): min %.4f max %.4f", done, cfg["scheme"],
                     min(flat, default=float("nan")), max(flat, default=float("nan")))
            weights_seen.clear()
            save_checkpoint(ckpt, ckpt_path)

        train_phase2(
            examples, ckpt.params, ckpt.config, ckpt.tokenizer, cfg["epochs2"], noise, ckpt.optimizer,
            memory_ops=ckpt.memory_ops, use_mlp=use_mlp, uniform=uniform, batch_size=cfg["batch_size"],
            clip_norm=cfg["clip_norm"], train_mode=cfg["train_mode"], eval_fn=eval_fn, metrics_path=metrics_path,
            log_weights=True, start_epoch=ckpt.meta["phase2_epochs"], on_epoch_end=on_epoch_end,
            weights_log=weights_seen,
        )
    save_checkpoint(ckpt, ckpt_path)
    print(f"wrote checkpoint {ckpt_path}")
    return 0


# -- eval / ablate ------------------------------------------------------------------------


def _checkpoint(path_text: str) -> Checkpoint:
    if not path_text:
        raise UsageError("--checkpoint is required")
    path = Path(path_text)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _use_mlp(cfg: dict, ckpt: Checkpoint) -> bool:
    if cfg["use_mlp"] not in ("auto", "true", "false"):
        raise UsageError("--use-mlp must be auto, true or false")
    if cfg["use_mlp"] == "auto":
        return ckpt.meta.get("phase1_epochs", 0) > 0
    return cfg["use_mlp"] == "true"


def _datasets(cfg: dict, ckpt: Checkpoint, explicit: set) -> dict:
    if not cfg["datasets"]:
        raise UsageError("--datasets is required")
    if "chunk_len" in explicit and cfg["chunk_len"] != ckpt.config.chunk_len:
        raise ValueError(
            f"checkpoint/config mismatch: checkpoint chunk_len is {ckpt.config.chunk_len}, config asks for {cfg['chunk_len']}"
        )
    out = {}
    for p in cfg["datasets"]:
        path = Path(p)
        if not path.exists():
            raise FileNotFoundError(f"dataset not found: {path}")
        episodes = load_dataset(path)
        longest = max(len(ckpt.tokenizer.encode(c)) for e in episodes for c in e.chunks)
        if longest > ckpt.config.chunk_len:
            raise ValueError(
                f"checkpoint/config mismatch: {path} has a {longest}-token chunk, checkpoint chunk_len is {ckpt.config.chunk_len}"
            )
        out[path.stem] = episodes
    return out


def _check_mode(value: str) -> None:
    try:
        Mode.parse(value)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _kv_budget(cfg: dict):
    return None if cfg["kv_budget"] < 0 else cfg["kv_budget"]


def _save_snapshot(cfg: dict, ckpt: Checkpoint, episode, use_mlp: bool, out: Path) -> Path:
    mem_dir = out / "memory"
    mem_dir.mkdir(parents=True, exist_ok=True)
    spill = mem_dir / "spill.ekv"
    if spill.exists():
        spill.unlink()
    ops = ckpt.memory_ops
    memory = EpisodicMemory.from_texts(
        episode.chunks, ckpt.tokenizer, use_mlp=use_mlp, chunk_len=ckpt.config.chunk_len,
        embedder=ops.embedder, read_mlp=ops.read_mlp, write_mlp=ops.write_mlp,
        kv_budget_bytes=_kv_budget(cfg), spill_path=spill,
    )
    selection = epman_selection(episode, memory, cfg["mode"], cfg["k"], use_mlp)
    seq, _ = query_segment(ckpt.tokenizer, episode.query)
    generate_greedy(seq, selection, memory, ckpt.params, ckpt.config, cfg["max_new"])
    return memory.save_snapshot(mem_dir / "manifest.json")


def cmd_eval(cfg: dict, explicit: set) -> int:
    ckpt = _checkpoint(cfg["checkpoint"])
    use_mlp = _use_mlp(cfg, ckpt)
    datasets = _datasets(cfg, ckpt, explicit)
    _check_mode(cfg["mode"])
    scheme = ckpt.meta.get("hyper", {}).get("scheme", "")
    noise = RankNoise(C.derive_seed(cfg["seed"], 6)) if cfg["rank_noise"] else None
    builder = MemoryBuilder(ckpt, use_mlp, _kv_budget(cfg))
    out = _out(cfg)
    runs = []
    for name, episodes in datasets.items():
        common = dict(max_new=cfg["max_new"], dataset=name, train_scheme=scheme, seed=cfg["seed"], threads=cfg["threads"])
        if cfg["system"] == "epman":
            run = run_epman_eval(episodes, ckpt, cfg["mode"], cfg["k"], builder, use_mlp, noise, **common)
        elif cfg["system"] == "baseline_rag_concat":
            run = run_baseline_rag_concat(episodes, ckpt, cfg["k"], builder, use_mlp, **common)
        elif cfg["system"] == "baseline_full_context":
            run = run_baseline_full_context(episodes, ckpt, **common)
        else:
            raise UsageError(f"unknown --system {cfg['system']!r}")
        runs.append(run)
        log.info("%s %s K=%d %s: recall %.1f f1 %.1f (n=%d)", run.system, run.mode, run.k, name,
                 run.mean("recall"), run.mean("f1"), run.n)
        if cfg["judge"]:
            write_judge_prompts(run, out / "judge")
    if cfg["snapshot"]:
        first = next(iter(datasets.values()))[0]
        print(f"wrote memory snapshot {_save_snapshot(cfg, ckpt, first, use_mlp, out)}")
    csv_path, md_path = write_report(runs, out / (cfg["name"] or "report"), metrics=["recall", "f1"])
    print(f"wrote {csv_path} and {md_path}")
    return 0


def cmd_ablate(cfg: dict, explicit: set) -> int:
    if not cfg["checkpoints"]:
        raise UsageError("--checkpoints is required (scheme=path,...)")
    schemes = {}
    for item in cfg["checkpoints"]:
        scheme, _, path = item.rpartition("=")
        ckpt = _checkpoint(path)
        schemes[scheme or ckpt.meta.get("hyper", {}).get("scheme", Path(path).stem)] = ckpt
    first = next(iter(schemes.values()))
    datasets = _datasets(cfg, first, explicit)
    for m in cfg["modes"]:
        _check_mode(m)
    use_mlp = _use_mlp(cfg, first)
    noise = RankNoise(C.derive_seed(cfg["seed"], 6)) if cfg["rank_noise"] else None
    runs = ablation_grid(datasets, cfg["modes"], schemes, cfg["k_values"], use_mlp, noise, cfg["max_new"],
                         cfg["seed"], cfg["threads"])
    csv_path, md_path = write_report(runs, _out(cfg) / (cfg["name"] or "ablation"))
    print(f"wrote {len(runs)} rows to {csv_path} and {md_path}")
    return 0


# -- inspect --------------------------------------------------------------------------------


def cmd_inspect(path_text: str) -> int:
    path = Path(path_text)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, "rb") as fh:
        head = fh.read(len(CKPT_MAGIC))
    if head == CKPT_MAGIC:
        info = inspect_checkpoint(path)
        print(f"checkpoint {path} ({info['bytes']} bytes, crc32 {info['crc32']} ok)")
        print("config: " + ", ".join(f"{k}={v}" for k, v in info["config"].items()))
        print(f"{'group':8} {'name':24} {'shape':>16} {'count':>10}")
        for group, name, shape, count in info["tensors"]:
            if group != "optim":
                print(f"{group:8} {name:24} {str(shape):>16} {count:>10}")
        print(f"decoder parameters: {info['decoder_parameters']}")
        print(f"memory parameters: {info['memory_parameters']}")
        meta = {k: v for k, v in info["meta"].items() if k != "hyper"}
        print("meta: " + json.dumps(meta, sort_keys=True))
    elif head.startswith(RECORD_MAGIC):
        records = scan_spill_file(path)
        print(f"spill file {path}: {len(records)} records, all checksums ok")
        for cid, off in records:
            print(f"  chunk {cid} at offset {off}")
    else:
        try:
            info = inspect_snapshot(path)
        except (json.JSONDecodeError, UnicodeDecodeError, KeyError) as exc:
            raise CheckpointError(f"{path}: not a readable checkpoint, memory manifest or spill file ({exc})") from None
        print(f"memory snapshot {path}")
        for k, v in info.items():
            print(f"  {k}: {v}")
    return 0


# -- entry point ------------------------------------------------------------------------------


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_help(sys.stderr)
            return 1
        if ns.command == "inspect":
            return cmd_inspect(ns.path)
        cfg, explicit = _resolve(ns)
        return {"datagen": cmd_datagen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}[ns.command](
            cfg, explicit
        )
    except (UsageError, C.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, SpillCorruptError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Versioned single-file checkpoints.

Layout, little-endian::

    b"EPMAN-CKPT-v1\\n" | u32 header_len | header (UTF-8 JSON) | tensor data | u32 crc32

The header holds the decoder config, vocabulary, free-form metadata and a
table ``[{"name", "group", "shape", "offset"}]`` locating every tensor as raw
float64 inside the data block. The trailing CRC32 covers every byte before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoder import DecoderConfig, DecoderParams
from .epmem import EmbedderConfig
from .tensor import Tensor
from .tokenizer import SPECIAL_TOKENS, Tokenizer
from .training import MemoryOps, OptimizerState

MAGIC = b"EPMAN-CKPT-v1\n"


class CheckpointError(IOError):
    """Bad magic, failed checksum, or a malformed header."""


@dataclass
class Checkpoint:
    config: DecoderConfig
    params: DecoderParams
    tokenizer: Tokenizer
    memory_ops: MemoryOps | None = None
    optimizer: OptimizerState | None = None
    meta: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        return self.params.fingerprint()


def _tensor_groups(ckpt: Checkpoint):
    for name, t in ckpt.params.items():
        yield "decoder", name, t.data
    if ckpt.memory_ops is not None:
        for name, arr in ckpt.memory_ops.state().items():
            yield "memory", name, arr
    if ckpt.optimizer is not None and ckpt.optimizer.m:
        for i, (m, v) in enumerate(zip(ckpt.optimizer.m, ckpt.optimizer.v)):
            yield "optim", f"m.{i}", m
            yield "optim", f"v.{i}", v


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    table, blobs, offset = [], [], 0
    for group, name, arr in _tensor_groups(ckpt):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "group": group, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.tokenizer.itos,
        "meta": ckpt.meta,
        "tensors": table,
        "data_bytes": offset,
    }
    if ckpt.memory_ops is not None:
        emb = ckpt.memory_ops.embedder
        header["memory"] = {
            "d_enc": emb.d_enc,
            "seed": emb.seed,
            "ngrams": list(emb.ngrams),
            "d_hidden": ckpt.memory_ops.d_hidden,
            "mlp_seed": ckpt.memory_ops.seed,
        }
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        header["optimizer"] = {"lr": opt.lr, "betas": list(opt.betas), "eps": opt.eps, "step": opt.step}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)
    return path


def _read_verified(path) -> tuple[dict, bytes]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an EPMAN-CKPT-v1 file (bad magic)")
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: truncated file")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from None
    data = blob[start + hlen : -4]
    if len(data) != header.get("data_bytes"):
        raise CheckpointError(f"{path}: data block is {len(data)} bytes, header says {header.get('data_bytes')}")
    return header, data


def _arrays(header: dict, data: bytes) -> dict[tuple[str, str], np.ndarray]:
    out = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=entry["offset"])
        out[(entry["group"], entry["name"])] = arr.astype(np.float64).reshape(entry["shape"])
    return out


def load_checkpoint(path) -> Checkpoint:
    header, data = _read_verified(path)
    arrays = _arrays(header, data)
    config = DecoderConfig(**header["config"])
    tensors = {
        name: Tensor(arr, requires_grad=True, name=name) for (group, name), arr in arrays.items() if group == "decoder"
    }
    expected = DecoderParams.init(config, 0)
    for name, t in expected.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing decoder tensor {name}")
        if tensors[name].shape != t.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tensors[name].shape}, config implies {t.shape}")
    params = DecoderParams({name: tensors[name] for name in expected.names()})
    vocab = header["vocab"]
    if tuple(vocab[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
        raise CheckpointError(f"{path}: vocabulary does not start with the special tokens")
    tokenizer = Tokenizer(vocab[len(SPECIAL_TOKENS) :])
    if tokenizer.vocab_size != config.vocab_size:
        raise CheckpointError(f"{path}: vocabulary has {tokenizer.vocab_size} entries, config says {config.vocab_size}")
    memory_ops = None
    if "memory" in header:
        m = header["memory"]
        memory_ops = MemoryOps(EmbedderConfig(m["d_enc"], m["seed"], tuple(m["ngrams"])), m["d_hidden"], m["mlp_seed"])
        memory_ops.load_state({name: arr for (group, name), arr in arrays.items() if group == "memory"})
    optimizer = None
    if "optimizer" in header:
        o = header["optimizer"]
        optimizer = OptimizerState(lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"], step=o["step"])
        n = sum(1 for (group, name) in arrays if group == "optim" and name.startswith("m."))
        optimizer.m = [arrays[("optim", f"m.{i}")] for i in range(n)]
        optimizer.v = [arrays[("optim", f"v.{i}")] for i in range(n)]
    return Checkpoint(config, params, tokenizer, memory_ops, optimizer, header.get("meta", {}))


def inspect_checkpoint(path) -> dict:
    """Header summary plus per-tensor shapes; raises :class:`CheckpointError` on a bad file."""
    header, data = _read_verified(path)
    blob = Path(path).read_bytes()
    rows = [(e["group"], e["name"], tuple(e["shape"]), int(np.prod(e["shape"]))) for e in header["tensors"]]
    return {
        "config": header["config"],
        "meta": header["meta"],
        "vocab_size": len(header["vocab"]),
        "tensors": rows,
        "decoder_parameters": sum(r[3] for r in rows if r[0] == "decoder"),
        "memory_parameters": sum(r[3] for r in rows if r[0] == "memory"),
        "crc32": f"{struct.unpack('<I', blob[-4:])[0]:08x}",
        "bytes": len(blob),
    }

"""Two-tier (RAM, then spill file) store for per-chunk key/value caches.

Spill file layout, one framed record per entry, all little-endian::

    b"EKV1" | u32 payload_len | payload | u32 crc32(payload)

    payload = i64 chunk_id | u32 n_layers | u32 n_tokens | u32 n_heads | u32 d_head
              | u32 n_prefix | i64[n_prefix] prefix_ids | i64[n_tokens] positions
              | u16 fp_len | fp_len bytes params fingerprint (ascii)
              | per layer: f64 keys[n_tokens*n_heads*d_head], f64 values[...]
"""

from __future__ import annotations

import os
import struct
import tempfile
import threading
import zlib
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .decoder import ChunkKV

RECORD_MAGIC = b"EKV1"
_HEAD = struct.Struct("<qIIIII")


class SpillCorruptError(IOError):
    """A spill record failed its checksum or framing check."""


class MissingEntryError(KeyError):
    """No KV entry has been stored for the requested chunk."""


def encode_record(entry: ChunkKV) -> bytes:
    n_layers = entry.n_layers
    n_tokens, n_heads, d_head = entry.keys[0].shape
    fp = entry.params_fingerprint.encode("ascii")
    parts = [
        _HEAD.pack(entry.chunk_id, n_layers, n_tokens, n_heads, d_head, len(entry.prefix_ids)),
        np.asarray(entry.prefix_ids, dtype="<i8").tobytes(),
        np.asarray(entry.positions, dtype="<i8").tobytes(),
        struct.pack("<H", len(fp)),
        fp,
    ]
    for k, v in zip(entry.keys, entry.values):
        parts.append(np.ascontiguousarray(k, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return RECORD_MAGIC + struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload))


def decode_payload(payload: bytes) -> ChunkKV:
    chunk_id, n_layers, n_tokens, n_heads, d_head, n_prefix = _HEAD.unpack_from(payload, 0)
    off = _HEAD.size
    prefix = np.frombuffer(payload, dtype="<i8", count=n_prefix, offset=off)
    off += 8 * n_prefix
    positions = np.frombuffer(payload, dtype="<i8", count=n_tokens, offset=off).astype(np.int64)
    off += 8 * n_tokens
    (fp_len,) = struct.unpack_from("<H", payload, off)
    off += 2
    fp = payload[off : off + fp_len].decode("ascii")
    off += fp_len
    count = n_tokens * n_heads * d_head
    keys, values = [], []
    for _ in range(n_layers):
        for dest in (keys, values):
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off)
            dest.append(arr.astype(np.float64).reshape(n_tokens, n_heads, d_head))
            off += 8 * count
    if off != len(payload):
        raise SpillCorruptError(f"record for chunk {chunk_id} has {len(payload) - off} trailing bytes")
    return ChunkKV(
        chunk_id=int(chunk_id),
        keys=keys,
        values=values,
        positions=positions,
        prefix_ids=tuple(int(i) for i in prefix),
        params_fingerprint=fp,
    )


def read_record(fh, offset: int) -> tuple[ChunkKV, int]:
    """Read and verify the record at ``offset``; return it and the next offset."""
    fh.seek(offset)
    head = fh.read(8)
    if len(head) < 8 or head[:4] != RECORD_MAGIC:
        raise SpillCorruptError(f"bad record header at offset {offset}")
    (length,) = struct.unpack("<I", head[4:])
    payload = fh.read(length)
    tail = fh.read(4)
    if len(payload) != length or len(tail) != 4:
        raise SpillCorruptError(f"truncated record at offset {offset}")
    if zlib.crc32(payload) != struct.unpack("<I", tail)[0]:
        raise SpillCorruptError(f"checksum mismatch for record at offset {offset}")
    return decode_payload(payload), offset + 12 + length


def scan_spill_file(path) -> list[tuple[int, int]]:
    """``(chunk_id, offset)`` for every record in a spill file, verifying each checksum."""
    out = []
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        off = 0
        while off < size:
            entry, nxt = read_record(fh, off)
            out.append((entry.chunk_id, off))
            off = nxt
    return out


class KVTier:
    """Resident entries up to ``budget_bytes``; older entries spill to disk.

    Eviction is oldest-written first. ``budget_bytes=None`` never spills,
    ``0`` spills every entry as soon as it is written. Spilled entries are
    re-read (and checksum-verified) on every :meth:`get`.
    """

    def __init__(self, budget_bytes: int | None = None, spill_path: str | os.PathLike | None = None):
        self.budget_bytes = budget_bytes
        self._owned_dir = None
        self._spill_path = Path(spill_path) if spill_path is not None else None
        self._resident: OrderedDict[int, ChunkKV] = OrderedDict()
        self._spilled: dict[int, int] = {}
        self._resident_bytes = 0
        self._lock = threading.Lock()

    @property
    def spill_path(self) -> Path:
        if self._spill_path is None:
            # created on first use so never-spilling tiers touch no disk
            self._owned_dir = tempfile.TemporaryDirectory(prefix="epman-kv-")
            self._spill_path = Path(self._owned_dir.name) / "spill.ekv"
        return self._spill_path

    def __contains__(self, chunk_id: int) -> bool:
        return chunk_id in self._resident or chunk_id in self._spilled

    def __len__(self) -> int:
        return len(self._resident) + len(self._spilled)

    @property
    def resident_ids(self) -> list[int]:
        return list(self._resident)

    @property
    def spilled_ids(self) -> list[int]:
        return sorted(self._spilled)

    @property
    def resident_bytes(self) -> int:
        return self._resident_bytes

    def put(self, entry: ChunkKV) -> None:
        with self._lock:
            cid = entry.chunk_id
            old = self._resident.pop(cid, None)
            if old is not None:
                self._resident_bytes -= old.nbytes()
            self._spilled.pop(cid, None)
            self._resident[cid] = entry
            self._resident_bytes += entry.nbytes()
            self._enforce_budget()

    def _enforce_budget(self) -> None:
        if self.budget_bytes is None:
            return
        while self._resident and self._resident_bytes > self.budget_bytes:
            cid, entry = self._resident.popitem(last=False)
            self._resident_bytes -= entry.nbytes()
            self._spilled[cid] = self._append(entry)

    def _append(self, entry: ChunkKV) -> int:
        self.spill_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.spill_path, "ab") as fh:
            offset = fh.tell()
            fh.write(encode_record(entry))
        return offset

    def get(self, chunk_id: int) -> ChunkKV:
        with self._lock:
            entry = self._resident.get(chunk_id)
            if entry is not None:
                return entry
            if chunk_id not in self._spilled:
                raise MissingEntryError(chunk_id)
            offset = self._spilled[chunk_id]
        with open(self.spill_path, "rb") as fh:
            entry, _ = read_record(fh, offset)
        if entry.chunk_id != chunk_id:
            raise SpillCorruptError(f"record at offset {offset} holds chunk {entry.chunk_id}, expected {chunk_id}")
        return entry

    def spill_all(self) -> None:
        """Move every resident entry to the spill file."""
        with self._lock:
            while self._resident:
                cid, entry = self._resident.popitem(last=False)
                self._spilled[cid] = self._append(entry)
            self._resident_bytes = 0

    def flush_index(self) -> dict[int, int]:
        """Write resident entries to disk too and return ``chunk_id -> offset`` for all entries."""
        with self._lock:
            index = dict(self._spilled)
            for cid, entry in self._resident.items():
                index[cid] = self._append(entry)
            return index

    def adopt(self, index: dict[int, int]) -> None:
        """Register already-written records (snapshot load) as spilled entries."""
        with self._lock:
            self._spilled.update({int(k): int(v) for k, v in index.items()})

    def clear(self) -> None:
        with self._lock:
            self._resident.clear()
            self._spilled.clear()
            self._resident_bytes = 0
            if self._owned_dir is not None and self._spill_path.exists():
                self._spill_path.unlink()

    def close(self) -> None:
        self.clear()
        if self._owned_dir is not None:
            self._owned_dir.cleanup()
            self._owned_dir = None

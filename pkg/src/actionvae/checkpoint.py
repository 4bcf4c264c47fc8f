"""Binary checkpoint container for parameters and optimizer state.

Layout: magic "FLVC", u32 format version, then two blocks (parameters,
optimizer state), each a u32 entry count followed by entries of
u32 name length, UTF-8 name, u32 rank, u32 dims, float64 LE values.
Writing is deterministic, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLVC"
VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed."""


def _write_entry(fh, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _write_block(fh, entries: dict[str, np.ndarray]):
    fh.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        _write_entry(fh, name, np.asarray(arr, dtype=np.float64))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def block(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            rank = self.u32()
            dims = tuple(self.u32() for _ in range(rank))
            n = int(np.prod(dims)) if dims else 1
            vals = np.frombuffer(self.take(8 * n), dtype="<f8")
            out[name] = vals.reshape(dims).astype(np.float64)
        return out


def save_checkpoint(path, params: dict[str, np.ndarray],
                    opt_state: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_block(fh, params)
        _write_block(fh, opt_state)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray],
                                   dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    rd = _Reader(raw, path)
    rd.pos = 4
    version = rd.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    params = rd.block()
    state = rd.block()
    if rd.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return params, state

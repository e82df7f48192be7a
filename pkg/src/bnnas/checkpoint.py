"""Versioned binary checkpoints with a plain-text sidecar index.

Layout (all integers little-endian)::

    magic      8 bytes  b"BNNASCKP"
    version    u32
    digest     32 bytes sha256 of the space configuration
    epoch      i64
    momentum   f64      optimizer momentum coefficient
    decay      f64      optimizer weight decay
    count      u32      number of tensors
    count x:   u16 name length, name (utf-8), u8 kind code, u8 ndim,
               ndim x u32 dims, float32 payload (row-major)
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .engine import OptimState
from .indicator import score_table_from_gammas
from .space import SpaceConfig, _Network
from .trainer import BnSnapshot

MAGIC = b"BNNASCKP"
VERSION = 1
KINDS = ("conv", "bn", "stat", "linear", "optim", "snapshot", "meta")
_HEADER = struct.Struct("<8sI32sqddI")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    digest: bytes
    epoch: int
    tensors: dict = field(default_factory=dict)  # name -> (kind, float32 array)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    version: int = VERSION

    def arrays(self, kind: str | None = None) -> dict:
        return {n: a for n, (k, a) in self.tensors.items() if kind is None or k == kind}


def from_network(net: _Network, epoch: int, state: OptimState | None = None) -> Checkpoint:
    ckpt = Checkpoint(net.space.digest(), epoch)
    for name, (kind, arr) in net.tensors().items():
        ckpt.tensors[name] = (kind, arr.copy())
    if state is not None:
        ckpt.momentum, ckpt.weight_decay = state.momentum, state.weight_decay
        for name in sorted(state.buffers):
            ckpt.tensors[f"optim.{name}"] = ("optim", state.buffers[name].copy())
    return ckpt


def apply_to_network(ckpt: Checkpoint, net: _Network, state: OptimState | None = None) -> None:
    """Copy stored tensors into ``net`` (and optimizer buffers into ``state``)."""
    if ckpt.digest != net.space.digest():
        raise CheckpointError("checkpoint was written for a different space configuration")
    targets = net.tensors()
    for name, (kind, arr) in ckpt.tensors.items():
        if kind == "optim":
            if state is not None:
                state.buffers[name[len("optim."):]] = arr.copy()
            continue
        if name not in targets:
            raise CheckpointError(f"unexpected tensor {name!r}")
        dst = targets[name][1]
        if dst.shape != arr.shape:
            raise CheckpointError(f"{name}: stored shape {arr.shape} != network shape {dst.shape}")
        dst[...] = arr
    if state is not None:
        state.momentum, state.weight_decay = ckpt.momentum, ckpt.weight_decay


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, ckpt.version, ckpt.digest, ckpt.epoch, ckpt.momentum,
                           ckpt.weight_decay, len(ckpt.tensors)))
    for name, (kind, arr) in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", KINDS.index(kind), arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def from_bytes(data: bytes, expected_digest: bytes | None = None) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, digest, epoch, mom, wd, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError("space-plan digest mismatch: checkpoint belongs to another configuration")
    ckpt = Checkpoint(digest, epoch, momentum=mom, weight_decay=wd, version=version)
    off = _HEADER.size
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = math.prod(shape)
            if off + 4 * size > len(data):
                raise CheckpointError(f"tensor {name!r} truncated")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
            off += 4 * size
            ckpt.tensors[name] = (KINDS[code], arr)
    except (struct.error, IndexError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint body: {e}") from e
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes after the last tensor")
    return ckpt


def index_text(ckpt: Checkpoint) -> str:
    lines = [f"version {ckpt.version}", f"digest {ckpt.digest.hex()}", f"epoch {ckpt.epoch}",
             f"momentum {ckpt.momentum!r}", f"weight_decay {ckpt.weight_decay!r}", "name\tkind\tshape\toffset"]
    off = _HEADER.size
    for name, (kind, arr) in ckpt.tensors.items():
        off += 2 + len(name.encode()) + 2 + 4 * arr.ndim
        lines.append(f"{name}\t{kind}\t{'x'.join(map(str, arr.shape))}\t{off}")
        off += 4 * arr.size
    return "\n".join(lines) + "\n"


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(ckpt))
    with open(f"{path}.index.txt", "w") as f:
        f.write(index_text(ckpt))


def load_checkpoint(path, expected_digest: bytes | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        return from_bytes(f.read(), expected_digest)


def score_table_from_checkpoint(ckpt: Checkpoint, space: SpaceConfig) -> np.ndarray:
    """Op scores straight from the stored last-BN scaling factors."""
    if ckpt.digest != space.digest():
        raise CheckpointError("space-plan digest mismatch")
    gammas = []
    for l in range(space.num_layers):
        row = []
        for n in range(space.num_candidates):
            name = f"layers.{l}.{n}.project.bn.gamma"
            if name not in ckpt.tensors:
                raise CheckpointError(f"checkpoint lacks {name}")
            row.append(ckpt.tensors[name][1])
        gammas.append(row)
    return score_table_from_gammas(gammas)


def snapshots_to_checkpoint(snapshots: list[BnSnapshot], digest: bytes) -> Checkpoint:
    ckpt = Checkpoint(digest, snapshots[-1].epoch if snapshots else 0)
    losses = np.array([np.nan if s.loss is None else s.loss for s in snapshots], np.float32)
    ckpt.tensors["snapshot.epochs"] = ("meta", np.array([s.epoch for s in snapshots], np.float32))
    ckpt.tensors["snapshot.losses"] = ("meta", losses)
    for s in snapshots:
        for l, row in enumerate(s.gammas):
            for n, g in enumerate(row):
                ckpt.tensors[f"snapshot.{s.epoch}.{l}.{n}"] = ("snapshot", g)
    return ckpt


def snapshots_from_checkpoint(ckpt: Checkpoint, space: SpaceConfig) -> list[BnSnapshot]:
    epochs = ckpt.tensors["snapshot.epochs"][1].astype(int)
    losses = ckpt.tensors["snapshot.losses"][1]
    out = []
    for e, loss in zip(epochs, losses):
        gammas = [[ckpt.tensors[f"snapshot.{e}.{l}.{n}"][1] for n in range(space.num_candidates)]
                  for l in range(space.num_layers)]
        out.append(BnSnapshot(int(e), gammas, None if np.isnan(loss) else float(loss)))
    return out

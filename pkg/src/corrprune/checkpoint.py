"""CPCK checkpoint container.

Little-endian layout::

    b"CPCK0001"
    u32 len, utf-8 config text
    u32 tensor count
    per tensor: u32 len, utf-8 name; u8 rank; u32 dims[rank]; f32 data (row-major)
"""

from __future__ import annotations

import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, format_config, resolve
from .network import LeCoT, build_model, param_store
from .training import OptimizerState

MAGIC = b"CPCK"
VERSION = b"0001"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def config(self) -> RunConfig:
        return resolve(self.config_text)

    @property
    def iteration(self) -> int:
        return int(self.tensors["state.iteration"].item()) if "state.iteration" in self.tensors else 0


def _f32(t) -> np.ndarray:
    if torch.is_tensor(t):
        t = t.detach().cpu().numpy()
    return np.array(t, dtype=np.float32, order="C")  # keeps rank-0 scalars rank 0


def make_checkpoint(cfg: RunConfig, model: LeCoT, state: OptimizerState | None = None,
                    iteration: int = 0) -> Checkpoint:
    tensors = OrderedDict()
    for name, p in param_store(model).items():
        tensors[f"param.{name}"] = _f32(p)
    for name, b in sorted(model.named_buffers(), key=lambda kv: kv[0]):
        tensors[f"buffer.{name}"] = _f32(b)
    if state is not None:
        for name in sorted(state.m):
            tensors[f"adam.m.{name}"] = _f32(state.m[name])
        for name in sorted(state.v):
            tensors[f"adam.v.{name}"] = _f32(state.v[name])
        tensors["adam.step"] = _f32(state.step)
    tensors["state.iteration"] = _f32(iteration)
    return Checkpoint(format_config(cfg), tensors)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    text = ckpt.config_text.encode("utf-8")
    out = [MAGIC + VERSION, struct.pack("<I", len(text)), text, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        a = _f32(arr)
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.astype("<f4").tobytes())
    return b"".join(out)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write via a temporary sibling file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncationError(f"checkpoint truncated while reading {what}")
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise BadMagicError("not a CPCK checkpoint")
    if buf[4:8] != VERSION:
        raise VersionMismatchError(f"checkpoint version {buf[4:8]!r}, expected {VERSION!r}")
    r = _Reader(buf)
    r.off = 8
    text = r.take(r.u32("config length"), "config").decode("utf-8")
    tensors = OrderedDict()
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.take(1, "rank")[0]
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} dims"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * count, f"{name} data"), dtype="<f4").reshape(dims)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = data.astype(np.float32)
    if r.off != len(buf):
        raise CheckpointError(f"{len(buf) - r.off} trailing bytes")
    return Checkpoint(text, tensors)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def restore(ckpt: Checkpoint, cfg: RunConfig | None = None):
    """Build (model, optimizer state, iteration) from a checkpoint.

    ``cfg`` defaults to the checkpoint's own config; every tensor the config
    implies must be present with a matching shape, and nothing is mutated
    before all checks pass.
    """
    cfg = ckpt.config if cfg is None else cfg
    model = build_model(cfg.network, 0)
    expected = OrderedDict()
    for name, p in param_store(model).items():
        expected[f"param.{name}"] = p
    for name, b in sorted(model.named_buffers(), key=lambda kv: kv[0]):
        expected[f"buffer.{name}"] = b
    for key, target in expected.items():
        if key not in ckpt.tensors:
            raise ShapeMismatchError(f"missing tensor {key!r}")
        if tuple(ckpt.tensors[key].shape) != tuple(target.shape):
            raise ShapeMismatchError(
                f"tensor {key!r}: checkpoint shape {tuple(ckpt.tensors[key].shape)}, "
                f"model shape {tuple(target.shape)}"
            )
    known = set(expected) | {"adam.step", "state.iteration"}
    params = param_store(model)
    for prefix in ("adam.m.", "adam.v."):
        for name, p in params.items():
            key = prefix + name
            known.add(key)
            if key in ckpt.tensors and tuple(ckpt.tensors[key].shape) != tuple(p.shape):
                raise ShapeMismatchError(f"tensor {key!r} has shape {tuple(ckpt.tensors[key].shape)}")
    extra = set(ckpt.tensors) - known
    if extra:
        raise ShapeMismatchError(f"unexpected tensor(s) {sorted(extra)[:3]}")

    with torch.no_grad():
        for key, target in expected.items():
            target.copy_(torch.from_numpy(ckpt.tensors[key].copy()))
    state = None
    if "adam.step" in ckpt.tensors:
        state = OptimizerState(
            m=OrderedDict((n, torch.from_numpy(ckpt.tensors[f"adam.m.{n}"].copy())) for n in params),
            v=OrderedDict((n, torch.from_numpy(ckpt.tensors[f"adam.v.{n}"].copy())) for n in params),
            step=int(ckpt.tensors["adam.step"].item()),
        )
    model.eval()
    return model, state, ckpt.iteration

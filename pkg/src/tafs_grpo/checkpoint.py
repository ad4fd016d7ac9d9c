"""Binary checkpoint format.

Layout (all integers and floats little-endian)::

    b"TAFS" | u32 version | 32-byte config hash | u64 iteration
    u32 n_params, then n_params tensors
    u8 has_optimizer
        u64 step | f64 lr, beta1, beta2, eps, weight_decay
        u32 n_m, tensors | u32 n_v, tensors
    u32 len | RNG state as JSON (len 0: none)
    u32 len | metadata JSON

Each tensor is ``u32 name_len | utf-8 name | u32 rank | u32 dims... | f32 payload``.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState

MAGIC = b"TAFS"
VERSION = 1
HASH_BYTES = 32


class CheckpointError(ValueError):
    """Unreadable, foreign or damaged checkpoint file."""


@dataclass
class Checkpoint:
    params: OrderedDict
    optimizer: AdamState | None = None
    rng_state: dict | None = None
    iteration: int = 0
    config_hash: bytes = b"\0" * HASH_BYTES
    meta: dict = field(default_factory=dict)

    def build_model(self):
        """Rebuild the velocity field described by ``meta['model']`` and load the weights."""
        from .flow import VelocityField

        spec = self.meta.get("model")
        if spec is None:
            raise CheckpointError("checkpoint carries no model description")
        model = VelocityField(**spec)
        model.params.load_state(self.params)
        return model

    def make_rng(self) -> np.random.Generator:
        if self.rng_state is None:
            raise CheckpointError("checkpoint carries no RNG state")
        return rng_from_state(self.rng_state)


def rng_from_state(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(arr)
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _pack_tensors(tensors) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    parts += [_pack_tensor(k, v) for k, v in tensors.items()]
    return b"".join(parts)


def _pack_json(obj) -> bytes:
    if obj is None:
        return struct.pack("<I", 0)
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(ck: Checkpoint) -> bytes:
    if len(ck.config_hash) != HASH_BYTES:
        raise ValueError(f"config hash must be {HASH_BYTES} bytes")
    out = [MAGIC, struct.pack("<I", VERSION), ck.config_hash, struct.pack("<Q", ck.iteration)]
    out.append(_pack_tensors(ck.params))
    opt = ck.optimizer
    if opt is None:
        out.append(b"\0")
    else:
        out.append(b"\1")
        out.append(struct.pack("<Q5d", opt.step, opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay))
        out.append(_pack_tensors(opt.m))
        out.append(_pack_tensors(opt.v))
    out.append(_pack_json(ck.rng_state))
    out.append(_pack_json(ck.meta))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated or corrupt")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, np.ndarray]:
        (n,) = self.unpack("<I")
        try:
            name = self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("checkpoint is truncated or corrupt (bad tensor name)") from None
        (rank,) = self.unpack("<I")
        if rank > 8:
            raise CheckpointError("checkpoint is truncated or corrupt (implausible tensor rank)")
        dims = self.unpack(f"<{rank}I")
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        return name, data

    def tensors(self) -> OrderedDict:
        (n,) = self.unpack("<I")
        out = OrderedDict()
        for _ in range(n):
            k, v = self.tensor()
            out[k] = v
        return out

    def json(self):
        (n,) = self.unpack("<I")
        if n == 0:
            return None
        try:
            return json.loads(self.take(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise CheckpointError("checkpoint is truncated or corrupt (bad JSON block)") from None


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads version {VERSION})")
    config_hash = r.take(HASH_BYTES)
    (iteration,) = r.unpack("<Q")
    params = r.tensors()
    (flag,) = r.unpack("<B")
    opt = None
    if flag == 1:
        step, lr, b1, b2, eps, wd = r.unpack("<Q5d")
        m = dict(r.tensors())
        v = dict(r.tensors())
        opt = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd, step=step, m=m, v=v)
    elif flag != 0:
        raise CheckpointError("checkpoint is truncated or corrupt (bad optimizer flag)")
    rng_state = r.json()
    meta = r.json() or {}
    if r.pos != len(buf):
        raise CheckpointError("checkpoint is truncated or corrupt (trailing bytes)")
    return Checkpoint(params, opt, rng_state, iteration, config_hash, meta)


def save_checkpoint(path, ck: Checkpoint) -> None:
    """Write atomically: a crash mid-write never leaves a half file under ``path``."""
    data = encode_checkpoint(ck)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def snapshot_trainer(trainer, config_hash: bytes, meta: dict) -> Checkpoint:
    return Checkpoint(
        params=trainer.model.params.state(),
        optimizer=trainer.optimizer,
        rng_state=trainer.rng.bit_generator.state,
        iteration=trainer.iteration,
        config_hash=config_hash,
        meta=meta,
    )


def model_meta(model) -> dict:
    return {
        "dim": model.dim,
        "num_conditions": model.num_conditions,
        "hidden": list(model.hidden),
        "time_dim": model.time_dim,
        "cond_dim": model.cond_dim,
    }

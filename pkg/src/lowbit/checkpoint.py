"""Versioned binary checkpoints.

Layout: magic bytes, a format-version word, an entry count, then
length-prefixed named entries (name, dtype tag, shape, little-endian raw
values). Parameters, batch-norm statistics, optimizer buffers and a JSON
metadata blob (model spec, optimizer hypers, RNG states) all round-trip
bit-exactly; a truncated or unknown-version file is rejected without any
partial load.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"LOWBITCK"
VERSION = 1

_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_DTYPE_FOR = {0: "<f4", 1: "<f8", 2: "<i8"}
_BYTES_TAG = 3


def _read(fh, n, path):
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return raw


def save_entries(path, entries):
    """Write name -> (ndarray | bytes) entries; atomic via rename."""
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, value in entries.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            if isinstance(value, bytes):
                fh.write(struct.pack("<BB", _BYTES_TAG, 1))
                fh.write(struct.pack("<I", len(value)))
                fh.write(struct.pack("<Q", len(value)))
                fh.write(value)
            else:
                arr = np.ascontiguousarray(value)
                if arr.dtype not in _TAG_FOR:
                    raise CheckpointError(f"entry {name}: unsupported dtype {arr.dtype}")
                tag = _TAG_FOR[arr.dtype]
                payload = arr.astype(_DTYPE_FOR[tag]).tobytes()
                fh.write(struct.pack("<BB", tag, arr.ndim))
                for d in arr.shape:
                    fh.write(struct.pack("<I", d))
                fh.write(struct.pack("<Q", len(payload)))
                fh.write(payload)
    os.replace(tmp, path)


def load_entries(path):
    """Parse a checkpoint fully before returning anything."""
    entries = {}
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC), path) != MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        version = struct.unpack("<I", _read(fh, 4, path))[0]
        if version != VERSION:
            raise CheckpointError(f"{path}: unknown checkpoint version {version}")
        count = struct.unpack("<I", _read(fh, 4, path))[0]
        for _ in range(count):
            name_len = struct.unpack("<H", _read(fh, 2, path))[0]
            name = _read(fh, name_len, path).decode("utf-8")
            tag, ndim = struct.unpack("<BB", _read(fh, 2, path))
            dims = [struct.unpack("<I", _read(fh, 4, path))[0] for _ in range(ndim)]
            nbytes = struct.unpack("<Q", _read(fh, 8, path))[0]
            payload = _read(fh, nbytes, path)
            if tag == _BYTES_TAG:
                entries[name] = payload
            elif tag in _DTYPE_FOR:
                arr = np.frombuffer(payload, dtype=_DTYPE_FOR[tag])
                entries[name] = arr.reshape(dims).astype(_DTYPE_FOR[tag].lstrip("<"))
            else:
                raise CheckpointError(f"{path}: unknown dtype tag {tag}")
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last entry")
    return entries


def _optimizer_meta(opt):
    meta = {"kind": opt.kind, "lr": opt.lr, "weight_decay": opt.weight_decay,
            "step_count": opt.step_count}
    if opt.kind == "sgd_momentum":
        meta["momentum"] = opt.momentum
    if opt.kind == "adam":
        meta["betas"] = list(opt.betas)
        meta["eps"] = opt.eps
    return meta


def save_checkpoint(path, model, optimizers=(), rngs=None, extra=None):
    """Snapshot model parameters, BN statistics, optimizer buffers, RNG
    states, and the model spec needed to rebuild the architecture."""
    entries = {}
    params = model.named_parameters()
    for name, p in params.items():
        entries[f"param/{name}"] = p.data
    for name, b in model.named_buffers().items():
        entries[f"buffer/{name}"] = b
    param_names = list(params.keys())
    for oi, opt in enumerate(optimizers):
        for slot, arrays in opt.state_arrays():
            for pname, arr in zip(param_names, arrays):
                entries[f"opt{oi}/{slot}/{pname}"] = arr
    meta = {
        "format": "lowbit-checkpoint",
        "model_spec": model.spec.to_dict(),
        "optimizers": [_optimizer_meta(o) for o in optimizers],
        "rng_states": {name: rng.bit_generator.state for name, rng in (rngs or {}).items()},
    }
    if extra:
        meta.update(extra)
    entries["__meta__"] = json.dumps(meta, sort_keys=True).encode("utf-8")
    save_entries(path, entries)


def load_checkpoint(path):
    entries = load_entries(path)
    if "__meta__" not in entries:
        raise CheckpointError(f"{path}: missing metadata entry")
    meta = json.loads(entries["__meta__"].decode("utf-8"))
    if meta.get("format") != "lowbit-checkpoint":
        raise CheckpointError(f"{path}: not a lowbit checkpoint")
    return meta, entries


def restore_model(model, entries):
    """Load parameters and buffers in place; names and shapes must match."""
    for name, p in model.named_parameters().items():
        key = f"param/{name}"
        if key not in entries:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        arr = entries[key]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"parameter {name}: shape {arr.shape} != {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
    for name, b in model.named_buffers().items():
        key = f"buffer/{name}"
        if key not in entries:
            raise CheckpointError(f"checkpoint is missing buffer {name}")
        arr = entries[key]
        if arr.shape != b.shape:
            raise CheckpointError(f"buffer {name}: shape {arr.shape} != {b.shape}")
        b[...] = arr


def restore_optimizer(opt, index, entries, meta, param_names):
    om = meta["optimizers"][index]
    if om["kind"] != opt.kind:
        raise CheckpointError(f"optimizer {index} kind {om['kind']} != {opt.kind}")
    slots = {}
    for slot, arrays in opt.state_arrays():
        loaded = []
        for pname in param_names:
            key = f"opt{index}/{slot}/{pname}"
            if key not in entries:
                raise CheckpointError(f"checkpoint is missing optimizer entry {key}")
            loaded.append(entries[key])
        slots[slot] = loaded
    opt.load_state_arrays(slots)
    opt.step_count = om["step_count"]
    opt.lr = om["lr"]


def restore_rngs(rngs, meta):
    for name, rng in rngs.items():
        state = meta["rng_states"].get(name)
        if state is None:
            raise CheckpointError(f"checkpoint has no RNG state named {name}")
        rng.bit_generator.state = state

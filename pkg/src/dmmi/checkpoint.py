"""Self-describing single-file checkpoints.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then the payload of concatenated little-endian float32 blobs. The header maps
each tensor name to its shape, dtype and byte offset into the payload.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

MAGIC = b"DMMICKP1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    step: int = 0
    rng: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint):
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4")  # keeps 0-d shapes, unlike ascontiguousarray
        entries[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({
        "tensors": entries,
        "payload_bytes": offset,
        "config": ckpt.config,
        "step": ckpt.step,
        "rng": ckpt.rng,
    }, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    payload = data[16 + hlen:]
    expected = sum(4 * int(np.prod(e["shape"], dtype=np.int64)) for e in header["tensors"].values())
    if expected != header["payload_bytes"] or len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header describes {expected}")
    tensors = {}
    for name, e in header["tensors"].items():
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=e["offset"])
        tensors[name] = arr.reshape(e["shape"]).copy()
    return Checkpoint(tensors, header["config"], header["step"], header["rng"])


def model_tensors(model: torch.nn.Module, prefix="model/") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().astype(np.float32)
            for k, v in model.state_dict().items()}


def optimizer_tensors(model, optimizer, prefix="optim/") -> dict[str, np.ndarray]:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            for key, val in optimizer.state.get(p, {}).items():
                out[f"{prefix}{names[id(p)]}/{key}"] = np.asarray(
                    val.detach().cpu().numpy() if torch.is_tensor(val) else val, dtype=np.float32)
    return out


def restore_model(model: torch.nn.Module, tensors: dict, prefix="model/"):
    """Copy saved tensors into ``model``; every state entry must match by name and shape."""
    state = model.state_dict()
    saved = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    unknown = sorted(set(saved) - set(state))
    if unknown:
        raise CheckpointError(f"unknown parameter {unknown[0]!r} in checkpoint")
    missing = sorted(set(state) - set(saved))
    if missing:
        raise CheckpointError(f"parameter {missing[0]!r} missing from checkpoint")
    new_state = {}
    for name, ref in state.items():
        arr = saved[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {tuple(arr.shape)} vs model {tuple(ref.shape)}")
        new_state[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
    model.load_state_dict(new_state)


def restore_optimizer(model, optimizer, tensors: dict, prefix="optim/"):
    params = dict(model.named_parameters())
    for key, arr in tensors.items():
        if not key.startswith(prefix):
            continue
        name, _, field_name = key[len(prefix):].rpartition("/")
        if name not in params:
            raise CheckpointError(f"optimizer state for unknown parameter {name!r}")
        p = params[name]
        optimizer.state[p][field_name] = torch.from_numpy(arr.copy()).to(
            p.dtype if field_name != "step" else torch.float32)

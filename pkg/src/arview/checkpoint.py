"""Self-describing checkpoint files.

Layout: magic ``ARCK``, a little-endian uint64 header length, a canonical JSON
header (sorted keys, no whitespace), then the raw little-endian bytes of every
array in header order. Arrays are stored in sorted name order so writing the
same checkpoint twice yields identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from arview.errors import ValidationError

MAGIC = b"ARCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    component: str
    step: int
    config: dict  # effective TrainConfig plus the component model config
    weights: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        same = lambda a, b: a.keys() == b.keys() and all(
            a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]) for k in a
        )
        return (
            (self.component, self.step, self.config, self.rng, self.meta)
            == (other.component, other.step, other.config, other.rng, other.meta)
            and same(self.weights, other.weights)
            and same(self.optimizer, other.optimizer)
        )


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for group, arrays in (("weights", ckpt.weights), ("optimizer", ckpt.optimizer)):
        for name in sorted(arrays):
            a = np.asarray(arrays[name])  # tobytes() emits C order; ascontiguousarray would promote 0-d to 1-d
            a = a.astype(a.dtype.newbyteorder("<"), copy=False)
            raw = a.tobytes()
            entries.append({"group": group, "name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = _canonical({
        "format": FORMAT_VERSION, "component": ckpt.component, "step": ckpt.step,
        "config": ckpt.config, "rng": ckpt.rng, "meta": ckpt.meta, "arrays": entries,
    })
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValidationError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack_from("<Q", raw, 4)
    header = json.loads(raw[12 : 12 + n])
    if header.get("format") != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint format {header.get('format')}")
    base = 12 + n
    groups = {"weights": {}, "optimizer": {}}
    for e in header["arrays"]:
        buf = raw[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        groups[e["group"]][e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(tuple(e["shape"])).copy()
    return Checkpoint(header["component"], header["step"], header["config"], groups["weights"],
                      groups["optimizer"], header["rng"], header["meta"])


def state_to_arrays(state: dict) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in state.items()}


def arrays_to_state(arrays: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}


def optimizer_to_arrays(opt: torch.optim.Optimizer, params: list[str]) -> dict[str, np.ndarray]:
    """Flatten optimizer state, keyed by parameter name; hyperparameters live in the config."""
    sd = opt.state_dict()
    out = {}
    for idx, name in enumerate(params):
        for key, val in sd["state"].get(idx, {}).items():
            out[f"{name}/{key}"] = val.detach().cpu().numpy().copy() if torch.is_tensor(val) else np.asarray(val)
    return out


def arrays_to_optimizer(opt: torch.optim.Optimizer, params: list[str], arrays: dict[str, np.ndarray]) -> None:
    sd = opt.state_dict()
    state = {}
    for idx, name in enumerate(params):
        entry = {k.split("/", 1)[1]: torch.from_numpy(np.array(v)) for k, v in arrays.items()
                 if k.split("/", 1)[0] == name}
        if entry:
            state[idx] = entry
    sd["state"] = state
    opt.load_state_dict(sd)

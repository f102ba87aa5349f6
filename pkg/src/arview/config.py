"""Run configuration: one YAML file per run, with command-line overrides.

Precedence, lowest to highest: built-in defaults, the ``--config`` file, the
``ARVIEW_OUT`` environment variable (output root only), command-line flags.
Every flag has a dotted config-file key; see :data:`FLAG_KEYS`.
"""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

from arview.errors import ValidationError

ENV_OUT = "ARVIEW_OUT"

DEFAULTS = {
    "seed": 0,
    "out": None,
    "mode": "hybrid",
    "split": "val",
    "data": {"root": None, "n_scenes": 4, "frames": 9, "size": 64, "kinds": ["orbit", "arc", "dolly", "truck"],
             "val_fraction": 0.25},
    "checkpoints": {"tokenizer": None, "camera_ae": None, "ar": None, "vq": None},
    "sampler": {"temperature": 0.0, "top_k": 0, "top_p": 1.0, "cfg_scale": 1.0, "parallel": 1},  # 0 = argmax
    "sample": {"scene": None},
    "eval": {"oracle": False, "limit": None},
    "train": {},  # TrainConfig overrides for `arview train <component>`
    "stages": {},  # component -> TrainConfig overrides for staged runs and ablations
    "ablation": {"seeds": [0, 1, 2], "tokenizers": True},
}

# flag dest -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "out": "out",
    "mode": "mode",
    "split": "split",
    "data": "data.root",
    "n_scenes": "data.n_scenes",
    "frames": "data.frames",
    "size": "data.size",
    "tokenizer": "checkpoints.tokenizer",
    "camera": "checkpoints.camera_ae",
    "ar": "checkpoints.ar",
    "vq": "checkpoints.vq",
    "temperature": "sampler.temperature",
    "top_k": "sampler.top_k",
    "top_p": "sampler.top_p",
    "cfg_scale": "sampler.cfg_scale",
    "parallel": "sampler.parallel",
    "scene": "sample.scene",
    "oracle": "eval.oracle",
    "limit": "eval.limit",
    "steps": "train.steps",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "seeds": "ablation.seeds",
}


def merge(base: dict, over: dict) -> dict:
    """Recursive dict merge; ``over`` wins."""
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_key(cfg: dict, dotted: str, value) -> None:
    node = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def get_key(cfg: dict, dotted: str, default=None):
    node = cfg
    for p in dotted.split("."):
        if not isinstance(node, dict) or p not in node:
            return default
        node = node[p]
    return node


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: top level must be a mapping")
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
    return data


def resolve(file_cfg: dict | None, flags: dict, command: str, env=None) -> dict:
    """Effective config from defaults, a parsed config file and flag values (``None`` = unset)."""
    env = os.environ if env is None else env
    cfg = merge(DEFAULTS, file_cfg or {})
    if cfg.get("out") is None and env.get(ENV_OUT):
        cfg["out"] = str(Path(env[ENV_OUT]) / command)
    for dest, key in FLAG_KEYS.items():
        value = flags.get(dest)
        if value is not None:
            set_key(cfg, key, value)
    if cfg.get("out") is None:
        cfg["out"] = str(Path("runs") / command)
    return cfg


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)

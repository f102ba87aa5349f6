"""Training loops for the camera autoencoder, the video tokenizer, the AR model and the VQ baseline.

Stages run in order camera_ae -> tokenizer -> ar; each earlier stage is frozen
before the next one consumes it. Every step draws its randomness from a
generator seeded with ``(seed, step)``, and all models train single-worker on
CPU, so a run with a fixed seed reproduces its loss log exactly and a resumed
run continues the uninterrupted one step for step.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from arview.camera_ae import CameraAEConfig, CameraAutoencoder, CameraLossWeights, camera_loss, encode_cameras, split_raymap
from arview.checkpoint import (
    Checkpoint,
    arrays_to_optimizer,
    arrays_to_state,
    optimizer_to_arrays,
    save_checkpoint,
    state_to_arrays,
)
from arview.errors import TrainingDiverged, ValidationError
from arview.geometry import TRAJECTORY_KINDS, CameraIntrinsics, make_trajectory, trajectory_raymaps
from arview.sequencer import MODES, make_plan, pack
from arview.tokenizer import TokenizerConfig, VideoTokenizer, encode_video, tokenizer_loss
from arview.transformer import ArConfig, ArTransformer, ar_loss, collate, condition_dropout
from arview.vq import VqConfig, VqTokenizer, codebook_usage, vq_encode_video, vq_loss

log = logging.getLogger(__name__)

COMPONENTS = ("camera_ae", "tokenizer", "ar", "vq_baseline")
MODEL_CONFIGS = {"camera_ae": CameraAEConfig, "tokenizer": TokenizerConfig, "ar": ArConfig, "vq_baseline": VqConfig}
MODEL_CLASSES = {"camera_ae": CameraAutoencoder, "tokenizer": VideoTokenizer, "ar": ArTransformer,
                 "vq_baseline": VqTokenizer}
COLLAPSE_USAGE = 0.05


@dataclass
class TrainConfig:
    component: str = "ar"
    steps: int = 1000
    batch_size: int = 16
    lr: float = 3e-4
    warmup: int = 100
    seed: int = 0
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    grad_clip: float = 1.0  # 0 disables
    eval_every: int = 0
    ckpt_every: int = 0
    loss_weights: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)  # kwargs for the component's model config
    plan_mode: str = "hybrid"  # ar only
    kinds: tuple = TRAJECTORY_KINDS  # camera_ae only: trajectory families to draw from
    frames: int = 9  # camera_ae only
    size: int = 64  # camera_ae only: ray-map height = width

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.kinds = tuple(self.kinds)
        if self.component not in COMPONENTS:
            raise ValidationError(f"unknown component {self.component!r}; expected one of {COMPONENTS}")
        if self.steps < 0 or self.warmup < 0 or self.warmup > self.steps:
            raise ValidationError(f"need 0 <= warmup <= steps, got warmup={self.warmup}, steps={self.steps}")
        if not self.lr > 0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.plan_mode not in MODES:
            raise ValidationError(f"unknown plan_mode {self.plan_mode!r}")
        self.model_config()  # validates the nested model config

    def model_config(self):
        d = dict(self.model)
        if self.component == "camera_ae" and self.loss_weights:
            d["loss_weights"] = dict(self.loss_weights)
        if self.component in ("tokenizer", "vq_baseline"):
            d.update({k: v for k, v in self.loss_weights.items() if k in ("l1_weight", "l2_weight", "beta")})
        return MODEL_CONFIGS[self.component].from_dict(d)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["kinds"] = list(self.kinds)
        return d

    @classmethod
    def from_dict(cls, d):
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValidationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``cfg.lr`` over ``cfg.warmup`` steps, then cosine decay to 0 at ``cfg.steps``."""
    if not 0 <= step <= cfg.steps:
        raise ValidationError(f"step {step} outside [0, {cfg.steps}]")
    if step <= cfg.warmup:
        return cfg.lr * step / cfg.warmup if cfg.warmup else cfg.lr
    frac = (step - cfg.warmup) / (cfg.steps - cfg.warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay, eps=1e-8)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step), 0x7A11])


# -- datasets --------------------------------------------------------------------------------


@dataclass
class FrameDataset:
    """Clips ``(N, L+1, 3, H, W)`` float32 in [0, 1]."""

    frames: np.ndarray

    @classmethod
    def from_sequences(cls, seqs):
        return cls(np.stack([s.frames_chw() for s in seqs]).astype(np.float32))

    def batch(self, rng, B):
        return torch.from_numpy(self.frames[rng.integers(0, len(self.frames), B)])


@dataclass
class TrajectoryDataset:
    """Procedural camera paths; the camera autoencoder needs poses only, never pixels."""

    kinds: tuple = TRAJECTORY_KINDS
    frames: int = 9
    size: int = 64

    def sample(self, rng) -> np.ndarray:
        kind = self.kinds[int(rng.integers(len(self.kinds)))]
        intr = CameraIntrinsics.from_fov(self.size, self.size)
        traj = make_trajectory(kind, None, n=self.frames, seed=int(rng.integers(2**31)), intrinsics=intr)
        return trajectory_raymaps(traj)

    def batch(self, rng, B):
        return torch.from_numpy(np.stack([self.sample(rng) for _ in range(B)]))


@dataclass
class TokenDataset:
    """Precomputed visual codes ``(N, l+1, h, w)`` and camera tokens ``(N, l+1, h, w, c)``."""

    codes: np.ndarray
    cams: np.ndarray
    vocab_size: int

    def __post_init__(self):
        if self.codes.shape != self.cams.shape[:4]:
            raise ValidationError("token and camera grids disagree")

    @property
    def l(self):
        return self.codes.shape[1] - 1

    @property
    def n(self):
        return self.codes.shape[2] * self.codes.shape[3]

    def batch(self, rng, B, mode):
        seqs = []
        for _ in range(B):
            k = int(rng.integers(len(self.codes)))
            seqs.append(pack(self.codes[k], self.cams[k], make_plan(self.l, self.n, mode, rng=rng)))
        return collate(seqs)


def camera_tokens_for(camera_ae: CameraAutoencoder, seq, per_frame: bool = False) -> np.ndarray:
    """Camera token grid for a rendered sequence.

    ``per_frame`` encodes every raw frame as its own one-frame clip. The
    encoder is causal and treats the first frame independently, so this is the
    first-latent-frame path applied to every pose; it gives a token per raw
    frame for tokenizers without temporal compression.
    """
    rays = trajectory_raymaps(seq.trajectory)
    if per_frame:
        return np.concatenate([encode_cameras(camera_ae, rays[i : i + 1]) for i in range(len(rays))])
    return encode_cameras(camera_ae, rays)


def tokenize_sequences(seqs, tokenizer, camera_ae: CameraAutoencoder) -> TokenDataset:
    """Encode rendered sequences with frozen stage-1/2 models for AR training."""
    codes, cams = [], []
    for s in seqs:
        if isinstance(tokenizer, VqTokenizer):
            codes.append(vq_encode_video(tokenizer, s.frames_chw()).codes)
            cams.append(camera_tokens_for(camera_ae, s, per_frame=True))
        else:
            codes.append(encode_video(tokenizer, s.frames_chw()).codes)
            cams.append(camera_tokens_for(camera_ae, s))
    V = tokenizer.config.vocab_size
    return TokenDataset(np.stack(codes), np.stack(cams).astype(np.float32), V)


# -- checkpoints -----------------------------------------------------------------------------


def build_model(component: str, model_cfg: dict):
    cfg = MODEL_CONFIGS[component].from_dict(model_cfg)
    return MODEL_CLASSES[component](cfg)


def model_from_checkpoint(ckpt: Checkpoint):
    model = build_model(ckpt.component, ckpt.config["model_config"])
    model.load_state_dict(arrays_to_state(ckpt.weights))
    model.eval()
    return model


def _model_config_dict(model):
    return model.config.to_dict()


def _make_checkpoint(component, step, cfg, model, opt, names, meta=None):
    return Checkpoint(
        component=component,
        step=step,
        config=json.loads(json.dumps({"train": cfg.to_dict(), "model_config": _model_config_dict(model)})),
        weights=state_to_arrays(model.state_dict()),
        optimizer=optimizer_to_arrays(opt, names),
        rng={"seed": cfg.seed, "next_step": step},
        meta=dict(meta or {}),
    )


# -- loss closures ---------------------------------------------------------------------------


def _camera_step(model, data, rng, cfg):
    x = data.batch(rng, cfg.batch_size).to(torch.float32)
    pred, _ = model(x)
    total, terms = camera_loss(split_raymap(pred, 2), split_raymap(x, 2), model.config.loss_weights, dim=2)
    return total, dict(zip(("direction", "moment", "unit_norm", "orthogonality"), (t.item() for t in terms)))


def _tokenizer_step(model, data, rng, cfg):
    x = data.batch(rng, cfg.batch_size)
    recon, _ = model(x)
    return tokenizer_loss(recon, x, model.config.l1_weight, model.config.l2_weight), {}


def _vq_step(model, data, rng, cfg):
    x = data.batch(rng, cfg.batch_size)
    recon, index, cb, commit = model(x)
    loss, rec = vq_loss(recon, x, cb, commit, model.config)
    return loss, {"recon": rec.item(), "commit": commit.item(),
                  "usage": codebook_usage(index, model.config.codebook_size)}


def _ar_step(model, data, rng, cfg, mask_cache={}):
    batch = condition_dropout(data.batch(rng, cfg.batch_size, cfg.plan_mode), model.config.p_uncond, rng)
    T = batch.codes.shape[1]
    if T not in mask_cache:
        mask_cache[T] = torch.ones(T, T, dtype=torch.bool).tril()
    logits = model(model.embed_batch(batch), mask_cache[T])
    return ar_loss(logits, batch), {}


STEP_FNS = {"camera_ae": _camera_step, "tokenizer": _tokenizer_step, "ar": _ar_step, "vq_baseline": _vq_step}
EXTRA_COLUMNS = {
    "camera_ae": ("direction", "moment", "unit_norm", "orthogonality"),
    "tokenizer": (),
    "ar": (),
    "vq_baseline": ("recon", "commit", "usage"),
}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: torch.nn.Module
    log: list[dict]
    eval_log: list[dict] = field(default_factory=list)


def _init_vq_codebook(model: VqTokenizer, data: FrameDataset, seed: int):
    """Seed the codebook with encoder outputs so no entry starts dead."""
    rng = np.random.default_rng([seed, 0xC0DE])
    with torch.no_grad():
        z = model.encode_latent(data.batch(rng, min(8, len(data.frames)))).reshape(-1, model.config.code_dim)
        pick = torch.as_tensor(rng.integers(0, len(z), model.config.codebook_size))
        noise = torch.as_tensor(rng.normal(0, 1e-3, tuple(model.codebook.shape)), dtype=z.dtype)
        model.codebook.copy_(z[pick] + noise)


def _format_row(row, columns):
    return [repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in columns]


def train(
    component: str,
    dataset,
    cfg: TrainConfig,
    out_dir=None,
    resume: Checkpoint | None = None,
    evaluate: Callable | None = None,
) -> TrainResult:
    """Train one component.

    ``dataset`` is a :class:`TrajectoryDataset` (camera_ae; ``None`` builds one
    from ``cfg``), a :class:`FrameDataset` (tokenizer, vq_baseline) or a
    :class:`TokenDataset` (ar). With ``out_dir`` the metrics log
    (``metrics.csv``), periodic checkpoints and ``final.ckpt`` are written
    there. ``evaluate(model, step) -> dict`` runs every ``cfg.eval_every`` steps.
    Raises :class:`TrainingDiverged` carrying the last good checkpoint when the
    loss turns non-finite.
    """
    if component != cfg.component:
        raise ValidationError(f"component {component!r} does not match config component {cfg.component!r}")
    if component == "camera_ae" and dataset is None:
        dataset = TrajectoryDataset(cfg.kinds, cfg.frames, cfg.size)
    expected = {"camera_ae": TrajectoryDataset, "tokenizer": FrameDataset, "vq_baseline": FrameDataset,
                "ar": TokenDataset}[component]
    if not isinstance(dataset, expected):
        raise ValidationError(f"{component} training needs a {expected.__name__}, got {type(dataset).__name__}")

    torch.manual_seed(cfg.seed)
    model = MODEL_CLASSES[component](cfg.model_config())
    if component == "ar" and model.config.vocab_size != dataset.vocab_size:
        raise ValidationError(f"AR vocab {model.config.vocab_size} != tokenizer vocab {dataset.vocab_size}")
    names = [n for n, p in model.named_parameters() if p.requires_grad]
    opt = make_optimizer(model, cfg)
    start = 0
    if resume is not None:
        if resume.component != component:
            raise ValidationError("resume checkpoint is for a different component")
        model.load_state_dict(arrays_to_state(resume.weights))
        arrays_to_optimizer(opt, names, resume.optimizer)
        start = resume.step
        if start > cfg.steps:
            raise ValidationError(f"checkpoint step {start} is beyond cfg.steps {cfg.steps}")
    elif component == "vq_baseline":
        _init_vq_codebook(model, dataset, cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    columns = ["step", "loss", "lr", "grad_norm", *EXTRA_COLUMNS[component]]
    log_file = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        new = resume is None or not (out / "metrics.csv").exists()
        log_file = open(out / "metrics.csv", "w" if new else "a", newline="")
        writer = csv.writer(log_file)
        if new:
            log_file.write("# config " + json.dumps(cfg.to_dict(), sort_keys=True) + "\n")
            writer.writerow(columns)

    step_fn = STEP_FNS[component]
    rows, eval_rows = [], []
    last_good = resume or _make_checkpoint(component, start, cfg, model, opt, names)
    low_usage_warned = False
    model.train()
    try:
        for step in range(start, cfg.steps):
            rng = step_rng(cfg.seed, step)
            torch.manual_seed(int(rng.integers(2**62)))
            lr = lr_at(step + 1, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            try:
                loss, extra = step_fn(model, dataset, rng, cfg)
            except FloatingPointError as e:
                raise TrainingDiverged(f"non-finite activations at step {step + 1}: {e}", last_good, step + 1) from e
            if not torch.isfinite(loss):
                if out is not None:
                    save_checkpoint(last_good, out / "last_good.ckpt")
                raise TrainingDiverged(f"loss became {loss.item()} at step {step + 1}", last_good, step + 1)
            loss.backward()
            params = [p for p in model.parameters() if p.grad is not None]
            if cfg.grad_clip > 0:
                gn = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
            else:
                gn = float(torch.linalg.vector_norm(torch.stack([p.grad.norm() for p in params])))
            opt.step()
            row = {"step": step + 1, "loss": loss.item(), "lr": float(lr), "grad_norm": gn, **extra}
            rows.append(row)
            if writer is not None:
                writer.writerow(_format_row(row, columns))
                log_file.flush()
            if component == "vq_baseline" and extra["usage"] < COLLAPSE_USAGE and not low_usage_warned:
                msg = f"codebook collapse: usage {extra['usage']:.3f} < {COLLAPSE_USAGE} at step {step + 1}"
                log.warning(msg)
                warnings.warn(msg, RuntimeWarning)
                if log_file is not None:
                    log_file.write(f"# warning {msg}\n")
                low_usage_warned = True
            done = step + 1
            if cfg.ckpt_every and done % cfg.ckpt_every == 0:
                last_good = _make_checkpoint(component, done, cfg, model, opt, names)
                if out is not None:
                    save_checkpoint(last_good, out / f"step_{done:06d}.ckpt")
            if evaluate is not None and cfg.eval_every and done % cfg.eval_every == 0:
                eval_rows.append({"step": done, **evaluate(model, done)})
                model.train()
    finally:
        if log_file is not None:
            log_file.close()

    model.eval()
    meta = {"final_loss": rows[-1]["loss"]} if rows else {}
    ckpt = _make_checkpoint(component, cfg.steps, cfg, model, opt, names, meta)
    if out is not None:
        save_checkpoint(ckpt, out / "final.ckpt")
        if eval_rows:
            (out / "eval.json").write_text(json.dumps(eval_rows, indent=1, sort_keys=True) + "\n")
    return TrainResult(ckpt, model, rows, eval_rows)


def train_vq_baseline(dataset: FrameDataset, cfg: TrainConfig, out_dir=None, resume=None) -> TrainResult:
    if cfg.component != "vq_baseline":
        raise ValidationError("train_vq_baseline needs component='vq_baseline'")
    return train("vq_baseline", dataset, cfg, out_dir, resume)


def read_metrics(path) -> tuple[dict, list[dict]]:
    """Parse a metrics log back into ``(config, rows)``."""
    text = Path(path).read_text()
    config, body = {}, []
    for line in text.splitlines():
        if line.startswith("# config "):
            config = json.loads(line[len("# config "):])
        elif not line.startswith("#"):
            body.append(line)
    rows = []
    for r in csv.DictReader(io.StringIO("\n".join(body))):
        rows.append({k: (int(v) if k == "step" else float(v)) for k, v in r.items()})
    return config, rows

"""Pixel metrics, per-frame drift analysis, run evaluation and the ablation harness."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import torch

from arview.checkpoint import load_checkpoint
from arview.errors import ValidationError
from arview.sequencer import make_plan, plan_rng
from arview.tokenizer import decode_video, encode_video
from arview.training import TrainConfig, camera_tokens_for, model_from_checkpoint
from arview.transformer import SamplerConfig, generate
from arview.vq import VqTokenizer, vq_decode_video, vq_encode_video

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LUMA = np.array([0.299, 0.587, 0.114])
SCHEMA_VERSION = 1


# -- metrics ---------------------------------------------------------------------------------


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for frames in [0, 1]; identical frames give the 99 dB cap."""
    a, b = _pair(a, b)
    if a.min(initial=0) < 0 or b.min(initial=0) < 0 or a.max(initial=0) > 1 or b.max(initial=0) > 1:
        raise ValidationError("psnr expects values in [0, 1]")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def to_gray(x: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` RGB -> ``(H, W)`` luma; 2-D input is returned as is."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x
    if x.ndim == 3 and x.shape[0] == 3:
        return np.tensordot(LUMA, x, axes=1)
    raise ValidationError(f"expected (3, H, W) or (H, W) frame, got {x.shape}")


def ssim_map(a, b) -> np.ndarray:
    """Local SSIM over every 8x8 window position (uniform weights, population moments)."""
    a, b = _pair(a, b)
    x, y = to_gray(a), to_gray(b)
    k = SSIM_WINDOW
    if x.shape[0] < k or x.shape[1] < k:
        raise ValidationError(f"frame {x.shape} is smaller than the {k}x{k} SSIM window")
    win = lambda z: np.lib.stride_tricks.sliding_window_view(z, (k, k)).mean(axis=(-1, -2))
    mx, my = win(x), win(y)
    vx = win(x * x) - mx * mx
    vy = win(y * y) - my * my
    cxy = win(x * y) - mx * my
    return ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / ((mx**2 + my**2 + SSIM_C1) * (vx + vy + SSIM_C2))


def ssim(a, b) -> float:
    return float(ssim_map(a, b).mean())


def drift_slope(values) -> float:
    """Least-squares slope of a per-frame metric against frame index (units per frame)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return 0.0
    t = np.arange(1, len(v) + 1, dtype=np.float64)
    return float(np.polyfit(t, v, 1)[0])


def late_drop(values) -> float:
    """Mean of the first quarter of frames minus mean of the last quarter."""
    v = np.asarray(values, dtype=np.float64)
    q = max(1, len(v) // 4)
    return float(v[:q].mean() - v[-q:].mean())


# -- camera autoencoder ----------------------------------------------------------------------

HELD_OUT_STREAM = 0xE7A1  # training batches draw from a different rng stream


@torch.no_grad()
def camera_ae_report(model, kinds=None, frames: int = 9, size: int = 64, n: int = 32, seed: int = 0) -> dict:
    """Round-trip ``n`` held-out procedural trajectories; mean angular error (degrees),
    mean ``| |d_hat| - 1 |`` and mean ``|d_hat . m_hat|`` over every decoded ray."""
    from arview.camera_ae import angular_error_deg
    from arview.training import TRAJECTORY_KINDS, TrajectoryDataset

    data = TrajectoryDataset(tuple(kinds or TRAJECTORY_KINDS), frames, size)
    rng = np.random.default_rng([seed, HELD_OUT_STREAM])
    was = model.training
    model.eval()
    ang, norm, orth = [], [], []
    for _ in range(n):
        x = data.batch(rng, 1).to(next(model.parameters()).dtype)
        pred = model(x)[0][0].double().numpy()
        d_hat, m_hat, d = pred[:, :3], pred[:, 3:], x[0, :, :3].double().numpy()
        ang.append(angular_error_deg(d_hat, d, axis=1).mean())
        norm.append(np.abs(np.linalg.norm(d_hat, axis=1) - 1).mean())
        orth.append(np.abs((d_hat * m_hat).sum(1)).mean())
    model.train(was)
    return {"angle_deg": float(np.mean(ang)), "norm_dev": float(np.mean(norm)), "orth": float(np.mean(orth)),
            "n": n}


# -- reports ---------------------------------------------------------------------------------

_NUM_LIST = {"type": "array", "items": {"type": "number"}}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "scenes", "per_frame", "summary", "meta"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "scenes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "psnr", "ssim"],
                "properties": {
                    "name": {"type": "string"},
                    "psnr": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": PSNR_CAP}},
                    "ssim": {"type": "array", "items": {"type": "number", "minimum": -1, "maximum": 1}},
                },
            },
        },
        "per_frame": {"type": "object", "required": ["psnr", "ssim"],
                      "properties": {"psnr": _NUM_LIST, "ssim": _NUM_LIST}},
        "summary": {
            "type": "object",
            "required": ["psnr", "ssim", "psnr_slope", "psnr_late_drop"],
            "properties": {k: {"type": "number"} for k in ("psnr", "ssim", "psnr_slope", "psnr_late_drop")},
        },
        "meta": {"type": "object"},
    },
}


@dataclass
class MetricsReport:
    scenes: list[dict]  # {"name", "psnr": [...], "ssim": [...]} per target frame
    meta: dict = field(default_factory=dict)

    @property
    def per_frame_psnr(self) -> np.ndarray:
        return np.mean([s["psnr"] for s in self.scenes], axis=0)

    @property
    def per_frame_ssim(self) -> np.ndarray:
        return np.mean([s["ssim"] for s in self.scenes], axis=0)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([s["psnr"] for s in self.scenes]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s["ssim"] for s in self.scenes]))

    def to_dict(self) -> dict:
        pf = self.per_frame_psnr
        return {
            "schema_version": SCHEMA_VERSION,
            "scenes": [{"name": s["name"], "psnr": [float(v) for v in s["psnr"]],
                        "ssim": [float(v) for v in s["ssim"]]} for s in self.scenes],
            "per_frame": {"psnr": [float(v) for v in pf], "ssim": [float(v) for v in self.per_frame_ssim]},
            "summary": {"psnr": self.mean_psnr, "ssim": self.mean_ssim,
                        "psnr_slope": drift_slope(pf), "psnr_late_drop": late_drop(pf)},
            "meta": self.meta,
        }

    def to_json(self) -> str:
        d = self.to_dict()
        jsonschema.validate(d, REPORT_SCHEMA)
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        jsonschema.validate(d, REPORT_SCHEMA)
        return cls(d["scenes"], d["meta"])


# -- generation + evaluation -----------------------------------------------------------------


@dataclass
class CheckpointSet:
    tokenizer: Path
    camera_ae: Path
    ar: Path

    def load(self):
        for role in ("tokenizer", "camera_ae", "ar"):
            p = Path(getattr(self, role))
            if not p.exists():
                raise FileNotFoundError(f"missing {role} checkpoint: {p}")
        tok = model_from_checkpoint(load_checkpoint(self.tokenizer))
        cam = model_from_checkpoint(load_checkpoint(self.camera_ae))
        ar = model_from_checkpoint(load_checkpoint(self.ar))
        if ar.config.vocab_size != tok.config.vocab_size:
            raise ValidationError(f"AR vocabulary {ar.config.vocab_size} != tokenizer vocabulary "
                                  f"{tok.config.vocab_size}")
        if ar.config.cam_dim != cam.config.c_cam:
            raise ValidationError(f"AR camera width {ar.config.cam_dim} != camera tokens {cam.config.c_cam}")
        return tok, cam, ar


def encode_clip(tokenizer, frames) -> np.ndarray:
    if isinstance(tokenizer, VqTokenizer):
        return vq_encode_video(tokenizer, frames).codes
    return encode_video(tokenizer, frames).codes


def decode_clip(tokenizer, codes) -> np.ndarray:
    if isinstance(tokenizer, VqTokenizer):
        return vq_decode_video(tokenizer, codes)
    return decode_video(tokenizer, codes)


def frame_metrics(pred, target):
    """Per-frame PSNR and SSIM for clips ``(T, 3, H, W)``."""
    return [psnr(p, t) for p, t in zip(pred, target)], [ssim(p, t) for p, t in zip(pred, target)]


@torch.no_grad()
def generate_clip(models, seq, plan_mode: str, sampler: SamplerConfig, scene_index: int = 0, oracle=False):
    """Generate the target frames of one rendered sequence; returns ``(frames, codes, plan)``."""
    tok, cam, ar = models
    gt = seq.frames_chw()
    codes = encode_clip(tok, gt)
    per_frame = isinstance(tok, VqTokenizer)
    cams = camera_tokens_for(cam, seq, per_frame=per_frame)
    lp1, h, w = codes.shape
    plan = make_plan(lp1 - 1, h * w, plan_mode, seed=sampler.seed, rng=plan_rng(sampler.seed, scene_index))
    scfg = SamplerConfig(**{**sampler.to_dict(), "seed": int(plan_rng(sampler.seed, scene_index, 1).integers(2**31))})
    gt_sampler = (lambda row, f, c: int(codes[f].reshape(-1)[c])) if oracle else None
    targets = generate(ar, codes[0], cams, plan, scfg, sampler=gt_sampler)
    grid = np.concatenate([codes[:1], targets])
    return decode_clip(tok, grid), grid, plan


def eval_run(ckpts: CheckpointSet, data_root, split: str = "val", sampler: SamplerConfig | None = None,
             plan_mode: str = "hybrid", oracle: bool = False, out=None, limit: int | None = None,
             meta: dict | None = None) -> MetricsReport:
    """Generate every scene of ``split`` from its condition frame and score the target frames."""
    from arview.data import load_manifest, load_sequence

    sampler = sampler or SamplerConfig(temperature=0.0)
    models = ckpts.load()
    names = load_manifest(data_root)["splits"][split] if split != "all" else None
    if names is None:
        man = load_manifest(data_root)
        names = sorted(man["splits"]["train"] + man["splits"]["val"])
    names = names[:limit] if limit else names
    scenes = []
    for k, name in enumerate(names):
        seq = load_sequence(data_root, name)
        frames, _, _ = generate_clip(models, seq, plan_mode, sampler, k, oracle)
        p, s = frame_metrics(frames[1:], seq.frames_chw()[1:])
        scenes.append({"name": name, "psnr": p, "ssim": s})
        log.info("%s: mean PSNR %.2f dB", name, float(np.mean(p)))
    report = MetricsReport(scenes, {"split": split, "plan_mode": plan_mode, "oracle": oracle,
                                    "sampler": sampler.to_dict(), **(meta or {})})
    if out is not None:
        report.save(out)
    return report


def reconstruction_report(tokenizer, data_root, split="val") -> MetricsReport:
    """Per-frame metrics of plain tokenizer reconstruction (the ceiling for generation)."""
    from arview.data import load_manifest, load_sequence

    scenes = []
    for name in load_manifest(data_root)["splits"][split]:
        gt = load_sequence(data_root, name).frames_chw()
        rec = decode_clip(tokenizer, encode_clip(tokenizer, gt))
        p, s = frame_metrics(rec[1:], gt[1:])
        scenes.append({"name": name, "psnr": p, "ssim": s})
    return MetricsReport(scenes, {"split": split, "reconstruction": True})


def contact_sheet(condition, generated, truth, path) -> Path:
    """Three rows (condition repeated, generated, ground truth) saved as a binary PPM."""
    from PIL import Image

    gen = np.asarray(generated)
    cond = np.repeat(np.asarray(condition)[None], len(gen), 0)
    rows = [np.concatenate(list(r.transpose(0, 2, 3, 1)), axis=1) for r in (cond, gen, np.asarray(truth))]
    img = np.round(np.clip(np.concatenate(rows, axis=0), 0, 1) * 255).astype(np.uint8)
    path = Path(path)
    Image.fromarray(img).save(path, format="PPM")
    return path


# -- ablations -------------------------------------------------------------------------------

BUDGET_FIELDS = ("steps", "batch_size", "lr", "warmup", "betas", "weight_decay", "grad_clip", "model",
                 "loss_weights")


def check_budgets(configs) -> None:
    """Arms must be identical except for plan mode and seed."""
    ref = None
    for cfg in configs:
        d = {k: cfg.to_dict()[k] for k in BUDGET_FIELDS}
        if ref is None:
            ref = d
        elif d != ref:
            diff = sorted(k for k in BUDGET_FIELDS if d[k] != ref[k])
            raise ValidationError(f"ablation arms differ in budget fields {diff}")


@dataclass
class ArmResult:
    arm: str
    seeds: list[int]
    reports: list[MetricsReport]

    @property
    def psnr(self) -> float:
        return float(np.mean([r.mean_psnr for r in self.reports]))

    @property
    def ssim(self) -> float:
        return float(np.mean([r.mean_ssim for r in self.reports]))

    @property
    def per_frame_psnr(self) -> np.ndarray:
        return np.mean([r.per_frame_psnr for r in self.reports], axis=0)

    def row(self) -> dict:
        pf = self.per_frame_psnr
        return {"arm": self.arm, "psnr": self.psnr, "ssim": self.ssim,
                "psnr_per_seed": [r.mean_psnr for r in self.reports],
                "ssim_per_seed": [r.mean_ssim for r in self.reports],
                "per_frame_psnr": [float(v) for v in pf],
                "psnr_slope": drift_slope(pf), "psnr_late_drop": late_drop(pf)}


def format_table(arms) -> str:
    """Fixed-width table of :class:`ArmResult` objects or their ``row()`` dicts."""
    lines = [f"{'arm':<10} {'PSNR':>8} {'SSIM':>7} {'slope':>8} {'late drop':>9}  per-seed PSNR"]
    for a in arms:
        r = a if isinstance(a, dict) else a.row()
        seeds = " ".join(f"{v:.2f}" for v in r["psnr_per_seed"])
        lines.append(f"{r['arm']:<10} {r['psnr']:8.3f} {r['ssim']:7.4f} {r['psnr_slope']:8.3f} "
                     f"{r['psnr_late_drop']:9.3f}  {seeds}")
    return "\n".join(lines)


def ablation_orders(data_root, cfg: TrainConfig | dict, tokenizer_ckpt, camera_ckpt, cache,
                    seeds=(0, 1, 2), modes=("raster", "full", "hybrid"),
                    sampler: SamplerConfig | None = None) -> list[ArmResult]:
    """Train one AR model per (plan mode, seed) with identical budgets and evaluate on the val split.

    ``cfg`` is a shared :class:`TrainConfig` or a mapping ``mode -> TrainConfig``;
    arms whose budgets differ raise :class:`ValidationError`.
    """
    from arview.experiments import train_ar_stage

    per_mode = cfg if isinstance(cfg, dict) else {m: cfg for m in modes}
    if set(per_mode) != set(modes):
        raise ValidationError("one config per plan mode is required")
    check_budgets(per_mode.values())
    sampler = sampler or SamplerConfig(temperature=0.0)
    arms = []
    for mode in modes:
        reports = []
        for seed in seeds:
            arm_cfg = TrainConfig.from_dict({**per_mode[mode].to_dict(), "plan_mode": mode, "seed": seed})
            ar = train_ar_stage(cache, f"ar-{mode}-s{seed}", arm_cfg, data_root, tokenizer_ckpt, camera_ckpt)
            report_path = ar.parent / f"eval-{_sampler_key(sampler)}.json"
            if report_path.exists():
                reports.append(MetricsReport.load(report_path))
                continue
            rep = eval_run(CheckpointSet(tokenizer_ckpt, camera_ckpt, ar), data_root, "val", sampler, mode,
                           meta={"arm": mode, "seed": seed})
            rep.save(report_path)
            reports.append(rep)
        arms.append(ArmResult(mode, list(seeds), reports))
    return arms


def _sampler_key(s: SamplerConfig) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(s.to_dict(), sort_keys=True).encode()).hexdigest()[:8]


@torch.no_grad()
def teacher_forced_ce(ar, data, mode: str = "hybrid", plans_per_scene: int = 4, seed: int = 0) -> float:
    """Mean target cross entropy (nats/token) over random plans of every sequence in a TokenDataset."""
    from arview.sequencer import pack
    from arview.transformer import ar_loss, collate

    ar.eval()
    losses = []
    for k in range(len(data.codes)):
        for j in range(plans_per_scene):
            plan = make_plan(data.l, data.n, mode, rng=plan_rng(seed, k, j))
            batch = collate([pack(data.codes[k], data.cams[k], plan)])
            T = batch.codes.shape[1]
            logits = ar(ar.embed_batch(batch, use_drop=False), torch.ones(T, T, dtype=torch.bool).tril())
            losses.append(float(ar_loss(logits, batch)))
    return float(np.mean(losses))


def compare_tokenizers(data_root, cfg: TrainConfig, video_tokenizer_ckpt, vq_ckpt, camera_ckpt, cache,
                       seeds=(0, 1, 2), sampler: SamplerConfig | None = None) -> list[ArmResult]:
    """Video-tokenizer arm vs per-frame VQ arm: same AR budget, seeds and (hybrid) plan mode."""
    from arview.experiments import train_ar_stage

    sampler = sampler or SamplerConfig(temperature=0.0)
    arms = []
    for arm, tok in (("video", video_tokenizer_ckpt), ("vq", vq_ckpt)):
        reports = []
        for seed in seeds:
            arm_cfg = TrainConfig.from_dict({**cfg.to_dict(), "plan_mode": "hybrid", "seed": seed})
            # the video arm shares its cache entry with the hybrid arm of the order ablation
            name = f"ar-hybrid-s{seed}" if arm == "video" else f"ar-vq-s{seed}"
            ar = train_ar_stage(cache, name, arm_cfg, data_root, tok, camera_ckpt)
            report_path = ar.parent / f"eval-{_sampler_key(sampler)}.json"
            if report_path.exists():
                reports.append(MetricsReport.load(report_path))
                continue
            rep = eval_run(CheckpointSet(tok, camera_ckpt, ar), data_root, "val", sampler, "hybrid",
                           meta={"arm": arm, "seed": seed})
            rep.save(report_path)
            reports.append(rep)
        arms.append(ArmResult(arm, list(seeds), reports))
    return arms

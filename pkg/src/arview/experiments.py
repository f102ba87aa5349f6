"""Staged toy experiments with a content-addressed run cache.

Each stage trains one component into ``<cache>/<name>-<key>/`` where ``key``
hashes the training config, the dataset recipe and the bytes of every
upstream checkpoint. A finished stage (``final.ckpt`` present) is loaded
instead of retrained, so the long acceptance runs can be produced once (for
example in the background with ``arview ablate``) and reused by the tests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from arview.checkpoint import load_checkpoint
from arview.data import load_split, make_dataset
from arview.training import (
    FrameDataset,
    TrainConfig,
    TrajectoryDataset,
    model_from_checkpoint,
    tokenize_sequences,
    train,
)

log = logging.getLogger(__name__)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:12]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


@dataclass
class DatasetRecipe:
    n_scenes: int
    frames: int = 9
    size: int = 64
    seed: int = 0
    kinds: tuple = ("orbit", "arc", "dolly", "truck")
    val_fraction: float = 0.25

    def key(self):
        return _digest({**self.__dict__, "kinds": list(self.kinds)})

    def build(self, cache) -> Path:
        root = Path(cache) / f"data-{self.n_scenes}-{self.key()}"
        if not (root / "manifest.json").exists():
            log.info("rendering %d scenes into %s", self.n_scenes, root)
            make_dataset(root, self.n_scenes, self.frames, self.kinds, self.size, self.size, self.seed,
                         self.val_fraction)
        return root


@dataclass
class Stage:
    """One cached training run."""

    name: str
    cfg: TrainConfig
    upstream: dict = field(default_factory=dict)  # role -> checkpoint path
    data_key: str = ""

    def dir(self, cache) -> Path:
        key = _digest({"cfg": self.cfg.to_dict(), "data": self.data_key,
                       "upstream": {k: file_digest(v) for k, v in sorted(self.upstream.items())}})
        return Path(cache) / f"{self.name}-{key}"

    def done(self, cache) -> bool:
        return (self.dir(cache) / "final.ckpt").exists()

    def run(self, cache, dataset_fn) -> Path:
        d = self.dir(cache)
        if not self.done(cache):
            log.info("training %s -> %s", self.name, d)
            start = time.perf_counter()
            train(self.cfg.component, dataset_fn(), self.cfg, out_dir=d)
            # wall time lives outside the checkpoint so checkpoints stay byte-reproducible
            (d / "timing.json").write_text(json.dumps({"seconds": time.perf_counter() - start}) + "\n")
        return d / "final.ckpt"


def stage_seconds(ckpt) -> float | None:
    """Recorded training wall time of a cached stage, if known."""
    p = Path(ckpt).parent / "timing.json"
    return json.loads(p.read_text())["seconds"] if p.exists() else None


def load_model(path):
    return model_from_checkpoint(load_checkpoint(path))


def train_camera_stage(cache, cfg: TrainConfig) -> Path:
    stage = Stage("camera_ae", cfg)
    return stage.run(cache, lambda: TrajectoryDataset(cfg.kinds, cfg.frames, cfg.size))


def train_frames_stage(cache, name: str, cfg: TrainConfig, data_root, split="train") -> Path:
    """Tokenizer or VQ baseline on the frames of a dataset split."""
    stage = Stage(name, cfg, data_key=f"{file_digest(Path(data_root) / 'manifest.json')}:{split}")
    return stage.run(cache, lambda: FrameDataset.from_sequences(load_split(data_root, split)))


def train_ar_stage(cache, name: str, cfg: TrainConfig, data_root, tokenizer_ckpt, camera_ckpt,
                   split="train") -> Path:
    stage = Stage(name, cfg, upstream={"tokenizer": tokenizer_ckpt, "camera_ae": camera_ckpt},
                  data_key=f"{file_digest(Path(data_root) / 'manifest.json')}:{split}")

    def dataset():
        tok, cam = load_model(tokenizer_ckpt), load_model(camera_ckpt)
        return tokenize_sequences(load_split(data_root, split), tok, cam)

    return stage.run(cache, dataset)


def replace_cfg(cfg: TrainConfig, **kw) -> TrainConfig:
    return TrainConfig.from_dict({**cfg.to_dict(), **kw})


# -- toy presets -----------------------------------------------------------------------------
# Widths and model sizes are scaled down from the reference configuration so
# that every stage trains in well under an hour on a single CPU core.

TOY_CAMERA = TrainConfig(component="camera_ae", steps=1000, batch_size=4, lr=3e-3, warmup=100, seed=0,
                         model={"c_cam": 16, "widths": [16, 32, 64], "out_norm": False, "skip_in": True,
                                "skip_out": True})
TOY_TOKENIZER = TrainConfig(component="tokenizer", steps=2000, batch_size=4, lr=1e-3, warmup=100, seed=0,
                            model={"levels": [8, 8, 8], "widths": [16, 32, 64]})
TOY_VQ = TrainConfig(component="vq_baseline", steps=2000, batch_size=4, lr=1e-3, warmup=100, seed=0,
                     model={"codebook_size": 512, "code_dim": 8, "widths": [16, 32, 64]})
TOY_AR = TrainConfig(component="ar", steps=2000, batch_size=8, lr=1e-3, warmup=100, seed=0,
                     model={"dim": 128, "layers": 4, "heads": 4, "vocab_size": 512, "cam_dim": 16})

OVERFIT_DATA = DatasetRecipe(n_scenes=4, seed=1, val_fraction=0.0)
ABLATION_DATA = DatasetRecipe(n_scenes=32, seed=2, val_fraction=0.25)
OVERFIT_TOKENIZER = replace_cfg(TOY_TOKENIZER, steps=2000)
OVERFIT_AR = replace_cfg(TOY_AR, steps=2000)
ABLATION_TOKENIZER = replace_cfg(TOY_TOKENIZER, steps=2000)
ABLATION_AR = replace_cfg(TOY_AR, steps=1500)


def run_overfit(cache, camera_cfg=TOY_CAMERA, data=OVERFIT_DATA, tok_cfg=OVERFIT_TOKENIZER,
                ar_cfg=OVERFIT_AR) -> dict:
    """Staged training on a handful of scenes, then generation of those same (memorized) trajectories."""
    from arview.evaluation import CheckpointSet, eval_run, reconstruction_report, teacher_forced_ce

    cache = Path(cache)
    camera = train_camera_stage(cache, camera_cfg)
    root = data.build(cache)
    tok = train_frames_stage(cache, "tokenizer-overfit", tok_cfg, root)
    ar = train_ar_stage(cache, "ar-overfit", ar_cfg, root, tok, camera)
    summary_path = ar.parent / "overfit-summary.json"
    if summary_path.exists():
        return json.loads(summary_path.read_text())
    tokens = tokenize_sequences(load_split(root, "train"), load_model(tok), load_model(camera))
    ce = teacher_forced_ce(load_model(ar), tokens, ar_cfg.plan_mode)
    gen = eval_run(CheckpointSet(tok, camera, ar), root, "train", plan_mode=ar_cfg.plan_mode,
                   out=ar.parent / "overfit-eval.json")
    rec = reconstruction_report(load_model(tok), root, "train")
    summary = {"ce": ce, "psnr": gen.mean_psnr, "ssim": gen.mean_ssim, "recon_psnr": rec.mean_psnr,
               "final_train_loss": load_checkpoint(ar).meta.get("final_loss"),
               "checkpoints": {"camera_ae": str(camera), "tokenizer": str(tok), "ar": str(ar)}}
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def run_ablation(cache, camera_cfg=TOY_CAMERA, data=ABLATION_DATA, tok_cfg=ABLATION_TOKENIZER,
                 vq_cfg=TOY_VQ, ar_cfg=ABLATION_AR, seeds=(0, 1, 2), tokenizers: bool = True,
                 sampler=None) -> dict:
    """Plan-order ablation (raster / full / hybrid) and, with ``tokenizers``, the video-vs-VQ comparison."""
    from arview.evaluation import ablation_orders, compare_tokenizers, reconstruction_report

    cache = Path(cache)
    camera = train_camera_stage(cache, camera_cfg)
    root = data.build(cache)
    tok = train_frames_stage(cache, "tokenizer-ablation", tok_cfg, root)
    orders = ablation_orders(root, ar_cfg, tok, camera, cache, seeds, sampler=sampler)
    out = {"orders": [a.row() for a in orders],
           "recon": {"video": reconstruction_report(load_model(tok), root).mean_psnr}}
    if tokenizers:
        vq = train_frames_stage(cache, "vq-ablation", vq_cfg, root)
        arms = compare_tokenizers(root, ar_cfg, tok, vq, camera, cache, seeds, sampler=sampler)
        out["tokenizers"] = [a.row() for a in arms]
        out["recon"]["vq"] = reconstruction_report(load_model(vq), root).mean_psnr
    return out

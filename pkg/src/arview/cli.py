"""``arview`` command line: dataset generation, training, sampling, evaluation and ablations.

Every command resolves an effective config (see :mod:`arview.config`), writes a
``run.json`` manifest into its output directory before doing any work, and
updates it with the produced files when done. ``--replay run.json`` reruns a
command from its manifest; later flags still override (typically ``--out``).

Exit codes: 0 success, 2 usage error, 3 validation error (bad values, missing
files), 4 runtime or training failure. Failures print exactly one JSON line on
stderr: ``{"error": <kind>, "exit_code": <n>, "message": <text>}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from arview import __version__
from arview import config as C
from arview.errors import TrainingDiverged, ValidationError

log = logging.getLogger("arview")

COMMANDS = ("make-data", "train", "sample", "eval", "ablate")
TRAIN_COMPONENTS = ("camera_ae", "tokenizer", "vq_baseline", "ar")
MANIFEST = "run.json"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- run manifest ----------------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)  # role -> path
    checkpoint_ids: dict = field(default_factory=dict)  # role -> sha256 prefix of the checkpoint bytes
    outputs: list = field(default_factory=list)
    component: str | None = None
    status: str = "started"
    version: str = __version__

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        os.replace(tmp, path)
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        try:
            return cls(**json.loads(path.read_text()))
        except (TypeError, json.JSONDecodeError) as e:
            raise ValidationError(f"{path}: not a run manifest ({e})") from e


def _checkpoint_ids(paths: dict) -> dict:
    from arview.experiments import file_digest

    ids = {}
    for role, p in paths.items():
        if p is None:
            continue
        if not Path(p).exists():
            raise FileNotFoundError(f"missing {role} checkpoint: {p}")
        ids[role] = file_digest(p)
    return ids


def _require(cfg, key, what):
    value = C.get_key(cfg, key)
    if value is None:
        raise ValidationError(f"{what} is required (flag or config key {key!r})")
    return value


def _sampler(cfg, seed):
    from arview.transformer import SamplerConfig

    return SamplerConfig(**{**cfg["sampler"], "seed": seed})


# -- commands --------------------------------------------------------------------------------


def cmd_make_data(cfg, man: RunManifest) -> Path:
    from arview.data import make_dataset

    d = cfg["data"]
    root = Path(d["root"] or cfg["out"])
    make_dataset(root, d["n_scenes"], d["frames"], tuple(d["kinds"]), d["size"], d["size"], cfg["seed"],
                 d["val_fraction"])
    man.outputs = [str(root / "manifest.json")]
    return root


def _train_config(cfg, component):
    from arview.training import TrainConfig

    body = {**cfg["train"], "component": component, "seed": cfg["seed"]}
    if component == "ar":
        body.setdefault("plan_mode", cfg["mode"])
    for k in ("frames", "size"):
        body.setdefault(k, cfg["data"][k])
    return TrainConfig.from_dict(body)


def cmd_train(cfg, man: RunManifest) -> Path:
    from arview.checkpoint import load_checkpoint
    from arview.data import load_split
    from arview.experiments import load_model
    from arview.training import FrameDataset, tokenize_sequences, train

    component = man.component
    tcfg = _train_config(cfg, component)
    out = Path(cfg["out"])
    if component == "camera_ae":
        data = None
    else:
        root = _require(cfg, "data.root", "--data")
        man.inputs["data"] = str(root)
        seqs = load_split(root, "train")
        if component == "ar":
            tok_p = _require(cfg, "checkpoints.tokenizer", "--tokenizer")
            cam_p = _require(cfg, "checkpoints.camera_ae", "--camera")
            man.checkpoint_ids = _checkpoint_ids({"tokenizer": tok_p, "camera_ae": cam_p})
            data = tokenize_sequences(seqs, load_model(tok_p), load_model(cam_p))
        else:
            data = FrameDataset.from_sequences(seqs)
    resume = cfg.get("resume")
    if resume:
        man.inputs["resume"] = str(resume)
    man.write(out)
    train(component, data, tcfg, out_dir=out, resume=load_checkpoint(resume) if resume else None)
    man.outputs = [str(out / "metrics.csv"), str(out / "final.ckpt")]
    return out / "final.ckpt"


def _checkpoint_set(cfg, man):
    from arview.evaluation import CheckpointSet

    paths = {r: _require(cfg, f"checkpoints.{r}", f"--{r if r != 'camera_ae' else 'camera'}")
             for r in ("tokenizer", "camera_ae", "ar")}
    man.checkpoint_ids = _checkpoint_ids(paths)
    return CheckpointSet(**paths)


def cmd_sample(cfg, man: RunManifest) -> Path:
    from arview.data import load_manifest, load_sequence
    from arview.evaluation import contact_sheet, generate_clip
    from arview.sequencer import save_plan
    from arview.tokenizer import TokenGrid, save_token_grid
    from arview.vq import VqTokenizer

    root = _require(cfg, "data.root", "--data")
    ckpts = _checkpoint_set(cfg, man)
    split = load_manifest(root)["splits"].get(cfg["split"]) or []
    scene = cfg["sample"]["scene"] or (split[0] if split else None)
    if scene is None:
        raise ValidationError(f"split {cfg['split']!r} is empty; pass --scene or --split")
    man.inputs.update(data=str(root), scene=scene)
    out = Path(cfg["out"])
    man.write(out)
    models = ckpts.load()
    seq = load_sequence(root, scene)
    frames, grid, plan = generate_clip(models, seq, cfg["mode"], _sampler(cfg, cfg["seed"]))
    tok = models[0]
    levels = (tok.config.codebook_size,) if isinstance(tok, VqTokenizer) else tuple(tok.config.levels)
    save_token_grid(TokenGrid(grid, levels), out / "tokens.grid")
    save_plan(plan, out / "plan.json")
    gt = seq.frames_chw()
    contact_sheet(gt[0], frames[1:], gt[1:], out / "sheet.ppm")
    man.outputs = [str(out / n) for n in ("tokens.grid", "plan.json", "sheet.ppm")]
    return out / "tokens.grid"


def cmd_eval(cfg, man: RunManifest) -> Path:
    from arview.evaluation import eval_run

    root = _require(cfg, "data.root", "--data")
    ckpts = _checkpoint_set(cfg, man)
    man.inputs["data"] = str(root)
    out = Path(cfg["out"])
    man.write(out)
    report = eval_run(ckpts, root, cfg["split"], _sampler(cfg, cfg["seed"]), cfg["mode"], cfg["eval"]["oracle"],
                      out / "report.json", cfg["eval"]["limit"], meta={"checkpoints": man.checkpoint_ids})
    print(f"mean PSNR {report.mean_psnr:.3f} dB  mean SSIM {report.mean_ssim:.4f}  ({len(report.scenes)} scenes)")
    man.outputs = [str(out / "report.json")]
    return out / "report.json"


def cmd_ablate(cfg, man: RunManifest) -> Path:
    """Plan-order and tokenizer ablations.

    With ``--data --tokenizer --camera`` (and optionally ``--vq``) the AR arms
    are trained on that dataset; otherwise the toy presets build everything
    under the output directory, which doubles as the run cache.
    """
    from arview import experiments as X
    from arview.evaluation import ablation_orders, compare_tokenizers, format_table

    out = Path(cfg["out"])
    seeds = tuple(int(s) for s in cfg["ablation"]["seeds"])
    stages = cfg["stages"]
    ar_cfg = X.replace_cfg(X.ABLATION_AR, **stages.get("ar", {}), **cfg["train"])
    man.write(out)
    sampler = _sampler(cfg, cfg["seed"])
    if C.get_key(cfg, "data.root") is None:
        overrides = {k: X.replace_cfg(base, **stages.get(name, {})) for k, base, name in (
            ("camera_cfg", X.TOY_CAMERA, "camera_ae"), ("tok_cfg", X.ABLATION_TOKENIZER, "tokenizer"),
            ("vq_cfg", X.TOY_VQ, "vq_baseline"))}
        result = X.run_ablation(out, ar_cfg=ar_cfg, seeds=seeds, tokenizers=cfg["ablation"]["tokenizers"],
                                sampler=sampler, **overrides)
        orders, tokenizers = result["orders"], result.get("tokenizers", [])
    else:
        root = cfg["data"]["root"]
        paths = {"tokenizer": _require(cfg, "checkpoints.tokenizer", "--tokenizer"),
                 "camera_ae": _require(cfg, "checkpoints.camera_ae", "--camera"),
                 "vq": cfg["checkpoints"]["vq"]}
        man.checkpoint_ids = _checkpoint_ids(paths)
        man.inputs["data"] = str(root)
        tok, cam = X.load_model(paths["tokenizer"]), X.load_model(paths["camera_ae"])
        ar_cfg = X.replace_cfg(ar_cfg, model={**ar_cfg.model, "vocab_size": tok.config.vocab_size,
                                              "cam_dim": cam.config.c_cam})
        arms = ablation_orders(root, ar_cfg, paths["tokenizer"], paths["camera_ae"], out, seeds, sampler=sampler)
        orders = [a.row() for a in arms]
        tokenizers = []
        if paths["vq"]:
            if X.load_model(paths["vq"]).config.vocab_size != tok.config.vocab_size:
                raise ValidationError("the VQ codebook size must equal the video tokenizer vocabulary")
            vq_arms = compare_tokenizers(root, ar_cfg, paths["tokenizer"], paths["vq"], paths["camera_ae"], out,
                                         seeds, sampler=sampler)
            tokenizers = [a.row() for a in vq_arms]
        result = {"orders": orders, "tokenizers": tokenizers}
    table = format_table(orders) + ("\n\n" + format_table(tokenizers) if tokenizers else "")
    print(table)
    (out / "ablation.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    (out / "table.txt").write_text(table + "\n")
    man.outputs = [str(out / "ablation.json"), str(out / "table.txt")]
    return out / "table.txt"


HANDLERS = {"make-data": cmd_make_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "ablate": cmd_ablate}


# -- argument parsing ------------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="YAML config file; flags override its values")
    p.add_argument("--replay", help="rerun from a run.json manifest; flags override its config")
    p.add_argument("--seed", type=int, help="global seed (config: seed)")
    p.add_argument("--out", help=f"output directory (config: out; default ${C.ENV_OUT}/<command>)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _models(p, vq=False):
    p.add_argument("--data", help="dataset root (config: data.root)")
    p.add_argument("--tokenizer", help="tokenizer checkpoint (config: checkpoints.tokenizer)")
    p.add_argument("--camera", help="camera autoencoder checkpoint (config: checkpoints.camera_ae)")
    if vq:
        p.add_argument("--vq", help="per-frame VQ tokenizer checkpoint (config: checkpoints.vq)")
    else:
        p.add_argument("--ar", help="transformer checkpoint (config: checkpoints.ar)")


def _sampling(p):
    p.add_argument("--mode", choices=("raster", "full", "hybrid"), help="plan mode (config: mode; default hybrid)")
    p.add_argument("--cfg-scale", type=float, help="guidance weight (config: sampler.cfg_scale; default 1.0)")
    p.add_argument("--parallel", type=int, help="tokens per forward pass (config: sampler.parallel; default 1)")
    p.add_argument("--temperature", type=float, help="0 means argmax (config: sampler.temperature)")
    p.add_argument("--top-k", type=int, help="config: sampler.top_k (0 disables)")
    p.add_argument("--top-p", type=float, help="config: sampler.top_p")
    p.add_argument("--split", choices=("train", "val", "all"), help="dataset split (config: split)")


def build_parser() -> Parser:
    parser = Parser(prog="arview", description="Autoregressive novel view synthesis at desk scale.")
    parser.add_argument("--version", action="version", version=f"arview {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("make-data", help="render a synthetic multi-view dataset")
    _common(p)
    p.add_argument("--n-scenes", type=int, help="config: data.n_scenes")
    p.add_argument("--frames", type=int, help="frames per scene (config: data.frames)")
    p.add_argument("--size", type=int, help="image side in pixels (config: data.size)")

    p = sub.add_parser("train", help="train one component")
    _common(p)
    p.add_argument("component", choices=TRAIN_COMPONENTS)
    p.add_argument("--data", help="dataset root (config: data.root)")
    p.add_argument("--tokenizer", help="tokenizer checkpoint, for ar (config: checkpoints.tokenizer)")
    p.add_argument("--camera", help="camera autoencoder checkpoint, for ar (config: checkpoints.camera_ae)")
    p.add_argument("--mode", choices=("raster", "full", "hybrid"), help="ar plan mode (config: mode)")
    p.add_argument("--steps", type=int, help="config: train.steps")
    p.add_argument("--batch-size", type=int, help="config: train.batch_size")
    p.add_argument("--lr", type=float, help="config: train.lr")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("sample", help="generate the target frames of one scene")
    _common(p)
    _models(p)
    _sampling(p)
    p.add_argument("--scene", help="scene name (config: sample.scene; default first scene of the split)")

    p = sub.add_parser("eval", help="generate and score every scene of a split")
    _common(p)
    _models(p)
    _sampling(p)
    p.add_argument("--oracle", action="store_true", default=None, help="feed ground-truth codes (config: eval.oracle)")
    p.add_argument("--limit", type=int, help="score only the first N scenes (config: eval.limit)")

    p = sub.add_parser("ablate", help="plan-order and tokenizer ablations")
    _common(p)
    _models(p, vq=True)
    _sampling(p)
    p.add_argument("--seeds", type=int, nargs="+", help="training seeds per arm (config: ablation.seeds)")
    p.add_argument("--steps", type=int, help="AR steps per arm (config: train.steps)")
    return parser


def resolve_config(args) -> tuple[dict, RunManifest]:
    flags = {k: v for k, v in vars(args).items() if v is not None}
    file_cfg = {}
    if args.replay:
        old = RunManifest.read(args.replay)
        if old.command != args.command:
            raise ValidationError(f"manifest is for {old.command!r}, not {args.command!r}")
        if getattr(args, "component", None) not in (None, old.component):
            raise ValidationError(f"manifest trained {old.component!r}")
        file_cfg = {k: v for k, v in old.config.items() if k in C.DEFAULTS}
        if "out" not in flags:
            file_cfg.pop("out", None)
    if args.config:
        file_cfg = C.merge(file_cfg, C.load_config_file(args.config))
    cfg = C.resolve(file_cfg, flags, args.command)
    if getattr(args, "resume", None):
        cfg["resume"] = args.resume
    man = RunManifest(args.command, {k: v for k, v in cfg.items() if k in C.DEFAULTS}, int(cfg["seed"]),
                      component=getattr(args, "component", None))
    return cfg, man


def _fail(kind: str, code: int, message: str) -> int:
    line = json.dumps({"error": kind, "exit_code": code, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail("usage", 2, str(e))
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    man = None
    try:
        cfg, man = resolve_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        man.write(out)
        result = HANDLERS[args.command](cfg, man)
        man.status = "done"
        man.write(out)
        log.info("done: %s", result)
        return 0
    except (ValidationError, FileNotFoundError, NotADirectoryError, jsonschema.ValidationError) as e:
        return _fail("validation", 3, str(e))
    except TrainingDiverged as e:
        return _fail("diverged", 4, f"{e} (last good checkpoint at step {e.step and e.checkpoint.step})")
    except (RuntimeError, OSError, np.linalg.LinAlgError) as e:
        return _fail("runtime", 4, f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())

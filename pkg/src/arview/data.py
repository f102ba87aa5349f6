"""Procedural multi-view scenes rendered by ray casting, with exact poses.

Scenes are a checkered ground plane ``y = 0``, a few axis-aligned boxes and
spheres with Lambertian albedo, and a flat background. One directional light
plus ambient term, no shadows. Rendering is float64 numpy and bit-for-bit
deterministic.

Dataset layout::

    <root>/manifest.json          splits, size, seed, scene list
    <root>/scene_0000/poses.txt   geometry trajectory format
    <root>/scene_0000/scene.json  SceneSpec provenance
    <root>/scene_0000/frame_000.rgb  uint32 LE header (H, W, 3) + row-major uint8 RGB
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from arview.errors import ValidationError
from arview.geometry import (
    CameraExtrinsics,
    CameraIntrinsics,
    Trajectory,
    _cast_rays,
    camera_center,
    load_trajectory,
    make_trajectory,
    save_trajectory,
)

LIGHT_DIR = np.array([0.4, 0.8, 0.3]) / np.linalg.norm([0.4, 0.8, 0.3])  # toward the light
AMBIENT = 0.35
DIFFUSE = 0.65
FAR = 60.0
REGION = 2.0  # primitives live in |x|, |z| <= REGION, 0 <= y <= REGION


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple
    albedo: tuple


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitives: tuple
    checker_a: tuple = (0.85, 0.85, 0.8)
    checker_b: tuple = (0.3, 0.35, 0.4)
    checker_size: float = 1.0
    background: tuple = (0.55, 0.7, 0.9)

    def __post_init__(self):
        if not self.primitives:
            raise ValidationError("a scene needs at least one primitive")
        for p in self.primitives:
            lo, hi = _bounds(p)
            if np.any(np.abs(lo[[0, 2]]) > REGION + 1e-9) or np.any(np.abs(hi[[0, 2]]) > REGION + 1e-9) \
                    or lo[1] < -1e-9 or hi[1] > REGION + 1e-9:
                raise ValidationError(f"primitive {p} leaves the bounded region")

    def to_dict(self):
        return {
            "seed": self.seed,
            "primitives": [{"type": type(p).__name__.lower(), **asdict(p)} for p in self.primitives],
            "checker_a": list(self.checker_a), "checker_b": list(self.checker_b),
            "checker_size": self.checker_size, "background": list(self.background),
        }

    @classmethod
    def from_dict(cls, d):
        prims = []
        for p in d["primitives"]:
            p = dict(p)
            kind = p.pop("type")
            p = {k: tuple(v) if isinstance(v, list) else v for k, v in p.items()}
            prims.append(Box(**p) if kind == "box" else Sphere(**p))
        rest = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k != "primitives"}
        return cls(primitives=tuple(prims), **rest)


def _bounds(p):
    c = np.asarray(p.center, dtype=np.float64)
    h = np.asarray(p.half, dtype=np.float64) if isinstance(p, Box) else np.full(3, p.radius)
    return c - h, c + h


def make_scene(seed: int, n_primitives: tuple[int, int] = (2, 4)) -> SceneSpec:
    rng = np.random.default_rng(seed)
    prims = []
    for _ in range(int(rng.integers(n_primitives[0], n_primitives[1] + 1))):
        albedo = tuple(float(v) for v in rng.uniform(0.15, 0.95, 3))
        if rng.random() < 0.5:
            half = rng.uniform(0.25, 0.6, 3)
            c = rng.uniform(-REGION + half, REGION - half)
            c[1] = half[1]
            prims.append(Box(tuple(float(v) for v in c), tuple(float(v) for v in half), albedo))
        else:
            r = float(rng.uniform(0.3, 0.7))
            c = rng.uniform(-REGION + r, REGION - r, 3)
            c[1] = r
            prims.append(Sphere(tuple(float(v) for v in c), r, albedo))
    a = tuple(float(v) for v in rng.uniform(0.6, 0.9, 3))
    b = tuple(float(v) for v in rng.uniform(0.15, 0.4, 3))
    bg = tuple(float(v) for v in rng.uniform(0.4, 0.9, 3))
    return SceneSpec(seed, tuple(prims), a, b, float(rng.uniform(0.8, 1.4)), bg)


def _hit_plane(o, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -o[..., 1] / d[..., 1]
    return np.where((d[..., 1] < 0) & (s > 0), s, np.inf)


def _hit_sphere(o, d, sph):
    oc = o - np.asarray(sph.center)
    b = (oc * d).sum(-1)
    c = (oc * oc).sum(-1) - sph.radius**2
    disc = b * b - c
    sq = np.sqrt(np.maximum(disc, 0))
    s0, s1 = -b - sq, -b + sq
    s = np.where(s0 > 1e-9, s0, s1)
    return np.where((disc >= 0) & (s > 1e-9), s, np.inf)


def _hit_box(o, d, box):
    lo, hi = _bounds(box)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    s = np.where(tmin > 1e-9, tmin, tmax)
    return np.where((tmax >= tmin) & (s > 1e-9), s, np.inf)


def _box_normal(p, box):
    c = np.asarray(box.center)
    h = np.asarray(box.half)
    rel = (p - c) / h
    axis = np.argmax(np.abs(rel), axis=-1)
    n = np.zeros_like(p)
    np.put_along_axis(n, axis[..., None], np.sign(np.take_along_axis(rel, axis[..., None], -1)), -1)
    return n


def shade_rays(scene: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Color ``(..., 3)`` and hit distance for rays; misses get the background and ``inf``."""
    o = np.broadcast_to(origins, dirs.shape)
    best = np.minimum(_hit_plane(o, dirs), FAR)
    best = np.where(best >= FAR, np.inf, best)
    which = np.full(dirs.shape[:-1], -1)
    for k, p in enumerate(scene.primitives):
        s = _hit_sphere(o, dirs, p) if isinstance(p, Sphere) else _hit_box(o, dirs, p)
        closer = s < best
        best = np.where(closer, s, best)
        which = np.where(closer, k, which)

    color = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), dirs.shape).copy()
    hit = np.isfinite(best)
    pts = o + dirs * np.where(hit, best, 0)[..., None]

    plane = hit & (which < 0)
    if plane.any():
        cell = np.floor(pts[..., 0] / scene.checker_size) + np.floor(pts[..., 2] / scene.checker_size)
        albedo = np.where((cell.astype(np.int64) % 2 == 0)[..., None], scene.checker_a, scene.checker_b)
        lam = AMBIENT + DIFFUSE * max(0.0, LIGHT_DIR[1])
        color = np.where(plane[..., None], albedo * lam, color)
    for k, p in enumerate(scene.primitives):
        sel = hit & (which == k)
        if not sel.any():
            continue
        if isinstance(p, Sphere):
            n = (pts - np.asarray(p.center)) / p.radius
        else:
            n = _box_normal(pts, p)
        lam = AMBIENT + DIFFUSE * np.maximum(0.0, n @ LIGHT_DIR)
        color = np.where(sel[..., None], np.asarray(p.albedo) * lam[..., None], color)
    return np.clip(color, 0, 1), best


def render(scene: SceneSpec, intr: CameraIntrinsics, ext: CameraExtrinsics, H: int, W: int) -> np.ndarray:
    """``(H, W, 3)`` float64 image in [0, 1]."""
    if (H, W) != (intr.height, intr.width):
        raise ValidationError("render size does not match intrinsics")
    vs, us = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    d, _ = _cast_rays(intr, ext, us, vs)
    color, _ = shade_rays(scene, camera_center(ext), d)
    return color


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_frame(path, img_u8: np.ndarray) -> None:
    H, W, C = img_u8.shape
    Path(path).write_bytes(struct.pack("<3I", H, W, C) + np.ascontiguousarray(img_u8).tobytes())


def read_frame(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    H, W, C = struct.unpack_from("<3I", raw)
    return np.frombuffer(raw, dtype=np.uint8, offset=12).reshape(H, W, C)


@dataclass
class RenderedSequence:
    frames: np.ndarray  # (L+1, H, W, 3) uint8
    trajectory: Trajectory
    scene: SceneSpec
    kind: str = ""

    def frames_chw(self) -> np.ndarray:
        """``(L+1, 3, H, W)`` float32 in [0, 1]."""
        return (self.frames.astype(np.float32) / 255.0).transpose(0, 3, 1, 2)


def render_sequence(scene: SceneSpec, traj: Trajectory, kind: str = "") -> RenderedSequence:
    frames = [to_uint8(render(scene, i, e, i.height, i.width)) for i, e in traj]
    return RenderedSequence(np.stack(frames), traj, scene, kind)


def scene_trajectory(seed: int, kind: str, n: int, H: int, W: int) -> Trajectory:
    return make_trajectory(kind, None, n=n, seed=seed, intrinsics=CameraIntrinsics.from_fov(W, H))


def make_dataset(
    root,
    n_scenes: int,
    frames_per_scene: int = 9,
    kinds=("orbit", "arc", "dolly", "truck"),
    H: int = 64,
    W: int = 64,
    seed: int = 0,
    val_fraction: float = 0.25,
) -> Path:
    """Render ``n_scenes`` sequences under ``root``; returns the dataset root."""
    if n_scenes < 1 or frames_per_scene < 2 or H < 1 or W < 1:
        raise ValidationError("make_dataset: parameters must be positive (frames_per_scene >= 2)")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise OSError(f"dataset destination {root} is not writable: {e}") from e
    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2**31 - 1, n_scenes)
    names = []
    for k in range(n_scenes):
        s = int(scene_seeds[k])
        kind = kinds[k % len(kinds)]
        seq = render_sequence(make_scene(s), scene_trajectory(s, kind, frames_per_scene, H, W), kind)
        d = root / f"scene_{k:04d}"
        d.mkdir(exist_ok=True)
        for f, img in enumerate(seq.frames):
            write_frame(d / f"frame_{f:03d}.rgb", img)
        save_trajectory(seq.trajectory, d / "poses.txt")
        (d / "scene.json").write_text(json.dumps({"kind": kind, "scene": seq.scene.to_dict()}, indent=1) + "\n")
        names.append(d.name)
    n_val = int(round(n_scenes * val_fraction)) if n_scenes > 1 else 0
    order = np.random.default_rng([seed, 1]).permutation(n_scenes)
    val = sorted(names[i] for i in order[:n_val])
    train = sorted(names[i] for i in order[n_val:])
    manifest = {"version": 1, "seed": seed, "height": H, "width": W, "frames": frames_per_scene,
                "kinds": list(kinds), "splits": {"train": train, "val": val}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise ValidationError(f"{root} is not a dataset (missing manifest.json)")
    return json.loads(path.read_text())


def load_sequence(root, name: str) -> RenderedSequence:
    root = Path(root)
    man = load_manifest(root)
    d = root / name
    traj = load_trajectory(d / "poses.txt", man["width"], man["height"])
    frames = np.stack([read_frame(d / f"frame_{f:03d}.rgb") for f in range(len(traj))])
    meta = json.loads((d / "scene.json").read_text())
    return RenderedSequence(frames, traj, SceneSpec.from_dict(meta["scene"]), meta["kind"])


def load_split(root, split: str = "train") -> list[RenderedSequence]:
    man = load_manifest(root)
    if split == "all":
        names = sorted(man["splits"]["train"] + man["splits"]["val"])
    elif split in man["splits"]:
        names = man["splits"][split]
    else:
        raise ValidationError(f"unknown split {split!r}")
    return [load_sequence(root, n) for n in names]

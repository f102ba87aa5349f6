"""Camera math: intrinsics/extrinsics, Pluecker ray maps and synthetic trajectories.

Conventions
-----------
* Extrinsics map world to camera: ``x_cam = R @ x_world + t``. The camera
  center is ``o = -R.T @ t``.
* Camera frame is OpenCV style: x right, y down, z forward.
* Rays go through pixel centers ``(u + 0.5, v + 0.5)`` and are expressed in
  the world frame.
* A ray is stored as Pluecker coordinates ``(d, m)`` with ``|d| = 1`` and
  ``m = o x d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from arview.errors import ValidationError

ORTHO_TOL = 1e-6
TRAJECTORY_KINDS = ("orbit", "dolly", "truck", "arc")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValidationError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float = 60.0) -> "CameraIntrinsics":
        """Square pixels, centered principal point, horizontal field of view ``fov_deg``."""
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class CameraExtrinsics:
    """World-to-camera rigid transform."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValidationError("extrinsics contain non-finite values")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1) > ORTHO_TOL:
            raise ValidationError("R is not a proper rotation (R^T R != I or det(R) != 1)")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def matrix(self) -> np.ndarray:
        """3x4 ``[R | t]``."""
        return np.concatenate([self.R, self.t[:, None]], axis=1)

    def __eq__(self, other):
        if not isinstance(other, CameraExtrinsics):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)


@dataclass(frozen=True, eq=False)
class PlueckerRaymap:
    d: np.ndarray  # (H, W, 3) unit directions, world frame
    m: np.ndarray  # (H, W, 3) moments o x d

    def to_array(self) -> np.ndarray:
        """Channel-first ``(6, H, W)`` stack ``[d, m]``, the autoencoder input layout."""
        return np.concatenate([self.d, self.m], axis=-1).transpose(2, 0, 1)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PlueckerRaymap":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 6:
            raise ValidationError(f"expected (6, H, W) raymap, got {arr.shape}")
        hwc = arr.transpose(1, 2, 0)
        return cls(hwc[..., :3], hwc[..., 3:])


Pose = tuple[CameraIntrinsics, CameraExtrinsics]


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[Pose, ...]

    def __post_init__(self):
        if len(self.poses) < 2:
            raise ValidationError("a trajectory needs at least 2 poses (condition view + targets)")
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)

    def __getitem__(self, i):
        return self.poses[i]


def camera_center(ext: CameraExtrinsics) -> np.ndarray:
    if not isinstance(ext, CameraExtrinsics):
        ext = CameraExtrinsics(*ext)
    return -ext.R.T @ ext.t


def _cast_rays(intr: CameraIntrinsics, ext: CameraExtrinsics, us: np.ndarray, vs: np.ndarray):
    # shared kernel for pixel_ray and compute_raymap so both produce identical bits
    x = (us + 0.5 - intr.cx) / intr.fx
    y = (vs + 0.5 - intr.cy) / intr.fy
    cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    world = cam @ ext.R  # row-vector form of R.T @ cam
    d = world / np.linalg.norm(world, axis=-1, keepdims=True)
    o = camera_center(ext)
    m = np.cross(np.broadcast_to(o, d.shape), d)
    return d, m


def pixel_ray(intr: CameraIntrinsics, ext: CameraExtrinsics, u: float, v: float):
    """Pluecker ray ``(d, m)`` through the center of pixel ``(u, v)``."""
    if intr.fx == 0 or intr.fy == 0:
        raise ValidationError("degenerate intrinsics")
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise ValidationError(f"pixel ({u}, {v}) outside {intr.width}x{intr.height}")
    d, m = _cast_rays(intr, ext, np.array([u], dtype=np.float64), np.array([v], dtype=np.float64))
    return d[0], m[0]


def compute_raymap(intr: CameraIntrinsics, ext: CameraExtrinsics, H: int, W: int) -> PlueckerRaymap:
    if (H, W) != (intr.height, intr.width):
        raise ValidationError(f"raymap size {H}x{W} does not match intrinsics {intr.height}x{intr.width}")
    vs, us = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    d, m = _cast_rays(intr, ext, us, vs)
    return PlueckerRaymap(d, m)


def trajectory_raymaps(traj: Trajectory) -> np.ndarray:
    """Stacked ``(L+1, 6, H, W)`` float32 raymaps for every pose of ``traj``."""
    out = []
    for intr, ext in traj:
        out.append(compute_raymap(intr, ext, intr.height, intr.width).to_array())
    return np.stack(out).astype(np.float32)


def project(intr: CameraIntrinsics, ext: CameraExtrinsics, points: np.ndarray):
    """Project world points ``(..., 3)``; returns continuous pixel coords and camera depth.

    Pixel ``(u, v)`` covers ``[u, u+1) x [v, v+1)``, matching the ray convention.
    """
    pc = points @ ext.R.T + ext.t
    z = pc[..., 2]
    u = intr.fx * pc[..., 0] / z + intr.cx
    v = intr.fy * pc[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), z


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle in degrees between two rotations."""
    c = (np.trace(Ra.T @ Rb) - 1) / 2
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> CameraExtrinsics:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise ValidationError("look_at: up vector is parallel to the viewing direction")
    right /= n
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])  # rows: camera axes in world coords
    return CameraExtrinsics(R, -R @ eye)


def _rng_uniform(rng, lo, hi):
    return float(rng.uniform(lo, hi))


def make_trajectory(
    kind: str,
    params: dict | None = None,
    n: int = 9,
    seed: int = 0,
    intrinsics: CameraIntrinsics | None = None,
) -> Trajectory:
    """Deterministic synthetic camera path.

    Kinds and their ``params`` (unset entries are drawn from ``seed``):

    ``orbit``  center, radius [3, 5], height [0.8, 2], start_deg, step_deg (|step| <= max_step_deg)
    ``arc``    like orbit plus a linear height change ``rise`` over the path
    ``dolly``  eye, target, step (world units moved along the view axis per frame)
    ``truck``  eye, target, step (world units moved along the camera x axis per frame)

    ``max_step_deg`` (default 10) bounds the rotation between consecutive poses.
    """
    if kind not in TRAJECTORY_KINDS:
        raise ValidationError(f"unknown trajectory kind {kind!r}; expected one of {TRAJECTORY_KINDS}")
    if n < 2:
        raise ValidationError("trajectory needs n >= 2")
    p = dict(params or {})
    rng = np.random.default_rng(seed)
    intr = intrinsics or CameraIntrinsics.from_fov(64, 64)
    max_step = float(p.get("max_step_deg", 10.0))
    center = np.asarray(p.get("center", (0.0, 0.5, 0.0)), dtype=np.float64)

    poses = []
    if kind in ("orbit", "arc"):
        radius = float(p.get("radius", _rng_uniform(rng, 3.0, 5.0)))
        height = float(p.get("height", _rng_uniform(rng, 0.8, 2.0)))
        start = float(p.get("start_deg", _rng_uniform(rng, 0.0, 360.0)))
        step = float(p.get("step_deg", _rng_uniform(rng, -4.0, 4.0)))
        rise = float(p.get("rise", _rng_uniform(rng, -0.5, 0.5) if kind == "arc" else 0.0))
        if radius <= 0:
            raise ValidationError("radius must be positive")
        if abs(step) > max_step:
            raise ValidationError(f"step_deg {step} exceeds max_step_deg {max_step}")
        for k in range(n):
            a = math.radians(start + k * step)
            y = height + rise * k / (n - 1)
            eye = center + np.array([radius * math.sin(a), y - center[1], radius * math.cos(a)])
            poses.append((intr, look_at(eye, center)))
    else:
        if "eye" in p:
            eye0 = np.asarray(p["eye"], dtype=np.float64)
        else:
            a = _rng_uniform(rng, 0.0, 2 * math.pi)
            r = _rng_uniform(rng, 3.5, 5.0)
            eye0 = np.array([r * math.sin(a), _rng_uniform(rng, 0.8, 2.0), r * math.cos(a)])
        target = np.asarray(p.get("target", center), dtype=np.float64)
        step = float(p.get("step", _rng_uniform(rng, 0.05, 0.15) * (1 if kind == "dolly" else rng.choice([-1, 1]))))
        ext0 = look_at(eye0, target)
        axis = ext0.R[2] if kind == "dolly" else ext0.R[0]
        for k in range(n):
            eye = eye0 + k * step * axis
            # translate without rotating: keep R, recompute t
            poses.append((intr, CameraExtrinsics(ext0.R, -ext0.R @ eye)))

    traj = Trajectory(tuple(poses))
    for (_, a), (_, b) in zip(traj.poses[:-1], traj.poses[1:]):
        if rotation_angle(a.R, b.R) > max_step + 1e-9:
            raise ValidationError("consecutive rotation exceeds max_step_deg")
    return traj


def save_trajectory(traj: Trajectory, path) -> None:
    """One pose per line: ``fx fy cx cy`` then the 12 row-major entries of ``[R | t]``."""
    lines = []
    for intr, ext in traj:
        vals = [intr.fx, intr.fy, intr.cx, intr.cy, *ext.matrix.reshape(-1)]
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_trajectory(path, width: int, height: int) -> Trajectory:
    poses = []
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 16:
            raise ValidationError(f"{path}:{lineno}: expected 16 numbers, got {len(parts)}")
        vals = [float(x) for x in parts]
        intr = CameraIntrinsics(*vals[:4], width=width, height=height)
        M = np.array(vals[4:]).reshape(3, 4)
        poses.append((intr, CameraExtrinsics(M[:, :3], M[:, 3])))
    return Trajectory(tuple(poses))


def stack_poses(traj: Sequence[Pose]):
    """Arrays ``(K (N,3,3), R (N,3,3), t (N,3))`` for a pose sequence."""
    K = np.stack([i.K for i, _ in traj])
    R = np.stack([e.R for _, e in traj])
    t = np.stack([e.t for _, e in traj])
    return K, R, t

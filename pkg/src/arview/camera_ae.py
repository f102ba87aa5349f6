"""Camera autoencoder: Pluecker ray-map sequences <-> camera tokens on the visual latent grid."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from arview.errors import ValidationError
from arview.layers import CausalDecoder3d, CausalEncoder3d, compression


@dataclass(frozen=True)
class CameraLossWeights:
    direction: float = 1.0
    moment: float = 1.0
    unit_norm: float = 0.1
    orthogonality: float = 0.1

    def __post_init__(self):
        if min(self.as_tuple()) < 0:
            raise ValidationError(f"camera loss weights must be >= 0, got {self.as_tuple()}")

    def as_tuple(self):
        return (self.direction, self.moment, self.unit_norm, self.orthogonality)


@dataclass
class CameraAEConfig:
    c_cam: int = 16
    widths: tuple = (32, 64, 128)
    time_down: tuple = (False, True, True)
    # moments are divided by this before encoding and multiplied back after decoding
    moment_scale: float = 4.0
    norm_groups: int = 8  # 0 disables per-frame group normalization
    out_norm: bool = False  # normalize before the encoder and decoder output heads
    upsample: str = "nearest"  # decoder upsampling: "nearest" or sub-pixel "shuffle"
    skip_out: bool = True  # decoder emits a bilinearly upsampled output at every resolution
    skip_in: bool = True  # encoder adds a projection of the pooled ray map to its output
    freeze: bool = True  # frozen for AR training; False allows joint finetuning
    loss_weights: CameraLossWeights = field(default_factory=CameraLossWeights)

    @property
    def r_t(self):
        return compression(self.time_down, len(self.widths))[0]

    @property
    def r_s(self):
        return compression(self.time_down, len(self.widths))[1]

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["time_down"] = list(self.time_down)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss_weights" in d and isinstance(d["loss_weights"], dict):
            d["loss_weights"] = CameraLossWeights(**d["loss_weights"])
        for k in ("widths", "time_down"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def check_video_shape(T: int, H: int, W: int, r_t: int, r_s: int):
    """Validate an ``(L+1)``-frame clip against compression ratios; returns ``(l+1, h, w)``."""
    if T < 1:
        raise ValidationError("need at least one frame")
    if (T - 1) % r_t:
        raise ValidationError(f"L = {T - 1} target frames is not divisible by r_t = {r_t}")
    if H % r_s or W % r_s:
        raise ValidationError(f"spatial size {H}x{W} is not divisible by r_s = {r_s}")
    return (T - 1) // r_t + 1, H // r_s, W // r_s


class CameraAutoencoder(nn.Module):
    def __init__(self, config: CameraAEConfig | None = None):
        super().__init__()
        self.config = config or CameraAEConfig()
        c = self.config
        self.encoder = CausalEncoder3d(6, c.c_cam, c.widths, c.time_down, c.norm_groups, c.out_norm,
                                       c.skip_in)
        self.decoder = CausalDecoder3d(c.c_cam, 6, c.widths, c.time_down, c.norm_groups, c.out_norm, c.upsample,
                                       c.skip_out)
        scale = torch.tensor([1.0, 1.0, 1.0] + [1.0 / c.moment_scale] * 3)
        self.register_buffer("in_scale", scale.view(1, 6, 1, 1, 1), persistent=False)

    def encode(self, raymaps: torch.Tensor) -> torch.Tensor:
        """``(B, L+1, 6, H, W)`` ray maps -> ``(B, l+1, h, w, c_cam)`` camera tokens."""
        if raymaps.dim() != 5 or raymaps.shape[2] != 6:
            raise ValidationError(f"expected (B, L+1, 6, H, W) ray maps, got {tuple(raymaps.shape)}")
        _, T, _, H, W = raymaps.shape
        check_video_shape(T, H, W, self.config.r_t, self.config.r_s)
        x = raymaps.transpose(1, 2) * self.in_scale
        return self.encoder(x).permute(0, 2, 3, 4, 1)

    def decode(self, tokens: torch.Tensor) -> torch.Tensor:
        """``(B, l+1, h, w, c_cam)`` -> ``(B, L+1, 6, H, W)`` with ``L = l * r_t``."""
        if tokens.dim() != 5 or tokens.shape[-1] != self.config.c_cam:
            raise ValidationError(
                f"expected (B, l+1, h, w, {self.config.c_cam}) camera tokens, got {tuple(tokens.shape)}"
            )
        y = self.decoder(tokens.permute(0, 4, 1, 2, 3)) / self.in_scale
        return y.transpose(1, 2)

    def forward(self, raymaps):
        tokens = self.encode(raymaps)
        return self.decode(tokens), tokens


def _as_batch(raymaps):
    x = torch.as_tensor(np.asarray(raymaps) if not torch.is_tensor(raymaps) else raymaps)
    return x[None] if x.dim() == 4 else x


@torch.no_grad()
def encode_cameras(model: CameraAutoencoder, raymaps) -> np.ndarray:
    """``(L+1, 6, H, W)`` ray maps -> camera token grid ``(l+1, h, w, c_cam)``.

    A leading batch axis is also accepted and preserved.
    """
    batched = np.ndim(raymaps) == 5
    was_training = model.training
    model.eval()
    p = next(model.parameters())
    out = model.encode(_as_batch(raymaps).to(p.dtype)).numpy()
    model.train(was_training)
    return out if batched else out[0]


@torch.no_grad()
def decode_cameras(model: CameraAutoencoder, tokens) -> np.ndarray:
    """Camera token grid ``(l+1, h, w, c_cam)`` -> predicted ray maps ``(L+1, 6, H, W)``."""
    t = torch.as_tensor(np.asarray(tokens))
    batched = t.dim() == 5
    was_training = model.training
    model.eval()
    p = next(model.parameters())
    out = model.decode((t if batched else t[None]).to(p.dtype)).numpy()
    model.train(was_training)
    return out if batched else out[0]


def split_raymap(x: torch.Tensor, dim: int):
    """Split a 6-channel ray-map tensor into ``(d, m)`` along ``dim``."""
    d, m = torch.split(x, 3, dim=dim)
    return d, m


def camera_loss(pred, target, weights: CameraLossWeights | None = None, dim: int = -1):
    """Geometric ray-map loss; returns ``(total, (t_dir, t_moment, t_unit, t_ortho))``.

    Each term is averaged over every ray (all pixels and frames); ``dim`` is the
    axis holding the 3 vector components.
    """
    w = weights or CameraLossWeights()
    d_hat, m_hat = pred
    d, m = target
    if d_hat.shape != d.shape or m_hat.shape != m.shape or d_hat.shape != m_hat.shape:
        raise ValidationError("camera_loss: prediction and target shapes differ")
    for t in (d_hat, m_hat, d, m):
        if not torch.isfinite(t).all():
            raise ValidationError("camera_loss: non-finite input")
    t_dir = ((d_hat - d) ** 2).sum(dim).mean()
    t_mom = ((m_hat - m) ** 2).sum(dim).mean()
    t_unit = ((torch.linalg.vector_norm(d_hat, dim=dim) - 1) ** 2).mean()
    t_orth = ((d_hat * m_hat).sum(dim) ** 2).mean()
    terms = (t_dir, t_mom, t_unit, t_orth)
    total = sum(lam * t for lam, t in zip(w.as_tuple(), terms))
    return total, terms


def angular_error_deg(d_hat: np.ndarray, d: np.ndarray, axis: int = -1) -> np.ndarray:
    """Per-ray angle between predicted and true directions, in degrees."""
    a = d_hat / np.linalg.norm(d_hat, axis=axis, keepdims=True)
    c = np.clip((a * d).sum(axis) / np.linalg.norm(d, axis=axis), -1.0, 1.0)
    return np.degrees(np.arccos(c))

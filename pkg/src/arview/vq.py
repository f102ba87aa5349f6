"""Per-frame 2D VQ tokenizer, the image-tokenizer baseline for the ablation.

Every frame is encoded on its own (no temporal compression), so a clip of
``L+1`` frames gives ``L+1`` latent frames. Codes live in a learned codebook
trained with the usual codebook + commitment objective and a straight-through
gradient. Token grids reuse :class:`arview.tokenizer.TokenGrid` with a single
level of size ``codebook_size``, so the index is the codebook entry.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from arview.errors import ValidationError
from arview.tokenizer import TokenGrid


@dataclass
class VqConfig:
    codebook_size: int = 512
    code_dim: int = 8
    widths: tuple = (32, 64, 96)
    beta: float = 0.25  # commitment weight
    l1_weight: float = 1.0
    l2_weight: float = 0.5

    def __post_init__(self):
        if self.codebook_size < 2 or self.code_dim < 1:
            raise ValidationError("codebook_size must be >= 2 and code_dim >= 1")
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")

    @property
    def r_s(self):
        return 2 ** len(self.widths)

    @property
    def vocab_size(self):
        return self.codebook_size

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)


def _norm(c):
    return nn.GroupNorm(min(8, c), c)


class _Res2d(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(_norm(c), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1),
                                  _norm(c), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1))

    def forward(self, x):
        return x + self.body(x)


def nearest_code(z: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the nearest codebook row (squared Euclidean) for each vector in ``z (..., D)``."""
    flat = z.reshape(-1, z.shape[-1])
    d2 = (flat**2).sum(1, keepdim=True) - 2 * flat @ codebook.T + (codebook**2).sum(1)[None]
    return d2.argmin(1).reshape(z.shape[:-1])


class VqTokenizer(nn.Module):
    """Frames ``(B, T, 3, H, W)`` in [0, 1] <-> code grids ``(B, T, h, w)``."""

    def __init__(self, config: VqConfig | None = None):
        super().__init__()
        self.config = c = config or VqConfig()
        enc, cin = [], 3
        for w in c.widths:
            enc += [nn.Conv2d(cin, w, 4, stride=2, padding=1), _Res2d(w)]
            cin = w
        enc += [_norm(cin), nn.SiLU(), nn.Conv2d(cin, c.code_dim, 1)]
        self.encoder = nn.Sequential(*enc)
        dec, cin = [nn.Conv2d(c.code_dim, c.widths[-1], 3, padding=1)], c.widths[-1]
        for w in reversed(c.widths):
            dec += [_Res2d(cin), nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(cin, w, 3, padding=1)]
            cin = w
        dec += [_norm(cin), nn.SiLU(), nn.Conv2d(cin, 3, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)
        self.codebook = nn.Parameter(torch.randn(c.codebook_size, c.code_dim) * 0.1)

    def encode_latent(self, frames):
        if frames.dim() != 5 or frames.shape[2] != 3:
            raise ValidationError(f"expected (B, T, 3, H, W) frames, got {tuple(frames.shape)}")
        B, T, _, H, W = frames.shape
        r = self.config.r_s
        if H % r or W % r:
            raise ValidationError(f"spatial size {H}x{W} is not divisible by r_s = {r}")
        z = self.encoder(frames.reshape(B * T, 3, H, W) * 2 - 1)
        return z.reshape(B, T, *z.shape[1:]).permute(0, 1, 3, 4, 2)  # (B, T, h, w, D)

    def quantize(self, z):
        """Returns ``(index, z_q_ste, codebook_term, commitment_term)``."""
        index = nearest_code(z.detach(), self.codebook)
        e = self.codebook[index]
        codebook_term = F.mse_loss(e, z.detach())
        commit_term = F.mse_loss(z, e.detach())
        return index, z + (e - z).detach(), codebook_term, commit_term

    def decode_latent(self, zq):
        B, T, h, w, D = zq.shape
        y = self.decoder(zq.permute(0, 1, 4, 2, 3).reshape(B * T, D, h, w))
        return ((y + 1) / 2).reshape(B, T, *y.shape[1:])

    def forward(self, frames):
        index, zq, cb, commit = self.quantize(self.encode_latent(frames))
        return self.decode_latent(zq), index, cb, commit


def vq_loss(recon, target, cb, commit, cfg: VqConfig):
    diff = recon - target
    rec = cfg.l1_weight * diff.abs().mean() + cfg.l2_weight * (diff**2).mean()
    return rec + cb + cfg.beta * commit, rec


def codebook_usage(index, codebook_size: int) -> float:
    return len(np.unique(np.asarray(index))) / codebook_size


@torch.no_grad()
def vq_encode_video(model: VqTokenizer, frames) -> TokenGrid:
    """``(L+1, 3, H, W)`` -> :class:`TokenGrid` of shape ``(L+1, h, w)``."""
    was = model.training
    model.eval()
    x = torch.as_tensor(np.asarray(frames)).to(model.codebook.dtype)[None]
    index = nearest_code(model.encode_latent(x), model.codebook)[0]
    model.train(was)
    return TokenGrid(index.numpy().astype(np.int64), (model.config.codebook_size,))


@torch.no_grad()
def vq_decode_video(model: VqTokenizer, grid) -> np.ndarray:
    codes = grid.codes if isinstance(grid, TokenGrid) else np.asarray(grid)
    if codes.min() < 0 or codes.max() >= model.config.codebook_size:
        raise ValidationError("token index outside the codebook")
    was = model.training
    model.eval()
    zq = model.codebook[torch.as_tensor(codes)][None]
    out = model.decode_latent(zq).clamp(0, 1)[0].numpy()
    model.train(was)
    return out

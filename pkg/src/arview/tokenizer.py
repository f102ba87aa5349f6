"""Causal video tokenizer with finite scalar quantization (FSQ).

Lattice rule
------------
Channel ``i`` with ``L_i`` levels is bounded to ``[-(L_i-1)/2, (L_i-1)/2]`` by
``tanh(z) * (L_i-1)/2``. The code is ``round(z_b + (L_i-1)/2)`` clipped to
``[0, L_i)`` and the lattice point is ``code - (L_i-1)/2``. Even level counts
therefore give half-integer lattice points symmetric about 0
(``L=8``: -3.5 ... 3.5). Rounding is half-to-even, so ``z_b = 0`` with
``L = 8`` lands on code 4 (lattice point +0.5).
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from arview.camera_ae import check_video_shape
from arview.errors import ValidationError
from arview.layers import CausalDecoder3d, CausalEncoder3d, compression


@dataclass
class FsqConfig:
    levels: tuple = (8, 8, 8)
    max_vocab: int = 65536

    def __post_init__(self):
        self.levels = tuple(int(v) for v in self.levels)
        if not self.levels or min(self.levels) < 2:
            raise ValidationError(f"every FSQ level must be >= 2, got {self.levels}")
        if self.vocab_size > self.max_vocab:
            raise ValidationError(f"vocabulary {self.vocab_size} exceeds max {self.max_vocab}")

    @property
    def vocab_size(self):
        return math.prod(self.levels)


def _half(levels, like):
    return (torch.as_tensor(levels, dtype=like.dtype, device=like.device) - 1) / 2


def fsq_bound(z: torch.Tensor, levels) -> torch.Tensor:
    """Smooth odd squashing of the last axis into each channel's lattice range."""
    return torch.tanh(z) * _half(levels, z)


def fsq_quantize(z_bounded: torch.Tensor, levels):
    """Round to the lattice. Returns ``(codes, z_hat)``; ``z_hat`` carries straight-through gradients."""
    half = _half(levels, z_bounded)
    top = torch.as_tensor(levels, device=z_bounded.device) - 1
    codes = torch.round(z_bounded + half).long()
    codes = torch.minimum(codes.clamp_min(0), top)
    lattice = codes.to(z_bounded.dtype) - half
    z_hat = z_bounded + (lattice - z_bounded).detach()
    return codes, z_hat


def _radix(levels):
    levels = [int(v) for v in levels]
    weights = [math.prod(levels[i + 1 :]) for i in range(len(levels))]
    return levels, weights


def code_to_index(codes, levels):
    """Mixed-radix big-endian flattening of per-channel codes on the last axis."""
    levels, weights = _radix(levels)
    if torch.is_tensor(codes):
        lv = torch.as_tensor(levels, device=codes.device)
        if ((codes < 0) | (codes >= lv)).any():
            raise ValidationError("code out of range for its channel")
        return (codes * torch.as_tensor(weights, device=codes.device)).sum(-1)
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape[-1] != len(levels) or ((codes < 0) | (codes >= np.array(levels))).any():
        raise ValidationError("code out of range for its channel")
    return (codes * np.array(weights)).sum(-1)


def index_to_code(index, levels):
    levels, weights = _radix(levels)
    V = math.prod(levels)
    if torch.is_tensor(index):
        if ((index < 0) | (index >= V)).any():
            raise ValidationError(f"index out of range [0, {V})")
        w = torch.as_tensor(weights, device=index.device)
        lv = torch.as_tensor(levels, device=index.device)
        return (index.unsqueeze(-1) // w) % lv
    index = np.asarray(index, dtype=np.int64)
    if ((index < 0) | (index >= V)).any():
        raise ValidationError(f"index out of range [0, {V})")
    return (index[..., None] // np.array(weights)) % np.array(levels)


@dataclass
class TokenizerConfig:
    levels: tuple = (8, 8, 8)
    widths: tuple = (32, 64, 96)
    time_down: tuple = (False, True, True)
    l1_weight: float = 1.0
    l2_weight: float = 0.5

    def __post_init__(self):
        FsqConfig(self.levels)  # validates

    @property
    def fsq(self):
        return FsqConfig(self.levels)

    @property
    def vocab_size(self):
        return self.fsq.vocab_size

    @property
    def r_t(self):
        return compression(self.time_down, len(self.widths))[0]

    @property
    def r_s(self):
        return compression(self.time_down, len(self.widths))[1]

    def to_dict(self):
        d = asdict(self)
        for k in ("levels", "widths", "time_down"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("levels", "widths", "time_down"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """Discrete codes ``(l+1, h, w)``; latent frame 0 is the condition frame."""

    codes: np.ndarray
    levels: tuple

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.ndim != 3:
            raise ValidationError(f"token grid must be (l+1, h, w), got {codes.shape}")
        V = math.prod(self.levels)
        if codes.size and (codes.min() < 0 or codes.max() >= V):
            raise ValidationError(f"token index outside [0, {V})")
        object.__setattr__(self, "codes", codes.astype(np.int64))
        object.__setattr__(self, "levels", tuple(int(v) for v in self.levels))

    @property
    def vocab_size(self):
        return math.prod(self.levels)

    @property
    def shape(self):
        return self.codes.shape

    def __eq__(self, other):
        return (
            isinstance(other, TokenGrid)
            and self.levels == other.levels
            and np.array_equal(self.codes, other.codes)
        )


_GRID_MAGIC = b"ARTG"


def save_token_grid(grid: TokenGrid, path) -> None:
    """Little-endian: magic, ``l+1, h, w, V, n_levels, *levels`` as uint32, then uint32 codes."""
    T, h, w = grid.shape
    header = struct.pack(f"<4s{5 + len(grid.levels)}I", _GRID_MAGIC, T, h, w, grid.vocab_size,
                         len(grid.levels), *grid.levels)
    Path(path).write_bytes(header + grid.codes.astype("<u4").tobytes(order="C"))


def load_token_grid(path) -> TokenGrid:
    raw = Path(path).read_bytes()
    magic, T, h, w, V, n = struct.unpack_from("<4s5I", raw, 0)
    if magic != _GRID_MAGIC:
        raise ValidationError(f"{path}: not a token grid file")
    levels = struct.unpack_from(f"<{n}I", raw, 24)
    off = 24 + 4 * n
    codes = np.frombuffer(raw, dtype="<u4", count=T * h * w, offset=off).reshape(T, h, w)
    if math.prod(levels) != V:
        raise ValidationError(f"{path}: header vocabulary does not match levels")
    return TokenGrid(codes.astype(np.int64), levels)


class VideoTokenizer(nn.Module):
    """Causal 3D conv encoder -> FSQ -> mirrored decoder. Frames are ``(B, L+1, 3, H, W)`` in [0, 1]."""

    def __init__(self, config: TokenizerConfig | None = None):
        super().__init__()
        self.config = config or TokenizerConfig()
        c = self.config
        n = len(c.levels)
        self.encoder = CausalEncoder3d(3, n, c.widths, c.time_down)
        self.decoder = CausalDecoder3d(n, 3, c.widths, c.time_down)

    @property
    def levels(self):
        return self.config.levels

    def encode_latent(self, frames: torch.Tensor) -> torch.Tensor:
        """Bounded pre-quantization latents ``(B, l+1, h, w, n_channels)``."""
        if frames.dim() != 5 or frames.shape[2] != 3:
            raise ValidationError(f"expected (B, L+1, 3, H, W) frames, got {tuple(frames.shape)}")
        _, T, _, H, W = frames.shape
        check_video_shape(T, H, W, self.config.r_t, self.config.r_s)
        z = self.encoder(frames.transpose(1, 2) * 2 - 1).permute(0, 2, 3, 4, 1)
        return fsq_bound(z, self.levels)

    def quantize(self, z_bounded):
        codes, z_hat = fsq_quantize(z_bounded, self.levels)
        return code_to_index(codes, self.levels), z_hat

    def decode_latent(self, z_hat: torch.Tensor) -> torch.Tensor:
        """Lattice latents -> unclamped frames ``(B, L+1, 3, H, W)``."""
        y = self.decoder(z_hat.permute(0, 4, 1, 2, 3))
        return (y.transpose(1, 2) + 1) / 2

    def lattice(self, index: torch.Tensor) -> torch.Tensor:
        codes = index_to_code(index, self.levels)
        half = _half(self.levels, torch.zeros((), dtype=next(self.parameters()).dtype))
        return codes.to(half.dtype) - half

    def forward(self, frames):
        index, z_hat = self.quantize(self.encode_latent(frames))
        return self.decode_latent(z_hat), index


def tokenizer_loss(recon, target, l1_weight: float = 1.0, l2_weight: float = 0.5):
    """``l1_weight * mean|r - t| + l2_weight * mean (r - t)^2``."""
    if recon.shape != target.shape:
        raise ValidationError("tokenizer_loss: shape mismatch")
    if not (torch.isfinite(recon).all() and torch.isfinite(target).all()):
        raise ValidationError("tokenizer_loss: non-finite input")
    diff = recon - target
    return l1_weight * diff.abs().mean() + l2_weight * (diff**2).mean()


def _frames_tensor(frames, model):
    x = frames if torch.is_tensor(frames) else torch.as_tensor(np.asarray(frames))
    return x.to(next(model.parameters()).dtype)


@torch.no_grad()
def encode_video(model: VideoTokenizer, frames) -> TokenGrid | list:
    """``(L+1, 3, H, W)`` frames -> :class:`TokenGrid`; a batched input returns a list."""
    was = model.training
    model.eval()
    x = _frames_tensor(frames, model)
    batched = x.dim() == 5
    index, _ = model.quantize(model.encode_latent(x if batched else x[None]))
    model.train(was)
    grids = [TokenGrid(i.numpy(), model.levels) for i in index]
    return grids if batched else grids[0]


@torch.no_grad()
def decode_video(model: VideoTokenizer, grid) -> np.ndarray:
    """:class:`TokenGrid` (or code array) -> frames ``(L+1, 3, H, W)`` clamped to [0, 1]."""
    codes = grid.codes if isinstance(grid, TokenGrid) else np.asarray(grid)
    if isinstance(grid, TokenGrid) and grid.levels != model.levels:
        raise ValidationError("token grid levels do not match the tokenizer")
    V = model.config.vocab_size
    if codes.min() < 0 or codes.max() >= V:
        raise ValidationError(f"token index outside [0, {V})")
    was = model.training
    model.eval()
    idx = torch.as_tensor(codes)
    batched = idx.dim() == 4
    out = model.decode_latent(model.lattice(idx if batched else idx[None])).clamp(0, 1)
    model.train(was)
    out = out.numpy()
    return out if batched else out[0]

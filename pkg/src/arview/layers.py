"""Causal 3D convolution blocks shared by the camera autoencoder and the video tokenizer.

Tensors are ``(B, C, T, H, W)``. Frame 0 is never mixed with later frames:
temporal convolutions pad only on the past side, normalization is per frame,
and temporal down/upsampling acts on frames ``1..T-1`` only. So output frame
``k`` of an encoder built from these blocks depends only on input frames
``<= k * r_t``.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn


class CausalConv3d(nn.Module):
    def __init__(self, cin, cout, kernel=(3, 3, 3)):
        super().__init__()
        if isinstance(kernel, int):
            kernel = (kernel,) * 3
        kt, kh, kw = kernel
        self.time_pad = kt - 1
        self.conv = nn.Conv3d(cin, cout, kernel, padding=(0, kh // 2, kw // 2))

    def forward(self, x):
        if self.time_pad:
            x = F.pad(x, (0, 0, 0, 0, self.time_pad, 0))
        return self.conv(x)


class FrameNorm(nn.Module):
    """GroupNorm applied to each frame separately (statistics never cross time); ``groups=0`` disables it."""

    def __init__(self, channels, groups=8):
        super().__init__()
        self.norm = nn.GroupNorm(min(groups, channels), channels) if groups else None

    def forward(self, x):
        if self.norm is None:
            return x
        b, c, t, h, w = x.shape
        y = self.norm(x.transpose(1, 2).reshape(b * t, c, h, w))
        return y.reshape(b, t, c, h, w).transpose(1, 2)


class ResBlock3d(nn.Module):
    def __init__(self, cin, cout, groups=8):
        super().__init__()
        self.norm1 = FrameNorm(cin, groups)
        self.conv1 = CausalConv3d(cin, cout)
        self.norm2 = FrameNorm(cout, groups)
        self.conv2 = CausalConv3d(cout, cout)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SpatialDown(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, (1, 4, 4), stride=(1, 2, 2), padding=(0, 1, 1))

    def forward(self, x):
        return self.conv(x)


class SpatialUp(nn.Module):
    """Double H and W: nearest-neighbour resize then conv, or a sub-pixel conv (``shuffle``)
    whose four output phases are separate channels, so each output pixel knows its position
    inside the 2x2 block it came from."""

    def __init__(self, channels, mode="nearest"):
        super().__init__()
        if mode not in ("nearest", "shuffle"):
            raise ValueError(f"unknown upsampling mode {mode!r}")
        self.mode = mode
        out = 4 * channels if mode == "shuffle" else channels
        self.conv = nn.Conv3d(channels, out, (1, 3, 3), padding=(0, 1, 1))

    def forward(self, x):
        if self.mode == "nearest":
            return self.conv(F.interpolate(x, scale_factor=(1, 2, 2), mode="nearest"))
        y = self.conv(x)
        b, c4, t, h, w = y.shape
        y = F.pixel_shuffle(y.transpose(1, 2).reshape(b * t, c4, h, w), 2)
        return y.reshape(b, t, c4 // 4, 2 * h, 2 * w).transpose(1, 2)


class TimeDown(nn.Module):
    """Halve frames ``1..T-1`` by merging consecutive pairs; frame 0 passes through."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, (2, 1, 1), stride=(2, 1, 1))

    def forward(self, x):
        first, rest = x[:, :, :1], x[:, :, 1:]
        if rest.shape[2] == 0:
            return x
        return torch.cat([first, self.conv(rest)], dim=2)


class TimeUp(nn.Module):
    """Inverse of :class:`TimeDown`: each frame after the first becomes two."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv3d(channels, 2 * channels, 1)

    def forward(self, x):
        first, rest = x[:, :, :1], x[:, :, 1:]
        if rest.shape[2] == 0:
            return x
        b, c, t, h, w = rest.shape
        y = self.conv(rest).reshape(b, 2, c, t, h, w)
        y = y.permute(0, 2, 3, 1, 4, 5).reshape(b, c, 2 * t, h, w)
        return torch.cat([first, y], dim=2)


def pool_later_frames(x):
    """Average consecutive pairs of frames ``1..T-1``; frame 0 passes through (the inverse of
    :func:`repeat_later_frames`)."""
    first, rest = x[:, :, :1], x[:, :, 1:]
    if rest.shape[2] == 0:
        return x
    b, c, t, h, w = rest.shape
    return torch.cat([first, rest.reshape(b, c, t // 2, 2, h, w).mean(3)], dim=2)


class CausalEncoder3d(nn.Module):
    """Stem conv, then one (downsample -> residual block) stage per width, then a 1x1x1 head.

    Every stage halves H and W; stages flagged in ``time_down`` also halve the
    frames after the first. With ``skip_in`` a 1x1x1 projection of the input,
    average-pooled to the latent grid, is added to the output, so coarse absolute
    values reach the latents without passing through any normalization.
    """

    def __init__(self, in_ch, out_ch, widths=(32, 64, 128), time_down=(False, True, True), groups=8,
                 out_norm=True, skip_in=False):
        super().__init__()
        if len(widths) != len(time_down):
            raise ValueError("widths and time_down must have equal length")
        self.time_down = list(time_down)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if skip_in else None
        self.stem = CausalConv3d(in_ch, widths[0])
        stages = []
        prev = widths[0]
        for w, td in zip(widths, time_down):
            ops = [SpatialDown(prev)]
            if td:
                ops.append(TimeDown(prev))
            ops.append(ResBlock3d(prev, w, groups))
            stages.append(nn.Sequential(*ops))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.norm = FrameNorm(prev, groups if out_norm else 0)
        self.head = nn.Conv3d(prev, out_ch, 1)

    def forward(self, x):
        pooled = x
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        out = self.head(F.silu(self.norm(x)))
        if self.skip is None:
            return out
        for td in self.time_down:
            pooled = F.avg_pool3d(pooled, (1, 2, 2))
            if td:
                pooled = pool_later_frames(pooled)
        return out + self.skip(pooled)


def repeat_later_frames(x):
    """Nearest temporal upsampling matching :class:`TimeUp`: frame 0 once, every later frame twice."""
    return torch.cat([x[:, :, :1], x[:, :, 1:].repeat_interleave(2, dim=2)], dim=2)


class CausalDecoder3d(nn.Module):
    """Mirror of :class:`CausalEncoder3d`.

    With ``skip_out`` every resolution also emits an output through a 1x1x1
    projection. The running sum is bilinearly upsampled between stages (pixel
    centres stay aligned), so fields that are smooth in image space, such as ray
    maps, are carried by the coarse levels and the fine levels add corrections.
    """

    def __init__(self, in_ch, out_ch, widths=(32, 64, 128), time_down=(False, True, True), groups=8,
                 out_norm=True, upsample="nearest", skip_out=False):
        super().__init__()
        widths = list(widths)
        self.stem = nn.Conv3d(in_ch, widths[-1], 1)
        self.mid = ResBlock3d(widths[-1], widths[-1], groups)
        stages = []
        prev = widths[-1]
        outs = widths[::-1][1:] + [widths[0]]
        self.time_up = list(time_down)[::-1]
        for w, td in zip(outs, self.time_up):
            ops = []
            if td:
                ops.append(TimeUp(prev))
            ops += [SpatialUp(prev, upsample), ResBlock3d(prev, w, groups)]
            stages.append(nn.Sequential(*ops))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.norm = FrameNorm(prev, groups if out_norm else 0)
        self.head = CausalConv3d(prev, out_ch)
        self.skips = nn.ModuleList(nn.Conv3d(w, out_ch, 1) for w in [widths[-1]] + outs) if skip_out else None

    def forward(self, z):
        x = self.mid(self.stem(z))
        y = self.skips[0](x) if self.skips is not None else None
        for i, (stage, td) in enumerate(zip(self.stages, self.time_up)):
            x = stage(x)
            if y is not None:
                if td:
                    y = repeat_later_frames(y)
                y = F.interpolate(y, scale_factor=(1, 2, 2), mode="trilinear", align_corners=False)
                y = y + self.skips[i + 1](x)
        out = self.head(F.silu(self.norm(x)))
        return out if y is None else out + y


def compression(time_down, n_stages):
    """``(r_t, r_s)`` for a stage layout."""
    return 2 ** sum(bool(t) for t in time_down), 2**n_stages

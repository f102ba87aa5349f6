"""Decoder-only causal transformer over interleaved camera/visual sequences.

Camera slots embed their continuous camera latent through a linear map,
visual slots look up their code. A learned kind embedding marks which is
which. Target slots get no absolute position; the camera token is the
positional instruction. The condition frame can be swapped for a learned null
embedding, which is both the training-time condition dropout and the
unconditional branch for classifier-free guidance.

Generation runs a full forward over a fixed-length buffer for every step.
Because attention is strictly causal, logits at a position never depend on
later buffer contents, so sampling with a ground-truth "oracle" sampler
reproduces teacher-forced logits bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from arview.errors import ValidationError
from arview.sequencer import CAMERA, VISUAL, InterleavedSequence, PermutationPlan, build_mask, pack, unpack


@dataclass
class ArConfig:
    dim: int = 256
    layers: int = 4
    heads: int = 8
    vocab_size: int = 512
    cam_dim: int = 16
    dropout: float = 0.0
    p_uncond: float = 0.1
    mlp_ratio: float = 4.0
    pos_embedding: str = "none"  # "none" or "learned" (ablation only)
    max_len: int = 4096

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValidationError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if not 0 <= self.p_uncond <= 1:
            raise ValidationError(f"p_uncond must be in [0, 1], got {self.p_uncond}")
        if self.pos_embedding not in ("none", "learned"):
            raise ValidationError(f"unknown pos_embedding {self.pos_embedding!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SamplerConfig:
    temperature: float = 1.0  # 0 selects argmax
    top_k: int = 0  # 0 disables
    top_p: float = 1.0
    cfg_scale: float = 1.0
    parallel: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.top_k < 0:
            raise ValidationError("top_k must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValidationError("top_p must be in (0, 1]")
        if self.cfg_scale < 0:
            raise ValidationError("cfg_scale must be >= 0")
        if self.parallel < 1:
            raise ValidationError("parallel group size must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class TokenBatch:
    """Collated sequences. All samples share one slot layout (same ``kind``, targets)."""

    kind: torch.Tensor  # (T,) long
    prefix: torch.Tensor  # (T,) bool
    codes: torch.Tensor  # (B, T) long
    cams: torch.Tensor  # (B, T, c)
    target_positions: torch.Tensor  # (K,) long
    target_codes: torch.Tensor  # (B, K) long
    drop: torch.Tensor  # (B,) bool, condition replaced by the null embedding

    def __len__(self):
        return self.codes.shape[0]


def collate(seqs: Sequence[InterleavedSequence], dtype=torch.float32) -> TokenBatch:
    s0 = seqs[0]
    for s in seqs[1:]:
        if not (np.array_equal(s.kind, s0.kind) and s.prefix_len == s0.prefix_len):
            raise ValidationError("sequences in a batch must share a layout")
    T = len(s0)
    prefix = torch.zeros(T, dtype=torch.bool)
    prefix[: s0.prefix_len] = True
    return TokenBatch(
        kind=torch.as_tensor(s0.kind, dtype=torch.long),
        prefix=prefix,
        codes=torch.as_tensor(np.stack([s.codes for s in seqs]), dtype=torch.long),
        cams=torch.as_tensor(np.stack([s.cams for s in seqs])).to(dtype),
        target_positions=torch.as_tensor(s0.target_positions, dtype=torch.long),
        target_codes=torch.as_tensor(np.stack([s.target_codes() for s in seqs]), dtype=torch.long),
        drop=torch.zeros(len(seqs), dtype=torch.bool),
    )


def condition_dropout(batch: TokenBatch, p_uncond: float, rng: np.random.Generator) -> TokenBatch:
    """Drop each sample's condition frame with probability ``p_uncond``; the decision is kept in ``batch.drop``."""
    if not 0 <= p_uncond <= 1:
        raise ValidationError("p_uncond must be in [0, 1]")
    draws = torch.as_tensor(rng.random(len(batch)) < p_uncond)
    return TokenBatch(batch.kind, batch.prefix, batch.codes, batch.cams,
                      batch.target_positions, batch.target_codes, batch.drop | draws)


class Attention(nn.Module):
    def __init__(self, dim, heads, dropout):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.proj = nn.Linear(dim, dim, bias=False)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        B, T, D = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        # mask: (T, T) or (B, T, T), True = may attend. The fused kernel skips
        # masked keys exactly, so outputs at a query never depend on later slots.
        m = mask if mask.dim() == 2 else mask[:, None]
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=m, dropout_p=self.drop.p if self.training else 0.0)
        y = y.transpose(1, 2).reshape(B, T, D)
        return self.drop(self.proj(y))


class SwiGLU(nn.Module):
    def __init__(self, dim, ratio, dropout):
        super().__init__()
        hidden = int(2 * ratio * dim / 3)
        self.w12 = nn.Linear(dim, 2 * hidden, bias=False)
        self.w3 = nn.Linear(hidden, dim, bias=False)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        a, b = self.w12(x).chunk(2, dim=-1)
        return self.drop(self.w3(F.silu(a) * b))


class Block(nn.Module):
    def __init__(self, cfg: ArConfig):
        super().__init__()
        self.norm1 = nn.RMSNorm(cfg.dim)
        self.attn = Attention(cfg.dim, cfg.heads, cfg.dropout)
        self.norm2 = nn.RMSNorm(cfg.dim)
        self.mlp = SwiGLU(cfg.dim, cfg.mlp_ratio, cfg.dropout)

    def forward(self, x, mask):
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


class ArTransformer(nn.Module):
    def __init__(self, config: ArConfig | None = None):
        super().__init__()
        self.config = cfg = config or ArConfig()
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.cam_proj = nn.Linear(cfg.cam_dim, cfg.dim)
        self.kind_emb = nn.Embedding(2, cfg.dim)
        self.null_emb = nn.Parameter(torch.zeros(cfg.dim))
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.dim) if cfg.pos_embedding == "learned" else None
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.norm = nn.RMSNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab_size)
        self.apply(self._init)
        for b in self.blocks:
            nn.init.normal_(b.attn.proj.weight, std=0.02 / math.sqrt(2 * cfg.layers))
            nn.init.normal_(b.mlp.w3.weight, std=0.02 / math.sqrt(2 * cfg.layers))
        nn.init.normal_(self.null_emb, std=0.02)

    @staticmethod
    def _init(m):
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=0.02)
        if isinstance(m, nn.Linear) and m.bias is not None:
            nn.init.zeros_(m.bias)

    def embed(self, kind, codes, cams, prefix=None, drop=None) -> torch.Tensor:
        """Slot embeddings ``(B, T, dim)``; ``kind`` is shared ``(T,)`` or per sample ``(B, T)``."""
        vis = (kind == VISUAL)
        if vis.dim() == 1:
            vis = vis.expand_as(codes)
        if (codes[vis] >= self.config.vocab_size).any() or (codes < 0).any():
            raise ValidationError(f"visual code outside [0, {self.config.vocab_size})")
        e = torch.where(vis[..., None], self.tok_emb(codes), self.cam_proj(cams))
        e = e + self.kind_emb(kind)
        if self.pos_emb is not None:
            e = e + self.pos_emb.weight[: e.shape[1]]
        if drop is not None and prefix is not None:
            rows = drop[:, None] & prefix[None, :]
            e = torch.where(rows[..., None], self.null_emb.to(e.dtype), e)
        return e

    def embed_batch(self, batch: TokenBatch, use_drop: bool = True) -> torch.Tensor:
        return self.embed(batch.kind, batch.codes, batch.cams, batch.prefix, batch.drop if use_drop else None)

    def forward(self, x: torch.Tensor, mask) -> torch.Tensor:
        """Embeddings ``(B, T, dim)`` -> logits ``(B, T, V)``."""
        mask = torch.as_tensor(mask, dtype=torch.bool, device=x.device)
        for i, block in enumerate(self.blocks):
            x = block(x, mask)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activations after transformer block {i}")
        logits = self.head(self.norm(x))
        if not torch.isfinite(logits).all():
            raise FloatingPointError("non-finite logits from the output head")
        return logits


def ar_loss(logits: torch.Tensor, seq, target_codes=None) -> torch.Tensor:
    """Mean cross entropy at target camera slots, each predicting its paired visual token.

    ``seq`` is an :class:`InterleavedSequence` (with ``logits`` of shape ``(T, V)``)
    or a :class:`TokenBatch` (``(B, T, V)``).
    """
    if isinstance(seq, TokenBatch):
        pos = seq.target_positions
        tgt = seq.target_codes if target_codes is None else torch.as_tensor(target_codes)
    else:
        pos = torch.as_tensor(seq.target_positions, dtype=torch.long)
        tgt = torch.as_tensor(seq.target_codes() if target_codes is None else target_codes, dtype=torch.long)
        if logits.dim() == 2:
            logits, tgt = logits[None], tgt[None]
    if pos.numel() == 0:
        raise ValidationError("ar_loss: sequence has no target positions")
    picked = logits[:, pos]
    return F.cross_entropy(picked.reshape(-1, picked.shape[-1]), tgt.reshape(-1))


def cfg_logits(cond: torch.Tensor, uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """``uncond + scale * (cond - uncond)``; exact at ``scale`` 0 and 1."""
    if cond.shape != uncond.shape:
        raise ValidationError("cfg_logits: shape mismatch")
    if scale == 1:
        return cond.clone()
    if scale == 0:
        return uncond.clone()
    return uncond + scale * (cond - uncond)


def sample_next(logits, cfg: SamplerConfig, rng: np.random.Generator) -> int:
    """Temperature, then top-k and nucleus truncation, then one categorical draw."""
    x = np.asarray(torch.as_tensor(logits).detach().double().cpu().numpy() if torch.is_tensor(logits) else logits,
                   dtype=np.float64)
    if np.isnan(x).any() or np.isposinf(x).any():
        raise ValidationError("sample_next: logits contain NaN or +inf")
    if np.isneginf(x).all():
        raise ValidationError("sample_next: every logit is -inf")
    if cfg.temperature == 0 or cfg.top_k == 1:
        return int(np.argmax(x))
    x = x / cfg.temperature
    if 0 < cfg.top_k < len(x):
        kth = np.partition(x, -cfg.top_k)[-cfg.top_k]
        x = np.where(x >= kth, x, -np.inf)
    p = np.exp(x - x.max())
    p /= p.sum()
    if cfg.top_p < 1:
        order = np.argsort(-p, kind="stable")
        csum = np.cumsum(p[order])
        keep = order[: int(np.searchsorted(csum, cfg.top_p)) + 1]
        q = np.zeros_like(p)
        q[keep] = p[keep]
        p = q / q.sum()
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(p) - 1))


# (logits_row, frame, cell) -> code; lets tests and evaluation substitute ground truth
Sampler = Callable[[torch.Tensor, int, int], int]


def _groups(sched: np.ndarray, g: int):
    """Split the schedule into runs of at most ``g`` consecutive slots of one frame."""
    out, cur = [], []
    for k, (frame, _) in enumerate(sched):
        if cur and (len(cur) == g or sched[cur[0], 0] != frame):
            out.append(cur)
            cur = []
        cur.append(k)
    if cur:
        out.append(cur)
    return out


@torch.no_grad()
def generate(
    model: ArTransformer,
    condition,
    cams,
    plan: PermutationPlan,
    sampler_cfg: SamplerConfig | None = None,
    sampler: Sampler | None = None,
    record_logits: list | None = None,
) -> np.ndarray:
    """Sample target codes ``(l, h, w)`` given condition-frame codes ``(h, w)`` and camera tokens ``(l+1, h, w, c)``.

    With ``parallel = g > 1`` each group of ``g`` scheduled slots of one frame
    is predicted from a single forward pass: each group camera slot sees the
    committed sequence and itself, but not the other members of its group.
    """
    cfg = sampler_cfg or SamplerConfig()
    condition = np.asarray(getattr(condition, "codes", condition))
    cams = np.asarray(cams)
    if condition.ndim == 3:
        condition = condition[0]
    if cams.ndim != 4 or cams.shape[1:3] != condition.shape:
        raise ValidationError(f"camera grid {cams.shape} does not match condition frame {condition.shape}")
    lp1, h, w, _ = cams.shape
    if (plan.l, plan.n) != (lp1 - 1, h * w):
        raise ValidationError(f"plan (l={plan.l}, n={plan.n}) does not match grid ({lp1}, {h}, {w})")

    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    grid = np.zeros((lp1, h, w), dtype=np.int64)
    grid[0] = condition
    batch = collate([pack(grid, cams, plan)], dtype=dtype)
    codes = batch.codes.clone()
    T = codes.shape[1]
    P = int(batch.prefix.sum())
    base_mask = torch.as_tensor(build_mask(T))
    rng = np.random.default_rng(cfg.seed)
    sched = plan.schedule()
    use_cfg = cfg.cfg_scale != 1
    drop_on = torch.ones(1, dtype=torch.bool)
    out = np.empty(len(sched), dtype=np.int64)

    for group in _groups(sched, cfg.parallel):
        pos = [P + 2 * k for k in group]
        mask = base_mask
        if len(group) > 1:
            mask = base_mask.clone()
            for b in range(1, len(pos)):
                for a in range(b):
                    mask[pos[b], pos[a]] = False
                    mask[pos[b], pos[a] + 1] = False
        logits = model(model.embed(batch.kind, codes, batch.cams), mask)[0, pos]
        if use_cfg:
            x_u = model.embed(batch.kind, codes, batch.cams, batch.prefix, drop_on)
            logits = cfg_logits(logits, model(x_u, mask)[0, pos], cfg.cfg_scale)
        for row, k, p in zip(logits, group, pos):
            if record_logits is not None:
                record_logits.append(row.clone())
            frame, cell = int(sched[k, 0]), int(sched[k, 1])
            code = sampler(row, frame, cell) if sampler is not None else sample_next(row, cfg, rng)
            codes[0, p + 1] = int(code)
            out[k] = code
    model.train(was)
    return unpack(out, plan, (h, w))


@torch.no_grad()
def teacher_forced_logits(model: ArTransformer, seq: InterleavedSequence) -> torch.Tensor:
    """Logits ``(T, V)`` of one ground-truth sequence in a single forward pass."""
    was = model.training
    model.eval()
    b = collate([seq], dtype=next(model.parameters()).dtype)
    out = model(model.embed_batch(b), build_mask(seq))[0]
    model.train(was)
    return out

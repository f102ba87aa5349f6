"""Token-order plans and the interleaved ``[camera, visual]`` training/sampling sequence.

Frames are indexed from 0: latent frame 0 is the condition frame and
frames ``1..l`` are targets. A plan assigns every target cell a schedule rank;
``perms[i][j]`` is the rank of cell ``j`` inside target frame ``i+1`` (hybrid,
raster) or, in ``full`` mode, ``perms[0][(i-1)*n + j]`` is the rank of target
cell ``(i, j)`` over all targets.

Sequence layout: the condition frame's ``n`` pairs in raster order form the
prefix, then one ``(camera, visual)`` pair per scheduled target cell. Slot
``2k`` is always a camera slot and ``2k+1`` the matching visual slot. The
logits at a target camera slot predict the visual token that follows it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from arview.errors import ValidationError

MODES = ("raster", "full", "hybrid")
CAMERA, VISUAL = 0, 1


def plan_rng(seed: int, *stream) -> np.random.Generator:
    """Independent RNG stream for ``(seed, sample id, step, ...)``."""
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


@dataclass(frozen=True, eq=False)
class PermutationPlan:
    mode: str
    l: int
    n: int
    seed: int
    perms: tuple  # tuple of int arrays, see module docstring

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown plan mode {self.mode!r}; expected one of {MODES}")
        perms = tuple(np.asarray(p, dtype=np.int64) for p in self.perms)
        expected = [self.l * self.n] if self.mode == "full" else [self.n] * self.l
        if [len(p) for p in perms] != expected:
            raise ValidationError("permutation arrays do not match (mode, l, n)")
        for p in perms:
            if not np.array_equal(np.sort(p), np.arange(len(p))):
                raise ValidationError("permutation is not a bijection")
        object.__setattr__(self, "perms", perms)

    def schedule(self) -> np.ndarray:
        """Target cells in generation order, as an ``(l*n, 2)`` array of ``(frame, cell)``."""
        if self.mode == "full":
            flat = np.argsort(self.perms[0], kind="stable")
            return np.stack([flat // self.n + 1, flat % self.n], axis=1)
        rows = []
        for i, p in enumerate(self.perms):
            cells = np.argsort(p, kind="stable")
            rows.append(np.stack([np.full(self.n, i + 1), cells], axis=1))
        return np.concatenate(rows)

    def __eq__(self, other):
        return (
            isinstance(other, PermutationPlan)
            and (self.mode, self.l, self.n, self.seed) == (other.mode, other.l, other.n, other.seed)
            and all(np.array_equal(a, b) for a, b in zip(self.perms, other.perms))
        )

    def to_dict(self):
        return {"mode": self.mode, "l": self.l, "n": self.n, "seed": self.seed,
                "perms": [p.tolist() for p in self.perms]}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mode"], int(d["l"]), int(d["n"]), int(d["seed"]), tuple(d["perms"]))


def make_plan(l: int, n: int, mode: str = "hybrid", seed: int = 0, rng=None) -> PermutationPlan:
    """Draw a plan. ``rng`` overrides the generator seeded from ``seed``."""
    if l < 1 or n < 1:
        raise ValidationError(f"need l >= 1 and n >= 1, got l={l}, n={n}")
    if mode not in MODES:
        raise ValidationError(f"unknown plan mode {mode!r}; expected one of {MODES}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    if mode == "raster":
        perms = tuple(np.arange(n) for _ in range(l))
    elif mode == "hybrid":
        perms = tuple(rng.permutation(n) for _ in range(l))
    else:
        perms = (rng.permutation(l * n),)
    return PermutationPlan(mode, l, n, seed, perms)


def save_plan(plan: PermutationPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict()) + "\n")


def load_plan(path) -> PermutationPlan:
    return PermutationPlan.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class InterleavedSequence:
    """Slot metadata for one packed sequence, plus the gathered token content.

    ``codes`` holds the visual code at visual slots (0 at camera slots) and
    ``cams`` the camera latent at camera slots (0 at visual slots).
    """

    kind: np.ndarray  # (T,) CAMERA / VISUAL
    frame: np.ndarray  # (T,) latent frame index, 0 = condition
    cell: np.ndarray  # (T,) raster cell index within the frame
    order: np.ndarray  # (T,) pair index in packed order
    prefix_len: int
    targets: np.ndarray  # (T,) bool, True at camera slots of target frames
    n: int
    codes: np.ndarray | None = None
    cams: np.ndarray | None = None

    def __len__(self):
        return len(self.kind)

    @property
    def target_positions(self) -> np.ndarray:
        return np.flatnonzero(self.targets)

    def target_codes(self) -> np.ndarray:
        """Visual code each target position must predict."""
        return self.codes[self.target_positions + 1]


def layout(plan: PermutationPlan) -> InterleavedSequence:
    n = plan.n
    pairs = np.concatenate([np.stack([np.zeros(n, np.int64), np.arange(n)], 1), plan.schedule()])
    P = len(pairs)
    frame = np.repeat(pairs[:, 0], 2)
    cell = np.repeat(pairs[:, 1], 2)
    kind = np.tile([CAMERA, VISUAL], P)
    targets = (kind == CAMERA) & (frame > 0)
    return InterleavedSequence(kind, frame, cell, np.repeat(np.arange(P), 2), 2 * n, targets, n)


def pack(visual, camera, plan: PermutationPlan) -> InterleavedSequence:
    """Gather ``visual`` codes ``(l+1, h, w)`` and ``camera`` tokens ``(l+1, h, w, c)`` into sequence order."""
    codes = np.asarray(getattr(visual, "codes", visual))
    cams = np.asarray(camera)
    if codes.ndim != 3 or cams.ndim != 4 or cams.shape[:3] != codes.shape:
        raise ValidationError(f"visual {codes.shape} and camera {cams.shape} grids are not aligned")
    T, h, w = codes.shape
    if (plan.l, plan.n) != (T - 1, h * w):
        raise ValidationError(f"plan (l={plan.l}, n={plan.n}) does not match grid {codes.shape}")
    seq = layout(plan)
    flat = seq.frame * plan.n + seq.cell
    vis = seq.kind == VISUAL
    seq_codes = np.where(vis, codes.reshape(-1)[flat], 0)
    seq_cams = cams.reshape(T * h * w, -1)[flat] * (~vis)[:, None]
    return InterleavedSequence(seq.kind, seq.frame, seq.cell, seq.order, seq.prefix_len,
                               seq.targets, seq.n, seq_codes, seq_cams.astype(cams.dtype))


def unpack(tokens, plan: PermutationPlan, shape=None) -> np.ndarray:
    """Generated target codes in schedule order -> grid ``(l, h, w)`` (or ``(l, n)`` without ``shape``)."""
    tokens = np.asarray(tokens)
    if tokens.shape != (plan.l * plan.n,):
        raise ValidationError(f"expected {plan.l * plan.n} tokens, got {tokens.shape}")
    sched = plan.schedule()
    grid = np.empty((plan.l, plan.n), dtype=tokens.dtype)
    grid[sched[:, 0] - 1, sched[:, 1]] = tokens
    if shape is not None:
        grid = grid.reshape(plan.l, *shape)
    return grid


def scheduled_tokens(seq: InterleavedSequence) -> np.ndarray:
    """Visual codes of the target region in packed order (the inverse input of :func:`unpack`)."""
    vis = (seq.kind == VISUAL) & (seq.frame > 0)
    return seq.codes[vis]


def build_mask(seq: InterleavedSequence | int) -> np.ndarray:
    """Causal attention mask over packed order: ``mask[q, k] = k <= q``."""
    T = seq if isinstance(seq, int) else len(seq)
    return np.tril(np.ones((T, T), dtype=bool))

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arview.errors import ValidationError
from arview.sequencer import (
    CAMERA,
    VISUAL,
    PermutationPlan,
    build_mask,
    layout,
    load_plan,
    make_plan,
    pack,
    save_plan,
    scheduled_tokens,
    unpack,
)


def random_grids(rng, l, h, w, c=4, V=512):
    codes = rng.integers(0, V, (l + 1, h, w))
    cams = rng.normal(size=(l + 1, h, w, c)).astype(np.float32)
    return codes, cams


def sort_oracle(plan):
    """Schedule by independently sorting target cells on (frame, rank)."""
    cells = [(i, j) for i in range(1, plan.l + 1) for j in range(plan.n)]
    if plan.mode == "full":
        key = lambda c: plan.perms[0][(c[0] - 1) * plan.n + c[1]]
    else:
        key = lambda c: (c[0], plan.perms[c[0] - 1][c[1]])
    return sorted(cells, key=key)


def test_raster_is_identity():
    for seed in range(5):
        plan = make_plan(3, 7, "raster", seed)
        assert all(np.array_equal(p, np.arange(7)) for p in plan.perms)


def test_hybrid_singleton_is_identity():
    for seed in range(10):
        plan = make_plan(4, 1, "hybrid", seed)
        assert all(np.array_equal(p, [0]) for p in plan.perms)


def test_hybrid_temporal_order_exhaustive_seeds():
    for seed in range(100):
        plan = make_plan(2, 4, "hybrid", seed)
        frames = plan.schedule()[:, 0]
        assert np.all(np.diff(frames) >= 0)
        assert all(sorted(p.tolist()) == [0, 1, 2, 3] for p in plan.perms)


def test_invalid_plan_args():
    with pytest.raises(ValidationError):
        make_plan(2, 4, "spiral")
    with pytest.raises(ValidationError):
        make_plan(0, 4)
    with pytest.raises(ValidationError):
        PermutationPlan("hybrid", 1, 3, 0, ([0, 0, 1],))


def test_smallest_layout():
    codes, cams = random_grids(np.random.default_rng(0), 1, 1, 2)
    seq = pack(codes, cams, make_plan(1, 2, "raster"))
    assert seq.kind.tolist() == [CAMERA, VISUAL] * 4
    assert seq.frame.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
    assert seq.prefix_len == 4
    assert seq.target_positions.tolist() == [4, 6]
    assert seq.target_codes().tolist() == codes[1].reshape(-1).tolist()


def test_pack_matches_sort_oracle():
    rng = np.random.default_rng(1)
    for seed in range(20):
        for mode in ("hybrid", "full"):
            plan = make_plan(2, 4, mode, seed)
            codes, cams = random_grids(rng, 2, 2, 2)
            seq = pack(codes, cams, plan)
            got = list(zip(seq.frame[seq.prefix_len::2].tolist(), seq.cell[seq.prefix_len::2].tolist()))
            assert got == sort_oracle(plan)
            # contents travel with their slots
            vis = seq.kind == VISUAL
            assert np.array_equal(seq.codes[vis], codes.reshape(-1)[seq.frame[vis] * 4 + seq.cell[vis]])
            cam = ~vis
            assert np.array_equal(seq.cams[cam], cams.reshape(-1, 4)[seq.frame[cam] * 4 + seq.cell[cam]])


def test_condition_prefix_is_raster():
    plan = make_plan(3, 6, "full", 4)
    seq = layout(plan)
    assert seq.frame[:12].tolist() == [0] * 12
    assert seq.cell[:12:2].tolist() == list(range(6))


def test_pack_unpack_roundtrip_random_grids():
    rng = np.random.default_rng(2)
    for k in range(100):
        mode = ("raster", "hybrid", "full")[k % 3]
        l, h, w = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
        plan = make_plan(int(l), int(h * w), mode, k)
        codes, cams = random_grids(rng, l, h, w)
        seq = pack(codes, cams, plan)
        assert np.array_equal(unpack(scheduled_tokens(seq), plan, (h, w)), codes[1:])


def test_unpack_raster_reading_order_and_constant():
    plan = make_plan(2, 3, "raster")
    assert unpack(np.arange(6), plan).tolist() == [[0, 1, 2], [3, 4, 5]]
    assert np.all(unpack(np.full(6, 7), make_plan(2, 3, "full", 9)) == 7)
    with pytest.raises(ValidationError):
        unpack(np.arange(5), plan)


def test_pack_shape_errors():
    codes, cams = random_grids(np.random.default_rng(3), 2, 2, 2)
    with pytest.raises(ValidationError):
        pack(codes, cams, make_plan(2, 5))
    with pytest.raises(ValidationError):
        pack(codes, cams[:, :1], make_plan(2, 4))


def test_mask_is_lower_triangular():
    m = build_mask(4)
    assert np.array_equal(m, np.tril(np.ones((4, 4), bool)))
    seq = layout(make_plan(2, 3, "hybrid", 1))
    mask = build_mask(seq)
    P = seq.prefix_len
    assert mask[P:, :P].all()


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.integers(1, 16), st.integers(0, 2**31 - 1))
def test_hybrid_mask_never_sees_future_frames(l, n, seed):
    seq = layout(make_plan(l, n, "hybrid", seed))
    mask = build_mask(seq)
    q, k = np.nonzero(mask)
    assert np.all(seq.frame[k] <= seq.frame[q])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.integers(1, 16), st.sampled_from(["raster", "hybrid", "full"]), st.integers(0, 2**31 - 1))
def test_plan_properties(l, n, mode, seed):
    plan = make_plan(l, n, mode, seed)
    assert plan == make_plan(l, n, mode, seed)
    seq = layout(plan)
    assert len(seq) == 2 * n * (l + 1)
    assert np.all(seq.kind[0::2] == CAMERA) and np.all(seq.kind[1::2] == VISUAL)
    assert np.array_equal(seq.frame[0::2], seq.frame[1::2])
    assert np.array_equal(seq.cell[0::2], seq.cell[1::2])
    cover = sorted(zip(seq.frame[seq.prefix_len::2].tolist(), seq.cell[seq.prefix_len::2].tolist()))
    assert cover == [(i, j) for i in range(1, l + 1) for j in range(n)]


def test_plan_file_roundtrip(tmp_path):
    plan = make_plan(2, 9, "hybrid", 5)
    save_plan(plan, tmp_path / "plan.json")
    assert load_plan(tmp_path / "plan.json") == plan

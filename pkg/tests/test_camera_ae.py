import itertools

import numpy as np
import pytest
import torch

from arview.camera_ae import (
    CameraAEConfig,
    CameraAutoencoder,
    CameraLossWeights,
    angular_error_deg,
    camera_loss,
    decode_cameras,
    encode_cameras,
    split_raymap,
)
from arview.errors import ValidationError
from arview.geometry import make_trajectory, trajectory_raymaps

TINY = CameraAEConfig(c_cam=16, widths=(8, 8, 16))


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return CameraAutoencoder(TINY)


def scalar_loop_loss(dh, mh, d, m, lam):
    """Reference camera loss over an (N, 3) list of rays, one ray at a time."""
    n = len(d)
    t = [0.0, 0.0, 0.0, 0.0]
    for k in range(n):
        t[0] += sum((dh[k][i] - d[k][i]) ** 2 for i in range(3))
        t[1] += sum((mh[k][i] - m[k][i]) ** 2 for i in range(3))
        t[2] += (sum(dh[k][i] ** 2 for i in range(3)) ** 0.5 - 1) ** 2
        t[3] += sum(dh[k][i] * mh[k][i] for i in range(3)) ** 2
    t = [x / n for x in t]
    return sum(l * x for l, x in zip(lam, t)), t


def test_encode_shapes(tiny_model):
    raymaps = trajectory_raymaps(make_trajectory("orbit", None, n=9, seed=0))
    assert raymaps.shape == (9, 6, 64, 64)
    tokens = encode_cameras(tiny_model, raymaps)
    assert tokens.shape == (3, 8, 8, 16)
    assert np.isfinite(tokens).all()
    assert np.array_equal(tokens, encode_cameras(tiny_model, raymaps))
    recon = decode_cameras(tiny_model, tokens)
    assert recon.shape == (9, 6, 64, 64)
    assert np.isfinite(recon).all()


def test_full_scale_shape():
    torch.manual_seed(0)
    model = CameraAutoencoder(CameraAEConfig(c_cam=4, widths=(4, 4, 4)))
    with torch.no_grad():
        out = model.encode(torch.zeros(1, 17, 6, 256, 256))
    assert tuple(out.shape) == (1, 5, 32, 32, 4)


@pytest.mark.parametrize("T,H,W", [(1, 8, 8), (5, 16, 8), (9, 64, 64), (13, 24, 32)])
def test_decode_encode_preserves_shape(tiny_model, T, H, W):
    x = torch.randn(2, T, 6, H, W)
    with torch.no_grad():
        recon, tokens = tiny_model(x)
    assert recon.shape == x.shape
    assert tokens.shape == (2, (T - 1) // 4 + 1, H // 8, W // 8, 16)


@pytest.mark.parametrize("T,H,W", [(8, 64, 64), (9, 60, 64), (9, 64, 12)])
def test_indivisible_shapes_rejected(tiny_model, T, H, W):
    with pytest.raises(ValidationError):
        tiny_model.encode(torch.zeros(1, T, 6, H, W))


def test_decode_rejects_bad_grid(tiny_model):
    with pytest.raises(ValidationError):
        decode_cameras(tiny_model, np.zeros((3, 8, 8, 5), np.float32))


def test_loss_perfect_reconstruction_is_zero():
    raymaps = torch.as_tensor(trajectory_raymaps(make_trajectory("arc", None, n=5, seed=1)))
    d, m = split_raymap(raymaps, dim=1)
    total, terms = camera_loss((d, m), (d, m), dim=1)
    assert total.item() < 1e-10 and all(t.item() < 1e-10 for t in terms)


def test_loss_hand_arithmetic():
    d = torch.tensor([[0.0, 0.0, 1.0]])
    m = torch.zeros(1, 3)
    total, terms = camera_loss((torch.tensor([[0.0, 0.0, 2.0]]), m), (d, m), CameraLossWeights(1, 1, 1, 1))
    assert [t.item() for t in terms] == [1.0, 0.0, 1.0, 0.0]
    assert total.item() == 2.0


def test_loss_matches_scalar_loop_oracle():
    g = torch.Generator().manual_seed(0)
    lam = (0.7, 1.3, 0.2, 0.9)
    for _ in range(100):
        n = int(torch.randint(1, 12, (1,), generator=g))
        dh, mh, d, m = (torch.randn(n, 3, generator=g, dtype=torch.float64) for _ in range(4))
        total, terms = camera_loss((dh, mh), (d, m), CameraLossWeights(*lam))
        ref_total, ref_terms = scalar_loop_loss(dh.tolist(), mh.tolist(), d.tolist(), m.tolist(), lam)
        assert abs(total.item() - ref_total) <= 1e-10
        for a, b in zip(terms, ref_terms):
            assert abs(a.item() - b) <= 1e-10
        # total is exactly the weighted sum of the reported terms
        assert total.item() == sum(l * t for l, t in zip(lam, terms)).item()


def test_loss_nonnegative_and_zero_only_at_valid_match():
    g = torch.Generator().manual_seed(1)
    for _ in range(50):
        dh, mh, d, m = (torch.randn(4, 3, generator=g, dtype=torch.float64) for _ in range(4))
        total, terms = camera_loss((dh, mh), (d, m))
        assert total.item() > 0 and all(t.item() >= 0 for t in terms)


def test_loss_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(2)
    dh, mh, d, m = (torch.randn(3, 5, 3, generator=g, dtype=torch.float64) for _ in range(4))
    params = torch.cat([dh.reshape(-1), mh.reshape(-1)]).requires_grad_(True)
    w = CameraLossWeights(0.5, 2.0, 0.3, 0.7)

    def f(p):
        a, b = p[: dh.numel()].view_as(dh), p[dh.numel():].view_as(mh)
        return camera_loss((a, b), (d, m), w)[0]

    f(params).backward()
    eps = 1e-5
    fd = torch.zeros_like(params)
    with torch.no_grad():
        for i in range(params.numel()):
            e = torch.zeros_like(params)
            e[i] = eps
            fd[i] = (f(params + e) - f(params - e)) / (2 * eps)
    rel = (params.grad - fd).norm() / fd.norm()
    assert rel.item() <= 1e-4


def test_loss_rejects_nan_and_negative_weights():
    x = torch.zeros(2, 3)
    bad = x.clone()
    bad[0, 0] = float("nan")
    with pytest.raises(ValidationError):
        camera_loss((bad, x), (x, x))
    with pytest.raises(ValidationError):
        CameraLossWeights(-1, 1, 1, 1)


def test_causal_first_frame(tiny_model):
    x = torch.randn(1, 9, 6, 32, 32)
    y = x.clone()
    y[:, 1:] = torch.randn_like(y[:, 1:])
    with torch.no_grad():
        a, b = tiny_model.encode(x), tiny_model.encode(y)
    assert torch.equal(a[:, 0], b[:, 0])


def test_angular_error():
    d = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    dh = np.array([[0.0, 0.0, 3.0], [1.0, 1.0, 0.0]])
    assert np.allclose(angular_error_deg(dh, d), [0.0, 45.0])


def test_config_roundtrip():
    cfg = CameraAEConfig(c_cam=8, widths=(4, 8, 8), loss_weights=CameraLossWeights(1, 2, 3, 4))
    assert CameraAEConfig.from_dict(cfg.to_dict()) == cfg


SKIP = CameraAEConfig(c_cam=8, widths=(8, 8, 8), skip_in=True, skip_out=True, out_norm=False)


def test_skip_paths_keep_shapes_and_causality():
    torch.manual_seed(0)
    model = CameraAutoencoder(SKIP)
    x = torch.randn(1, 9, 6, 32, 32)
    with torch.no_grad():
        tokens = model.encode(x)
        assert tuple(tokens.shape) == (1, 3, 4, 4, 8)
        assert tuple(model.decode(tokens).shape) == (1, 9, 6, 32, 32)
        for k, last in enumerate((0, 4, 8)):
            y = x.clone()
            y[:, last + 1:] = torch.randn_like(y[:, last + 1:])
            assert torch.equal(model.encode(y)[:, :k + 1], tokens[:, :k + 1])


def test_pool_and_repeat_later_frames_are_inverse():
    from arview.layers import pool_later_frames, repeat_later_frames

    x = torch.randn(2, 3, 5, 4, 4)
    assert torch.equal(pool_later_frames(repeat_later_frames(x)), x)
    assert repeat_later_frames(x).shape[2] == 9


def test_skip_input_carries_the_pooled_field():
    # with the learned path zeroed, tokens are an exact linear function of block means
    torch.manual_seed(0)
    model = CameraAutoencoder(SKIP)
    torch.nn.init.zeros_(model.encoder.head.weight)
    torch.nn.init.zeros_(model.encoder.head.bias)
    x = torch.randn(1, 5, 6, 16, 16)
    with torch.no_grad():
        tokens = model.encode(x)[0].numpy()
    xs = (x * model.in_scale.transpose(1, 2))[0].numpy()  # (T, 6, H, W)
    blocks = [xs[0:1], xs[1:5]]
    w = model.encoder.skip.weight[:, :, 0, 0, 0].detach().numpy()
    b = model.encoder.skip.bias.detach().numpy()
    for k, frames in enumerate(blocks):
        for i in range(2):
            for j in range(2):
                mean = frames[:, :, 8 * i:8 * i + 8, 8 * j:8 * j + 8].mean(axis=(0, 2, 3))
                assert np.allclose(tokens[k, i, j], w @ mean + b, atol=1e-5)

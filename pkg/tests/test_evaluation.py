import json
import math

import jsonschema
import numpy as np
import pytest
from PIL import Image

from arview.errors import ValidationError
from arview.evaluation import (
    REPORT_SCHEMA,
    SSIM_C1,
    SSIM_C2,
    CheckpointSet,
    MetricsReport,
    ablation_orders,
    check_budgets,
    compare_tokenizers,
    contact_sheet,
    drift_slope,
    eval_run,
    late_drop,
    psnr,
    reconstruction_report,
    ssim,
)
from arview.experiments import DatasetRecipe, train_camera_stage, train_frames_stage
from arview.training import TrainConfig
from arview.transformer import SamplerConfig


def psnr_oracle(a, b):
    total, n = 0.0, 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (x - y) ** 2
        n += 1
    return 10 * math.log10(n / total)


def ssim_oracle(x, y, k=8):
    """Direct per-window evaluation of the documented formula with scalar loops."""
    H, W = x.shape
    vals = []
    for i in range(H - k + 1):
        for j in range(W - k + 1):
            a = x[i : i + k, j : j + k].ravel().tolist()
            b = y[i : i + k, j : j + k].ravel().tolist()
            n = len(a)
            ma, mb = sum(a) / n, sum(b) / n
            va = sum((p - ma) ** 2 for p in a) / n
            vb = sum((q - mb) ** 2 for q in b) / n
            cab = sum((p - ma) * (q - mb) for p, q in zip(a, b)) / n
            vals.append(((2 * ma * mb + SSIM_C1) * (2 * cab + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2)))
    return sum(vals) / len(vals)


def test_psnr_trivial_values():
    a = np.random.default_rng(0).random((3, 8, 8)) * 0.8
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_scalar_oracle_and_is_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.random((3, 12, 10)), rng.random((3, 12, 10))
        assert abs(psnr(a, b) - psnr_oracle(a, b)) <= 1e-9
        assert psnr(a, b) == psnr(b, a)


def test_psnr_strictly_decreasing_in_mse():
    a = np.full((4, 4), 0.5)
    vals = [psnr(a, a + d) for d in (0.01, 0.02, 0.05, 0.1, 0.3)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_psnr_errors():
    with pytest.raises(ValidationError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))
    with pytest.raises(ValidationError):
        psnr(np.zeros(4), np.full(4, 1.5))


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(2)
    a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    with pytest.raises(ValidationError):
        ssim(np.zeros((7, 7)), np.zeros((7, 7)))


def test_ssim_inverted_checker_is_negative_and_matches_oracle():
    v, u = np.mgrid[:12, :12]
    a = ((u + v) % 2).astype(np.float64)
    b = 1 - a
    got = ssim(a, b)
    assert got < 0
    assert got == pytest.approx(ssim_oracle(a, b), abs=1e-12)


def test_ssim_random_frames_match_oracle():
    rng = np.random.default_rng(3)
    a, b = rng.random((3, 10, 11)), rng.random((3, 10, 11))
    luma = lambda x: 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]
    assert ssim(a, b) == pytest.approx(ssim_oracle(luma(a), luma(b)), abs=1e-12)


def test_ssim_constant_frames_closed_form():
    a, b = np.full((3, 9, 9), 0.25), np.full((3, 9, 9), 0.75)
    expect = (2 * 0.25 * 0.75 + SSIM_C1) / (0.25**2 + 0.75**2 + SSIM_C1)
    assert ssim(a, b) == pytest.approx(expect, abs=1e-12)


def test_drift_helpers():
    assert drift_slope([10, 9, 8, 7]) == pytest.approx(-1.0)
    assert late_drop([10, 9, 8, 7, 6, 5, 4, 3]) == pytest.approx(6.0)  # (10+9)/2 - (4+3)/2


def make_report(seed=0):
    rng = np.random.default_rng(seed)
    scenes = [{"name": f"s{k}", "psnr": list(rng.uniform(10, 30, 4)), "ssim": list(rng.uniform(-1, 1, 4))}
              for k in range(3)]
    return MetricsReport(scenes, {"run": "x"})


def test_report_schema_and_determinism(tmp_path):
    r = make_report()
    d = json.loads(r.to_json())
    jsonschema.validate(d, REPORT_SCHEMA)
    assert d["summary"]["psnr"] == pytest.approx(r.mean_psnr)
    assert len(d["per_frame"]["psnr"]) == 4
    assert r.to_json() == make_report().to_json()
    r.save(tmp_path / "r.json")
    assert MetricsReport.load(tmp_path / "r.json").to_json() == r.to_json()
    bad = dict(d, schema_version=99)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, REPORT_SCHEMA)


def test_contact_sheet(tmp_path):
    gen = np.random.default_rng(0).random((4, 3, 8, 8))
    path = contact_sheet(gen[0], gen, gen, tmp_path / "sheet.ppm")
    assert path.read_bytes()[:2] == b"P6"
    assert Image.open(path).size == (4 * 8, 3 * 8)


def test_budget_mismatch_is_rejected(tmp_path):
    base = TrainConfig(component="ar", steps=10, warmup=0)
    check_budgets([base, TrainConfig.from_dict({**base.to_dict(), "plan_mode": "raster", "seed": 4})])
    other = TrainConfig.from_dict({**base.to_dict(), "steps": 11})
    with pytest.raises(ValidationError, match="steps"):
        check_budgets([base, other])
    with pytest.raises(ValidationError):
        ablation_orders(tmp_path, {"raster": base, "full": base, "hybrid": other}, None, None, tmp_path)


# -- tiny end-to-end pipeline ----------------------------------------------------------------

TINY_DATA = DatasetRecipe(n_scenes=3, frames=5, size=16, seed=0, val_fraction=1 / 3)
TINY_CAMERA = TrainConfig(component="camera_ae", steps=2, warmup=0, batch_size=1, frames=5, size=16,
                          model={"c_cam": 4, "widths": [8, 8], "time_down": [False, True]})
TINY_TOK = TrainConfig(component="tokenizer", steps=2, warmup=0, batch_size=1,
                       model={"levels": [4, 4], "widths": [8, 8], "time_down": [False, True]})
TINY_VQ = TrainConfig(component="vq_baseline", steps=2, warmup=0, batch_size=1,
                      model={"codebook_size": 16, "code_dim": 4, "widths": [8, 8]})
TINY_AR = TrainConfig(component="ar", steps=3, warmup=0, batch_size=2, lr=1e-2,
                      model={"dim": 16, "layers": 1, "heads": 2, "vocab_size": 16, "cam_dim": 4})


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    cache = tmp_path_factory.mktemp("cache")
    root = TINY_DATA.build(cache)
    cam = train_camera_stage(cache, TINY_CAMERA)
    tok = train_frames_stage(cache, "tok", TINY_TOK, root)
    vq = train_frames_stage(cache, "vq", TINY_VQ, root)
    return cache, root, cam, tok, vq


def test_oracle_generation_equals_reconstruction(tiny):
    cache, root, cam, tok, vq = tiny
    from arview.experiments import train_ar_stage

    for t, name in ((tok, "ar-video"), (vq, "ar-vq")):
        ar = train_ar_stage(cache, name, TINY_AR, root, t, cam)
        gen = eval_run(CheckpointSet(t, cam, ar), root, "val", oracle=True)
        from arview.experiments import load_model

        rec = reconstruction_report(load_model(t), root, "val")
        assert [s["psnr"] for s in gen.scenes] == [s["psnr"] for s in rec.scenes]


def test_eval_run_missing_checkpoint(tiny):
    cache, root, cam, tok, _ = tiny
    with pytest.raises(FileNotFoundError):
        eval_run(CheckpointSet(tok, cam, cache / "nope.ckpt"), root)


def test_ablation_is_deterministic(tiny, tmp_path):
    cache, root, cam, tok, vq = tiny
    sampler = SamplerConfig(temperature=1.0, top_k=4, seed=5)
    a = ablation_orders(root, TINY_AR, tok, cam, cache, seeds=(0, 1), sampler=sampler)
    b = ablation_orders(root, TINY_AR, tok, cam, tmp_path, seeds=(0, 1), sampler=sampler)  # fresh cache
    assert [x.row() for x in a] == [x.row() for x in b]
    assert [x.arm for x in a] == ["raster", "full", "hybrid"]
    arms = compare_tokenizers(root, TINY_AR, tok, vq, cam, cache, seeds=(0,), sampler=sampler)
    assert [x.arm for x in arms] == ["video", "vq"]
    # the video arm reuses the hybrid arm's run for the same seed
    assert arms[0].reports[0].scenes == a[2].reports[0].scenes

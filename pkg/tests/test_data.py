import json

import numpy as np
import pytest

from arview.data import (
    Box,
    SceneSpec,
    Sphere,
    load_manifest,
    load_sequence,
    make_dataset,
    make_scene,
    read_frame,
    render,
    shade_rays,
    to_uint8,
)
from arview.errors import ValidationError
from arview.geometry import CameraExtrinsics, CameraIntrinsics, camera_center, look_at, pixel_ray, project

A, B = (0.9, 0.8, 0.7), (0.1, 0.2, 0.3)
PLANE_SHADE = 0.35 + 0.65 * 0.8 / np.linalg.norm([0.4, 0.8, 0.3])


def scene_with(prims=None, size=1.0):
    prims = prims or (Box((0.0, 0.5, 0.0), (0.5, 0.5, 0.5), (0.8, 0.2, 0.2)),)
    return SceneSpec(0, tuple(prims), A, B, size, (0.2, 0.4, 0.6))


def down_camera(eye):
    R = np.array([[1.0, 0, 0], [0, 0, 1], [0, -1, 0]])  # forward -y, right +x, down +z
    return CameraExtrinsics(R, -R @ np.asarray(eye, dtype=np.float64))


def test_scene_validation():
    with pytest.raises(ValidationError):
        SceneSpec(0, ())
    with pytest.raises(ValidationError):
        SceneSpec(0, (Sphere((5.0, 1.0, 0.0), 0.5, A),))
    s = make_scene(3)
    assert SceneSpec.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def test_looking_up_sees_only_background():
    intr = CameraIntrinsics.from_fov(16, 16)
    ext = look_at((0.0, 5.0, 0.0), (0.0, 10.0, 0.001), up=(0.0, 0.0, 1.0))
    img = render(scene_with(), intr, ext, 16, 16)
    assert np.all(img == np.array([0.2, 0.4, 0.6]))


def test_top_down_checker_closed_form():
    # 1 world unit per pixel, checker cells of 4 units aligned to pixel edges
    # -> 4x4 pixel blocks alternating between the two plane colours.
    intr = CameraIntrinsics(16.0, 16.0, 16.0, 16.0, width=32, height=32)
    img = render(scene_with(size=4.0), intr, down_camera((40.0, 16.0, 40.0)), 32, 32)
    v, u = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    x = 40.0 + (u + 0.5 - 16.0)
    z = 40.0 + (v + 0.5 - 16.0)
    parity = (np.floor(x / 4) + np.floor(z / 4)).astype(int) % 2 == 0
    expect = np.where(parity[..., None], np.array(A) * PLANE_SHADE, np.array(B) * PLANE_SHADE)
    np.testing.assert_allclose(img, expect, atol=1e-12)
    blocks = parity.reshape(8, 4, 8, 4)
    assert np.all(blocks == blocks[:, :1, :, :1])
    assert np.all(parity[::4, ::4][:, 1:] != parity[::4, ::4][:, :-1])


def test_render_is_deterministic():
    scene = make_scene(11)
    intr = CameraIntrinsics.from_fov(24, 24)
    ext = look_at((3.0, 1.5, 3.0), (0.0, 0.5, 0.0))
    a = to_uint8(render(scene, intr, ext, 24, 24))
    b = to_uint8(render(scene, intr, ext, 24, 24))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValidationError):
        render(scene, intr, ext, 20, 24)


def test_sphere_hit_distance_closed_form():
    sph = Sphere((0.0, 1.0, 0.0), 0.5, (1.0, 1.0, 1.0))
    scene = scene_with((sph,))
    o = np.array([0.0, 1.0, 5.0])
    _, dist = shade_rays(scene, o, np.array([[0.0, 0.0, -1.0]]))
    assert dist[0] == pytest.approx(4.5, abs=1e-12)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    make_dataset(root, 2, frames_per_scene=9, kinds=("orbit", "truck"), H=32, W=32, seed=7)
    return root


def test_dataset_layout(dataset):
    man = load_manifest(dataset)
    names = sorted(man["splits"]["train"] + man["splits"]["val"])
    assert names == ["scene_0000", "scene_0001"]
    seq = load_sequence(dataset, "scene_0000")
    assert seq.frames.shape == (9, 32, 32, 3) and len(seq.trajectory) == 9
    raw = (dataset / "scene_0000" / "frame_000.rgb").read_bytes()
    assert np.frombuffer(raw[:12], "<u4").tolist() == [32, 32, 3]
    assert len(raw) == 12 + 32 * 32 * 3
    assert seq.frames_chw().min() >= 0 and seq.frames_chw().max() <= 1


def test_dataset_single_scene(tmp_path):
    make_dataset(tmp_path, 1, 9, H=8, W=8, seed=0)
    seq = load_sequence(tmp_path, "scene_0000")
    assert len(seq.frames) == 9 and len(seq.trajectory) == 9
    assert (tmp_path / "scene_0000" / "poses.txt").read_text().count("\n") == 9


def test_dataset_determinism(dataset, tmp_path):
    make_dataset(tmp_path, 2, frames_per_scene=9, kinds=("orbit", "truck"), H=32, W=32, seed=7)
    files = sorted(p.relative_to(dataset) for p in dataset.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*") if p.is_file())
    for f in files:
        assert (dataset / f).read_bytes() == (tmp_path / f).read_bytes()


def test_unwritable_destination(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        make_dataset(blocker / "sub", 1)
    with pytest.raises(ValidationError):
        make_dataset(tmp_path / "ok", 0)


def test_recast_pixel_reproduces_stored_color(dataset):
    seq = load_sequence(dataset, "scene_0001")
    rng = np.random.default_rng(0)
    for f in (0, 4, 8):
        intr, ext = seq.trajectory[f]
        for _ in range(40):
            u, v = int(rng.integers(0, 32)), int(rng.integers(0, 32))
            d, _ = pixel_ray(intr, ext, u, v)
            color, _ = shade_rays(seq.scene, camera_center(ext), d[None])
            assert np.array_equal(to_uint8(color[0]), seq.frames[f, v, u])


def _visible_ground(scene, ext, pts):
    """True where the ground point is the first hit along the ray from the camera."""
    o = camera_center(ext)
    d = pts - o
    dist = np.linalg.norm(d, axis=-1)
    _, hit = shade_rays(scene, o, d / dist[:, None])
    return np.abs(hit - dist) < 1e-6


def test_reprojection_colors_match(dataset):
    seq = load_sequence(dataset, "scene_0000")
    (intr, e0), (_, e1) = seq.trajectory[0], seq.trajectory[3]
    size = seq.scene.checker_size
    checked = 0
    for v in range(32):
        for u in range(32):
            d, m = pixel_ray(intr, e0, u, v)
            o = camera_center(e0)
            if d[1] >= 0:
                continue
            p = o - d * (o[1] / d[1])
            frac = np.mod(p[[0, 2]] / size, 1.0)
            if np.any(np.minimum(frac, 1 - frac) < 0.1):
                continue  # too close to a checker edge for a pixel-level match
            if not (_visible_ground(seq.scene, e0, p[None])[0] and _visible_ground(seq.scene, e1, p[None])[0]):
                continue
            uv, z = project(intr, e1, p[None])
            u1, v1 = np.floor(uv[0]).astype(int)
            if z[0] <= 0 or not (0 <= u1 < 32 and 0 <= v1 < 32):
                continue
            d1, _ = pixel_ray(intr, e1, u1, v1)
            q = camera_center(e1) - d1 * (camera_center(e1)[1] / d1[1])
            if np.any(np.floor(q[[0, 2]] / size) != np.floor(p[[0, 2]] / size)):
                continue  # pixel footprint straddles a cell edge
            if not _visible_ground(seq.scene, e1, q[None])[0]:
                continue  # neighbouring pixel ray clips a primitive silhouette
            diff = np.abs(seq.frames[0, v, u].astype(int) - seq.frames[3, v1, u1].astype(int))
            assert diff.max() <= 1
            checked += 1
    assert checked > 20


def _skew(t):
    return np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])


def test_epipolar_checker_corners(dataset):
    seq = load_sequence(dataset, "scene_0000")
    (intr, e0), (_, e1) = seq.trajectory[0], seq.trajectory[5]
    size = seq.scene.checker_size
    R = e1.R @ e0.R.T
    t = e1.t - R @ e0.t
    K = intr.K
    F = np.linalg.inv(K).T @ _skew(t) @ R @ np.linalg.inv(K)
    g = np.arange(-8, 9) * size
    corners = np.array([(x, 0.0, z) for x in g for z in g])
    ok = _visible_ground(seq.scene, e0, corners) & _visible_ground(seq.scene, e1, corners)
    uv0, z0 = project(intr, e0, corners)
    uv1, z1 = project(intr, e1, corners)
    inside = lambda uv: np.all((uv > 2) & (uv < 30), axis=1)
    ok &= (z0 > 0) & (z1 > 0) & inside(uv0) & inside(uv1)

    def looks_like_corner(img, ext, corner):
        # the four quadrants around the corner, sampled a quarter cell away,
        # must show the checker pattern: diagonal pairs equal, neighbours different
        offs = np.array([(-1, -1), (1, 1), (1, -1), (-1, 1)]) * 0.25 * size
        probes = corner + np.stack([offs[:, 0], np.zeros(4), offs[:, 1]], 1)
        if not _visible_ground(seq.scene, ext, probes).all():
            return False
        uv, _ = project(intr, ext, probes)
        ij = np.floor(uv).astype(int)
        if np.any((ij < 0) | (ij >= 32)):
            return False
        c = [img[v, u].astype(int) for u, v in ij]
        return np.array_equal(c[0], c[1]) and np.array_equal(c[2], c[3]) and not np.array_equal(c[0], c[2])

    matched = 0
    for k in np.flatnonzero(ok):
        if not (looks_like_corner(seq.frames[0], e0, corners[k]) and looks_like_corner(seq.frames[5], e1, corners[k])):
            continue
        x0 = np.array([*(uv0[k]), 1.0])
        x1 = np.array([*(uv1[k]), 1.0])
        line = F @ x0
        dist = abs(x1 @ line) / np.hypot(line[0], line[1])
        assert dist <= 0.5
        matched += 1
    assert matched >= 3

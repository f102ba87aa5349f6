import pytest

from arview import config as C
from arview.errors import ValidationError


def test_precedence_defaults_file_env_flags(tmp_path):
    assert C.resolve({}, {}, "sample", env={})["out"] == "runs/sample"
    assert C.resolve({}, {}, "sample", env={C.ENV_OUT: "/x"})["out"] == "/x/sample"
    file_cfg = {"out": "from-file", "seed": 3, "sampler": {"cfg_scale": 2.0}}
    cfg = C.resolve(file_cfg, {}, "sample", env={C.ENV_OUT: "/x"})
    assert (cfg["out"], cfg["seed"], cfg["sampler"]["cfg_scale"]) == ("from-file", 3, 2.0)
    assert cfg["sampler"]["parallel"] == 1  # untouched defaults survive the merge
    cfg = C.resolve(file_cfg, {"out": "flag", "seed": 9, "cfg_scale": 1.5}, "sample", env={C.ENV_OUT: "/x"})
    assert (cfg["out"], cfg["seed"], cfg["sampler"]["cfg_scale"]) == ("flag", 9, 1.5)


def test_every_flag_has_a_config_key():
    for dest, key in C.FLAG_KEYS.items():
        head = key.split(".")[0]
        assert head in C.DEFAULTS, dest
        cfg = C.resolve({}, {dest: "sentinel"}, "x", env={})
        assert C.get_key(cfg, key) == "sentinel"


def test_load_config_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 4\nmode: raster\ntrain:\n  steps: 7\n")
    cfg = C.resolve(C.load_config_file(p), {}, "train", env={})
    assert (cfg["seed"], cfg["mode"], cfg["train"]["steps"]) == (4, "raster", 7)
    p.write_text("sed: 4\n")
    with pytest.raises(ValidationError, match="unknown"):
        C.load_config_file(p)
    p.write_text("- 1\n")
    with pytest.raises(ValidationError):
        C.load_config_file(p)
    with pytest.raises(FileNotFoundError):
        C.load_config_file(tmp_path / "nope.yaml")


def test_merge_does_not_alias():
    base = {"a": {"b": [1]}}
    out = C.merge(base, {"a": {"c": 2}})
    out["a"]["b"].append(5)
    assert base == {"a": {"b": [1]}}

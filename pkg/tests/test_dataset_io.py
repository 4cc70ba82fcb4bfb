import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from semadv.config import ConfigError, RunConfig, parse_config
from semadv.data import (ImageFormatError, RunManifest, ToyDataset, file_sha256, gen_toy_dataset,
                         read_image, write_image)


def test_dataset_is_deterministic_and_balanced():
    a, b = gen_toy_dataset(seed=4, n=40), gen_toy_dataset(seed=4, n=40)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.fingerprint() == b.fingerprint()
    assert gen_toy_dataset(seed=5, n=40).fingerprint() != a.fingerprint()
    assert np.bincount(a.labels).tolist() == [10, 10, 10, 10]
    assert a.images.dtype == np.float32 and a.images.min() >= -1 and a.images.max() <= 1
    assert a.regions.any(axis=(1, 2)).all()


def test_colour_dataset_and_bad_arguments():
    ds = gen_toy_dataset(seed=0, n=8, C=3)
    assert ds.images.shape == (8, 3, 16, 16)
    for kw in (dict(K=1), dict(n=2), dict(C=2), dict(H=4)):
        with pytest.raises(ValueError):
            gen_toy_dataset(**kw)


def test_dataset_save_load_and_split(tmp_path):
    ds = gen_toy_dataset(seed=2, n=20)
    ds.save(tmp_path / "d.npz")
    back = ToyDataset.load(tmp_path / "d.npz")
    assert back.fingerprint() == ds.fingerprint()
    train, test = ds.split(0.25)
    assert len(train) == 15 and len(test) == 5


# ----------------------------------------------------------- image codec


def test_image_extremes_map_to_byte_extremes(tmp_path):
    x = np.array([[[-1.0, 1.0]]])
    write_image(x, tmp_path / "a.pgm")
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5") and raw[-2:] == bytes([0, 255])
    np.testing.assert_array_equal(read_image(tmp_path / "a.pgm"), [[[-1.0, 1.0]]])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 4, 5), elements=st.floats(-1, 1)))
def test_image_round_trip_within_one_level(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("img") / "x.ppm"
    write_image(x, path)
    back = read_image(path)
    assert back.shape == x.shape
    assert np.abs((back - x) / 2).max() <= 1 / 255 + 1e-6


def test_image_header_with_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# hello\n2 1\n255\n" + bytes([0, 255]))
    np.testing.assert_array_equal(read_image(p), [[[-1.0, 1.0]]])


@pytest.mark.parametrize("payload", [b"P5\n2 1\n255\n\x00", b"P3\n2 1\n255\n\x00\x00",
                                     b"P5\n2 1\n65535\n\x00\x00\x00\x00", b"P5\n2", b"P5\nx 1\n255\n\x00\x00"])
def test_malformed_images_are_rejected(tmp_path, payload):
    p = tmp_path / "bad.pgm"
    p.write_bytes(payload)
    with pytest.raises(ImageFormatError):
        read_image(p)


def test_unencodable_shape(tmp_path):
    with pytest.raises(ImageFormatError):
        write_image(np.zeros((2, 4, 4)), tmp_path / "x.pgm")


# ----------------------------------------------------------- configuration


def test_default_config_round_trips():
    cfg = parse_config(None)
    text = cfg.to_json()
    assert "lambda" in json.loads(text)["st"]
    assert parse_config(text).to_dict() == cfg.to_dict()


def test_missing_seed_defaults_to_zero():
    cfg = parse_config({"st": {"lambda": 0.5}})
    assert cfg.seed == 0 and cfg.st.seed == 0 and cfg.st.lam == 0.5


def test_top_level_seed_propagates():
    cfg = parse_config({"seed": 7})
    assert cfg.st.seed == 7 and cfg.lm.seed == 7


@pytest.mark.parametrize("raw,field", [
    ({"st": {"lambda": 0}}, "st.lambda"),
    ({"st": {"mode": "pixel"}}, "st.mode"),
    ({"bogus": 1}, "bogus"),
    ({"lm": {"gamma": 0}}, "lm.gamma"),
    ({"classifiers": {"judge": {}}}, "classifiers.judge"),
    ({"seed": -1}, "seed"),
])
def test_invalid_config_names_field(raw, field):
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    assert info.value.field == field


def test_json_errors_report_position(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"seed": 1,\n  "st": }')
    with pytest.raises(ConfigError, match="line 2 column"):
        parse_config(p)


def test_config_is_dataclass():
    assert isinstance(parse_config("{}"), RunConfig)


# ----------------------------------------------------------- manifests


def test_manifest_round_trip(tmp_path):
    ck = tmp_path / "m.ckpt"
    ck.write_bytes(b"abc")
    m = RunManifest("gen-data --n 4", {"seed": 1}, {"seed": 1}, "f" * 64)
    m.add_checkpoint("model", ck)
    m.add_artifact("b.txt")
    m.add_artifact("a.txt")
    m.write(tmp_path / "manifest.json")
    back = RunManifest.read(tmp_path / "manifest.json")
    assert back.to_dict() == m.to_dict()
    assert back.to_dict()["artifacts"] == ["a.txt", "b.txt"]
    assert back.checkpoints["model"]["sha256"] == file_sha256(ck)
    assert back.platform["numpy"] == np.__version__

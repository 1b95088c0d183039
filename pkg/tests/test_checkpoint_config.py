import struct

import numpy as np
import pytest

from hdcaseg import checkpoint
from hdcaseg import config as cfgmod
from hdcaseg.backbone import BackboneConfig
from hdcaseg.hdca import HdcaConfig
from hdcaseg.model import ModelConfig, SegModel
from hdcaseg.synthdata import SceneSpec, generate_scene
from hdcaseg.training import OptimizerState, TrainConfig, load_training_checkpoint, train

SMALL = BackboneConfig(8, [8, 8, 16], 16, 8)


def tiny_model(seed=0):
    return SegModel(ModelConfig(backbone=SMALL, hdca=HdcaConfig((2, 4), 4)), seed=seed)


# --- checkpoint --------------------------------------------------------------


def test_layout_of_a_single_tensor():
    buf = checkpoint.encode({"w": np.array([[1.5, -2.0]], np.float32)})
    expected = (b"HDCA" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"w" + struct.pack("<BB", 1, 2)
                + struct.pack("<QQ", 1, 2) + struct.pack("<ff", 1.5, -2.0))
    assert buf == expected


def test_round_trip_is_byte_identical(tmp_path):
    m = tiny_model()
    opt = OptimizerState(0.02, 100, iteration=7, velocity={"a": np.ones((2, 3), np.float32)}).to_tensors()
    checkpoint.save(tmp_path / "a.ckpt", m.state_dict(), opt)
    tensors, opt2 = checkpoint.load(tmp_path / "a.ckpt")
    checkpoint.save(tmp_path / "b.ckpt", tensors, opt2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(tensors[k], v)
        assert tensors[k].dtype == v.dtype
    state = OptimizerState.from_tensors(opt2)
    assert state.iteration == 7 and state.iter_max == 100 and state.base_lr == 0.02


def test_scalars_and_float64():
    t = {"s": np.array(3.25), "d": np.arange(6, dtype=np.float64).reshape(1, 2, 3)}
    back, _ = checkpoint.decode(checkpoint.encode(t))
    assert back["s"].shape == () and back["s"] == 3.25
    np.testing.assert_array_equal(back["d"], t["d"])


def test_bad_magic_and_version():
    with pytest.raises(checkpoint.BadMagicError):
        checkpoint.decode(b"NOPE" + bytes(8))
    with pytest.raises(checkpoint.UnsupportedVersionError, match="version 9"):
        checkpoint.decode(b"HDCA" + struct.pack("<II", 9, 0))


def test_truncation_is_reported():
    buf = checkpoint.encode({"w": np.ones(4, np.float32)})
    with pytest.raises(checkpoint.CheckpointError, match="truncated while reading w data"):
        checkpoint.decode(buf[:-3])


def test_unsupported_dtype_and_optimizer_prefix():
    with pytest.raises(checkpoint.CheckpointError, match="dtype"):
        checkpoint.encode({"i": np.arange(3)})
    with pytest.raises(checkpoint.CheckpointError, match="opt."):
        checkpoint.encode({}, {"velocity": np.ones(1)})


def test_resume_reproduces_uninterrupted_run(tmp_path):
    data = [generate_scene(SceneSpec(size=32, seed=1), i) for i in range(4)]
    cfg = TrainConfig(iters=12, batch_size=2, crop=32, seed=3, checkpoint_every=5)
    full = train(tiny_model(), data, cfg, out_dir=tmp_path / "full")
    m = tiny_model(seed=99)
    state = load_training_checkpoint(tmp_path / "full" / "checkpoint_000005.ckpt", m)
    assert state.iteration == 5
    rest = train(m, data, cfg, state=state)
    assert rest.loss_log == full.loss_log[5:]


# --- config ------------------------------------------------------------------


def test_defaults_and_overrides():
    rc = cfgmod.from_dict({"training": {"iters": 50}}, {"hdca.region_schedule": [2, 4], "model.seed": 3})
    assert rc.training.iters == 50 and rc.hdca.region_schedule == [2, 4] and rc.model.seed == 3
    mc = rc.model_config()
    assert mc.hdca.region_schedule == (2, 4) and mc.num_classes == 6


def test_empty_schedule_builds_baseline():
    assert cfgmod.from_dict({"hdca": {"region_schedule": []}}).model_config().hdca is None


def test_unknown_keys_rejected():
    with pytest.raises(cfgmod.ConfigError, match="unknown config key"):
        cfgmod.from_dict({"training": {"itres": 5}})
    with pytest.raises(cfgmod.ConfigError, match="unknown config key"):
        cfgmod.from_dict({"optimiser": {}})


def test_yaml_round_trip(tmp_path):
    rc = cfgmod.from_dict({"backbone": {"out_channels": 32, "reduced_channels": 16}})
    rc.dump(tmp_path / "c.yaml")
    assert cfgmod.load(tmp_path / "c.yaml").to_dict() == rc.to_dict()


@pytest.mark.parametrize("text, expected", [("2,4", [2, 4]), ("none", []), ("2, 4, 8,16", [2, 4, 8, 16])])
def test_parse_levels(text, expected):
    assert cfgmod.parse_levels(text) == expected


@pytest.mark.parametrize("text", ["4,2", "1,2", "2,x"])
def test_parse_levels_rejects(text):
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.parse_levels(text)

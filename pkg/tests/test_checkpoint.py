from dataclasses import replace

import numpy as np
import pytest

from fanlab.arch import DepthRegressorConfig, FanConfig
from fanlab.checkpoint import (MAGIC, Checkpoint, decode_checkpoint, encode_checkpoint, make_checkpoint,
                               read_checkpoint, restore, save_checkpoint)
from fanlab.config import config_to_text, parse_config
from fanlab.errors import ConfigurationError, DataError
from fanlab.tensor import Tensor
from fanlab.training import build_model, depth_preset, fan_preset, guided_preset, train

MICRO = FanConfig(num_stacks=2, hg_depth=1, width=8, num_landmarks=5, input_resolution=16)


def _forward(model, x, guides=None):
    model.eval()
    out = model(Tensor(x), None if guides is None else Tensor(guides))
    return out[-1].data if isinstance(out, list) else out.data


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_save_load_forward_is_bitwise_identical(tmp_path, small_dataset, dtype):
    cfg = fan_preset(MICRO, batch_size=4, epochs=1, learning_rate=1e-3)
    result = train(cfg, small_dataset[:8], dtype=dtype)
    x = np.random.default_rng(0).random((2, 3, 16, 16)).astype(dtype)
    before = _forward(result.model, x)
    save_checkpoint(tmp_path / "m.ckpt", cfg, result.model, result.optimizer, result.epoch)
    ckpt = read_checkpoint(tmp_path / "m.ckpt")
    cfg2, model2, opt2 = restore(ckpt)
    assert cfg2 == cfg and ckpt.epoch == 1
    assert ckpt.learning_rate == pytest.approx(1e-3)
    assert _forward(model2, x).tobytes() == before.tobytes()
    for name, acc in result.optimizer.state.accumulators.items():
        assert opt2.state.accumulators[name].tobytes() == acc.tobytes()


def test_guided_and_depth_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    for cfg in (guided_preset(replace(MICRO, in_channels=8)),
                depth_preset(DepthRegressorConfig(num_landmarks=5, width=8, input_resolution=16))):
        model = build_model(cfg)
        x = rng.random((2, 3, 16, 16)).astype(np.float32)
        g = rng.random((2, 5, 16, 16)).astype(np.float32)
        save_checkpoint(tmp_path / "c.ckpt", cfg, model)
        cfg2, model2, _ = restore(read_checkpoint(tmp_path / "c.ckpt"))
        assert cfg2 == cfg
        assert _forward(model2, x, g).tobytes() == _forward(model, x, g).tobytes()


def test_encoding_is_deterministic_and_self_describing():
    cfg = fan_preset(MICRO)
    model = build_model(cfg)
    a = encode_checkpoint(make_checkpoint(cfg, model))
    b = encode_checkpoint(make_checkpoint(cfg, build_model(cfg)))
    assert a == b and a.startswith(MAGIC)
    back = decode_checkpoint(a)
    assert back.config == cfg
    assert set(back.model_state()) == set(dict(model.state_dict()))


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXXXXXX" + d[8:],
    lambda d: d[:-3],
    lambda d: d + b"\0",
    lambda d: d[:8] + (2).to_bytes(4, "little") + d[12:],
])
def test_corrupt_checkpoints_are_rejected(mutate):
    cfg = fan_preset(MICRO)
    data = encode_checkpoint(make_checkpoint(cfg, build_model(cfg)))
    with pytest.raises(DataError):
        decode_checkpoint(mutate(data))


def test_mismatched_tensors_are_rejected():
    cfg = fan_preset(MICRO)
    ckpt = make_checkpoint(cfg, build_model(cfg))
    wrong = Checkpoint(config_to_text(fan_preset(replace(MICRO, width=16))), ckpt.tensors)
    with pytest.raises(DataError):
        restore(wrong)


def test_config_text_round_trip():
    for cfg in (fan_preset(), fan_preset(MICRO, seed=9, augment="none"), guided_preset(),
                depth_preset(), replace(fan_preset(), kind="fan3d", drop_epochs=(5, 8))):
        assert parse_config(config_to_text(cfg)) == cfg


def test_config_defaults_and_errors():
    cfg = parse_config("[train]\nkind = guided\nepochs = 3\n[model]\nnum_landmarks = 5\nwidth = 32\n"
                       "num_stacks = 2\nhg_depth = 3\ninput_resolution = 64\n")
    assert cfg.learning_rate == 1e-3 and cfg.epochs == 3 and cfg.model.in_channels == 8
    for bad in ("[train]\nepochs = many\n", "[train]\nbogus = 1\n", "[other]\nx = 1\n",
                "[train]\nkind = painting\n", "not an ini"):
        with pytest.raises(ConfigurationError):
            parse_config(bad)

import logging

import numpy as np
import pytest

from cyclematch.checkpoint import (
    Checkpoint,
    CheckpointCorruptError,
    CheckpointVersionError,
    ConfigMismatchError,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from cyclematch.encoder import EncoderConfig, init_params
from cyclematch.optim import AdamState


@pytest.fixture
def ck():
    cfg = EncoderConfig(seed=2)
    params = init_params(cfg)
    rng = np.random.default_rng(5)
    opt = AdamState.zeros_like({k: t.data for k, t in params.items()})
    for d in (opt.m, opt.v, opt.v_max):
        for k in d:
            d[k] = rng.normal(size=d[k].shape)
    opt.step = 17
    rng.normal(size=3)
    return Checkpoint(cfg, params, opt, 17, rng.bit_generator.state, {"tau": 0.07})


def test_round_trip_is_bitwise(ck, tmp_path):
    a = save_checkpoint(ck, tmp_path / "a.ckpt")
    back = load_checkpoint(a)
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert a.read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for k, t in ck.params.items():
        assert back.params[k].data.tobytes() == t.data.tobytes()
        assert back.opt_state.v_max[k].tobytes() == ck.opt_state.v_max[k].tobytes()
    assert back.step == 17 and back.opt_state.step == 17
    assert back.train_cfg == {"tau": 0.07}


def test_rng_state_restores_the_stream(ck, tmp_path):
    back = load_checkpoint(save_checkpoint(ck, tmp_path / "a.ckpt"))
    r1, r2 = np.random.default_rng(), np.random.default_rng()
    r1.bit_generator.state = ck.rng_state
    r2.bit_generator.state = back.rng_state
    assert np.array_equal(r1.random(5), r2.random(5))


def test_file_layout_header(ck):
    data = to_bytes(ck)
    assert data[:4] == b"CYCC"
    assert int.from_bytes(data[4:8], "little") == 1


def test_truncated_file(ck, tmp_path):
    p = save_checkpoint(ck, tmp_path / "a.ckpt")
    blob = p.read_bytes()
    for cut in (3, 20, len(blob) // 2, len(blob) - 1):
        p.write_bytes(blob[:cut])
        with pytest.raises(CheckpointCorruptError):
            load_checkpoint(p)


def test_flipped_byte_is_detected(ck, tmp_path):
    p = save_checkpoint(ck, tmp_path / "a.ckpt")
    blob = bytearray(p.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointCorruptError, match="checksum"):
        load_checkpoint(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointCorruptError, match="magic"):
        load_checkpoint(p)


def test_version_mismatch(ck, tmp_path):
    blob = bytearray(to_bytes(ck))
    blob[4:8] = (99).to_bytes(4, "little")
    p = tmp_path / "v.ckpt"
    p.write_bytes(bytes(blob))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(p)


def test_config_hash_mismatch(ck, tmp_path, caplog):
    p = save_checkpoint(ck, tmp_path / "a.ckpt")
    other = EncoderConfig(out_dim=32)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(p, expected=other)
    with caplog.at_level(logging.WARNING):
        back = load_checkpoint(p, expected=other, allow_mismatch=True)
    assert back.encoder_cfg == ck.encoder_cfg
    assert "hash" in caplog.text
    assert load_checkpoint(p, expected=EncoderConfig(seed=2)).step == 17


def test_missing_file_names_the_path(tmp_path):
    with pytest.raises(OSError, match="nothere"):
        load_checkpoint(tmp_path / "nothere.ckpt")

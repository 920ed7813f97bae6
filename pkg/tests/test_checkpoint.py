import numpy as np
import pytest

from retrorank.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from retrorank.encoder import EncoderConfig, Tower
from retrorank.trainer import load_towers, save_towers


def test_round_trip(tmp_path):
    arrays = {
        "a.weight": np.arange(12, dtype=np.float32).reshape(3, 4),
        "b": np.array([1.5], dtype=np.float32),
    }
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, "deadbeef", arrays)
    digest, loaded = load_checkpoint(path)
    assert digest == "deadbeef"
    assert set(loaded) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], arrays[k])


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_deterministic_bytes(tmp_path):
    arrays = {"w": np.ones((2, 2), dtype=np.float32)}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, "d", arrays)
    save_checkpoint(p2, "d", arrays)
    assert p1.read_bytes() == p2.read_bytes()


def test_tower_round_trip_and_digest_guard(tmp_path):
    cfg = EncoderConfig(vocab_size=9, max_len=8, dim=8, layers=1, heads=2, ff_dim=16)
    rng = np.random.default_rng(0)
    product, template = Tower.create(cfg, rng), Tower.create(cfg, rng)
    path = tmp_path / "towers.ckpt"
    save_towers(path, product, template, shadow=template.params)
    p2, t2, shadow = load_towers(path, cfg)
    for k in product.params:
        np.testing.assert_array_equal(p2.params[k], product.params[k])
        np.testing.assert_array_equal(shadow[k], template.params[k])
    other = EncoderConfig(vocab_size=9, max_len=8, dim=8, layers=2, heads=2, ff_dim=16)
    with pytest.raises(CheckpointError):
        load_towers(path, other)

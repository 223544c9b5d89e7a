"""Checkpoint container: bit-exact round trips, resume, malformed files."""
import struct

import numpy as np
import pytest

from woundseg import (CheckpointError, Lamb, Model, Tensor, read_checkpoint,
                      reduced_config, resume_optimizer, save_model,
                      write_checkpoint)
from woundseg.checkpoint import MAGIC, VERSION, load_model


def _tiny_model(seed=0):
    return Model(reduced_config(widths=(4, 8), blocks_per_stage=1), seed=seed)


# --------------------------------------------------------------------------
# Round trips

def test_array_round_trip_bit_exact(tmp_path, rng):
    arrays = {
        "a": rng.standard_normal((2, 3, 4, 5)).astype(np.float32),
        "nested/name.with.dots": rng.standard_normal((1, 1, 1, 1)).astype(np.float32),
        "unicode-ключ": np.full((3, 3), np.pi, np.float32),
    }
    texts = {"config": "k=v\n", "note": "hello\nworld"}
    path = tmp_path / "t.rseg"
    write_checkpoint(path, arrays, texts)
    ckpt = read_checkpoint(path)
    assert set(ckpt.arrays) == set(arrays)
    for k in arrays:
        assert ckpt.arrays[k].dtype == np.float32
        np.testing.assert_array_equal(ckpt.arrays[k], arrays[k])
    assert ckpt.texts == texts


def test_model_round_trip_reproduces_outputs(tmp_path, rng):
    model = _tiny_model(seed=5)
    # push the model away from init so buffers are non-trivial
    x = Tensor(rng.random((2, 3, 8, 8)).astype(np.float32))
    model(x, "train")
    path = tmp_path / "m.rseg"
    save_model(path, model)
    loaded, ckpt = load_model(path)
    assert loaded.cfg == model.cfg
    probe = Tensor(rng.random((1, 3, 8, 8)).astype(np.float32))
    np.testing.assert_array_equal(model(probe, "eval").data,
                                  loaded(probe, "eval").data)
    assert "config" in ckpt.texts


def test_extra_texts_survive(tmp_path):
    model = _tiny_model()
    path = tmp_path / "m.rseg"
    save_model(path, model, extra_texts={"history": "epoch=1"})
    _, ckpt = load_model(path)
    assert ckpt.texts["history"] == "epoch=1"


def test_optimizer_resume_matches_uninterrupted_run(tmp_path, rng):
    """Save/restore mid-training must continue exactly as if never stopped."""
    def steps(model, opt, n, seed):
        g = np.random.default_rng(seed)
        from woundseg import Tape, seg_loss
        for _ in range(n):
            x = Tensor(g.random((2, 3, 8, 8)).astype(np.float32))
            y = Tensor((g.random((2, 1, 8, 8)) > 0.5).astype(np.float32))
            with Tape() as tape:
                loss = seg_loss(model(x, "train"), y)
                tape.backward(loss)
            opt.step()
            opt.zero_grad()

    base = _tiny_model(seed=0)
    opt = Lamb(base.params(), lr=0.01)
    steps(base, opt, 3, seed=100)
    path = tmp_path / "mid.rseg"
    save_model(path, base, opt)
    steps(base, opt, 2, seed=200)     # uninterrupted continuation

    resumed, ckpt = load_model(path)
    opt2 = Lamb(resumed.params(), lr=0.01)
    resume_optimizer(ckpt, opt2)
    assert opt2.t == 3
    steps(resumed, opt2, 2, seed=200)

    for a, b in zip(base.params(), resumed.params()):
        np.testing.assert_array_equal(a.data, b.data)


def test_resume_requires_optimizer_state(tmp_path):
    model = _tiny_model()
    path = tmp_path / "nopt.rseg"
    save_model(path, model)   # no optimizer
    _, ckpt = load_model(path)
    with pytest.raises(CheckpointError, match="optimizer"):
        resume_optimizer(ckpt, Lamb(model.params()))


def test_checkpoint_config_mismatch_detected(tmp_path):
    model = _tiny_model()
    path = tmp_path / "m.rseg"
    save_model(path, model)
    ckpt = read_checkpoint(path)
    other = Model(reduced_config(widths=(8, 16), blocks_per_stage=1), seed=0)
    from woundseg import ConfigError
    with pytest.raises(ConfigError):
        other.load_state_arrays(ckpt.model_arrays)


# --------------------------------------------------------------------------
# Malformed files

def test_bad_magic(tmp_path):
    p = tmp_path / "bad.rseg"
    p.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(p)


def test_unsupported_version(tmp_path):
    p = tmp_path / "v9.rseg"
    p.write_bytes(MAGIC + struct.pack("<II", 9, 0))
    with pytest.raises(CheckpointError, match="version 9"):
        read_checkpoint(p)


def test_truncated_file(tmp_path, rng):
    p = tmp_path / "t.rseg"
    write_checkpoint(p, {"a": rng.standard_normal((2, 2, 2, 2)).astype(np.float32)}, {})
    blob = p.read_bytes()
    p.write_bytes(blob[:len(blob) - 7])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(p)


def test_trailing_garbage(tmp_path, rng):
    p = tmp_path / "t.rseg"
    write_checkpoint(p, {"a": np.ones((1, 1, 1, 1), np.float32)}, {})
    p.write_bytes(p.read_bytes() + b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(p)


def test_duplicate_names_rejected_on_write(tmp_path):
    with pytest.raises(CheckpointError, match="duplicate"):
        write_checkpoint(tmp_path / "d.rseg",
                         {"config": np.ones((1, 1, 1, 1), np.float32)},
                         {"config": "x"})


def test_missing_file():
    with pytest.raises(CheckpointError, match="not found"):
        read_checkpoint("/nonexistent/path.rseg")


def test_version_constant_is_one():
    assert VERSION == 1 and MAGIC == b"RSEG"


def test_format_layout_documented_fields(tmp_path):
    """Spot-check the binary layout: magic, version, count, then a named
    float32 entry with rank and dims, little-endian throughout."""
    p = tmp_path / "layout.rseg"
    arr = np.arange(6, dtype=np.float32).reshape(1, 1, 2, 3)
    write_checkpoint(p, {"w": arr}, {})
    blob = p.read_bytes()
    assert blob[:4] == b"RSEG"
    version, count = struct.unpack_from("<II", blob, 4)
    assert (version, count) == (1, 1)
    name_len = struct.unpack_from("<I", blob, 12)[0]
    assert blob[16:16 + name_len] == b"w"
    tag, rank = struct.unpack_from("<II", blob, 16 + name_len)
    assert (tag, rank) == (1, 4)
    dims = struct.unpack_from("<4I", blob, 24 + name_len)
    assert dims == (1, 1, 2, 3)
    data = np.frombuffer(blob, dtype="<f4", count=6, offset=40 + name_len)
    np.testing.assert_array_equal(data, np.arange(6, dtype=np.float32))

import numpy as np
import pytest

from mirror_sat.checkpoint import (MAGIC, Checkpoint, CheckpointError, from_bytes, load_checkpoint,
                                   save_checkpoint, to_bytes)


def sample_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(
        config={"model": {"input_size": 64}, "train": {"seed": 0}},
        arrays={"model/w": rng.standard_normal((3, 4)).astype(np.float32),
                "model/b": np.arange(5, dtype=np.float64),
                "optim/m/w": np.zeros((3, 4), np.float32)},
        iteration=17,
        rng_state=np.random.Generator(np.random.PCG64(5)).bit_generator.state,
        meta={"best_iou": 0.5},
    )


def test_save_load_save_is_byte_identical(tmp_path):
    ck = sample_ckpt()
    save_checkpoint(tmp_path / "a.ckpt", ck)
    again = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", again)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for k, v in ck.arrays.items():
        assert again.arrays[k].dtype == v.dtype
        assert np.array_equal(again.arrays[k], v)
    assert again.rng_state == ck.rng_state
    assert again.iteration == 17


def test_rng_state_round_trip_resumes_stream():
    g = np.random.Generator(np.random.PCG64(5))
    g.random(3)
    ck = sample_ckpt()
    ck.rng_state = g.bit_generator.state
    h = np.random.Generator(np.random.PCG64(0))
    h.bit_generator.state = from_bytes(to_bytes(ck)).rng_state
    assert np.array_equal(g.random(4), h.random(4))


def test_corrupted_trailing_bytes_fail_digest():
    data = bytearray(to_bytes(sample_ckpt()))
    data[-1] ^= 0xFF
    with pytest.raises(CheckpointError, match="digest"):
        from_bytes(bytes(data))


def test_truncated_file_rejected():
    data = to_bytes(sample_ckpt())
    with pytest.raises(CheckpointError, match="payload"):
        from_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        from_bytes(data[: len(MAGIC) + 10])


def test_version_mismatch_and_bad_magic():
    ck = sample_ckpt()
    ck.format_version = 99
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(to_bytes(ck))
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(b"PK\x03\x04 not a checkpoint")


def test_header_is_one_json_line_with_directory():
    import json

    data = to_bytes(sample_ckpt())
    header = json.loads(data[len(MAGIC):data.index(b"\n", len(MAGIC))])
    names = [a["name"] for a in header["arrays"]]
    assert names == sorted(names)
    assert all(a["dtype"].startswith("<") for a in header["arrays"])
    assert header["digest"].startswith("sha256:")


def test_model_and_optimizer_views():
    ck = sample_ckpt()
    assert set(ck.model_state()) == {"w", "b"}
    assert set(ck.optim_state()) == {"m/w"}

import zipfile

import numpy as np
import pytest
import torch

from fbchain.checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    load_params,
    read_arrays,
    save_checkpoint,
    write_arrays,
)
from fbchain.network import ablation_config, build_model
from helpers import micro_config


def test_array_block_round_trip_all_dtypes():
    arrays = {
        "a": np.arange(6, dtype="<f4").reshape(2, 3),
        "b.c": np.array([1.5, -2.0], dtype="<f8"),
        "i": np.array([[7]], dtype="<i8"),
        "j": np.array(3, dtype="<i4"),
        "u": np.array([0, 255], dtype=np.uint8),
        "m": np.array([True, False]),
        "h": np.array([0.5], dtype="<f2"),
        "empty": np.zeros((0, 4), dtype="<f4"),
    }
    back = read_arrays(write_arrays(arrays))
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()


def test_array_layout_is_little_endian_documented():
    blob = write_arrays({"w": np.array([1.0], dtype="<f4")})
    assert blob[:6] == b"FBARR\x00"
    # header: magic, u16 version, u32 count; record: u16 len, name, u8 dtype, u8 ndim, u64 dim, u64 nbytes
    assert int.from_bytes(blob[8:12], "little") == 1
    assert int.from_bytes(blob[12:14], "little") == 1 and blob[14:15] == b"w"
    assert blob[-4:] == np.array([1.0], dtype="<f4").tobytes()


def test_corrupt_block_rejected():
    blob = write_arrays({"w": np.ones(4, dtype="<f4")})
    with pytest.raises(CheckpointError):
        read_arrays(blob[:-3])
    with pytest.raises(CheckpointError):
        read_arrays(b"XXXXXX" + blob[6:])


def test_save_load_forward_bitwise(tmp_path):
    m = build_model(micro_config(seed=2))
    with torch.no_grad():
        torch.nn.init.normal_(m.decoder.head.weight)
    m.eval()
    x = torch.randn(3, 1, 16, 16)
    with torch.no_grad():
        before = m(x)
    save_checkpoint(Checkpoint.from_model(m, epoch=4, rng_state=b"xyz", best_metric=0.5), tmp_path / "m.ckpt")
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.epoch == 4 and ck.rng_state == b"xyz" and ck.config == m.config
    m2 = ck.build()
    m2.eval()
    with torch.no_grad():
        after = m2(x)
    assert torch.equal(before, after)
    with zipfile.ZipFile(tmp_path / "m.ckpt") as zf:
        assert {"manifest.json", "params.bin", "rng_state.bin"} <= set(zf.namelist())


def test_mismatch_names_module():
    full = build_model(micro_config())
    base = build_model(ablation_config("baseline", micro_config()))
    with pytest.raises(CheckpointError, match="gpa|fha|encoder"):
        load_params(base, Checkpoint.from_model(full).params)


def test_shape_mismatch_names_module():
    a = build_model(micro_config())
    b = build_model(micro_config(channels=(8, 32), decoder_channels=(8,)))
    with pytest.raises(CheckpointError, match="module"):
        load_params(a, Checkpoint.from_model(b).params)


def test_not_an_archive(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_atomic_write_leaves_no_temp(tmp_path):
    m = build_model(micro_config())
    save_checkpoint(Checkpoint.from_model(m), tmp_path / "a.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]

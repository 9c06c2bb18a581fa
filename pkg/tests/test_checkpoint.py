"""Checkpoint container: byte-exact round trips, digest refusal, and the
failure modes of damaged files.
"""

import json
import struct

import numpy as np
import pytest

from layerbridge.autodiff import Tensor
from layerbridge.checkpoint import (
    Checkpoint,
    checkpoint_from_params,
    load_checkpoint,
    restore_params,
    save_checkpoint,
)
from layerbridge.errors import ConfigError, ContractError, IngestionError


def make_ckpt():
    rng = np.random.default_rng(5)
    return Checkpoint(
        config_digest="abc123",
        stage="translation",
        step=42,
        tensors={
            "adapter.w": rng.normal(size=(3, 4)).astype(np.float32),
            "gates": rng.normal(size=(2,)).astype(np.float32),
            "scalar": np.array(1.25, dtype=np.float32),
        },
    )


def test_round_trip_preserves_everything(tmp_path):
    ckpt = make_ckpt()
    path = save_checkpoint(tmp_path / "m.ckpt", ckpt)
    loaded = load_checkpoint(path)
    assert loaded.config_digest == "abc123"
    assert loaded.stage == "translation"
    assert loaded.step == 42
    assert sorted(loaded.tensors) == sorted(ckpt.tensors)
    for name, arr in ckpt.tensors.items():
        assert loaded.tensors[name].dtype == np.float32
        assert loaded.tensors[name].shape == arr.shape  # 0-d stays 0-d
        assert np.array_equal(loaded.tensors[name], arr)


def test_save_load_save_is_byte_identical(tmp_path):
    ckpt = make_ckpt()
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_tensor_order_does_not_matter(tmp_path):
    ckpt = make_ckpt()
    reversed_tensors = dict(reversed(list(ckpt.tensors.items())))
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    save_checkpoint(
        tmp_path / "b.ckpt",
        Checkpoint(ckpt.config_digest, ckpt.stage, ckpt.step, reversed_tensors),
    )
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_no_tmp_file_left_behind(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", make_ckpt())
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


def test_digest_mismatch_refused_unless_forced(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", make_ckpt())
    with pytest.raises(ConfigError, match="digest"):
        load_checkpoint(path, expected_digest="something-else")
    loaded = load_checkpoint(path, expected_digest="something-else", force=True)
    assert loaded.config_digest == "abc123"
    # matching digest passes without force
    assert load_checkpoint(path, expected_digest="abc123").step == 42


def test_missing_file(tmp_path):
    with pytest.raises(IngestionError, match="cannot read"):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_bad_magic(tmp_path):
    p = tmp_path / "m.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(IngestionError, match="magic"):
        load_checkpoint(p)


def test_too_short_file(tmp_path):
    p = tmp_path / "m.ckpt"
    p.write_bytes(b"LBCK\x01")
    with pytest.raises(IngestionError, match="magic"):
        load_checkpoint(p)


def test_unsupported_version(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", make_ckpt())
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(IngestionError, match="version 99"):
        load_checkpoint(path)


def test_truncated_header(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", make_ckpt())
    blob = bytearray(path.read_bytes())
    blob[8:16] = struct.pack("<Q", len(blob) * 2)
    path.write_bytes(bytes(blob))
    with pytest.raises(IngestionError, match="truncated checkpoint header"):
        load_checkpoint(path)


def test_corrupt_header_json(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", make_ckpt())
    blob = bytearray(path.read_bytes())
    blob[16] = ord("?")
    path.write_bytes(bytes(blob))
    with pytest.raises(IngestionError, match="corrupt checkpoint header"):
        load_checkpoint(path)


def test_truncated_payload(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", make_ckpt())
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(IngestionError, match="truncated payload"):
        load_checkpoint(path)


def test_duplicate_tensor_entry(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", make_ckpt())
    blob = path.read_bytes()
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16 : 16 + header_len])
    header["tensors"].append(dict(header["tensors"][0]))
    new_header = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    rebuilt = blob[:8] + struct.pack("<Q", len(new_header)) + new_header + blob[16 + header_len :]
    path.write_bytes(rebuilt)
    with pytest.raises(IngestionError, match="duplicate tensor"):
        load_checkpoint(path)


def test_duplicate_names_refused_on_save(tmp_path):
    ckpt = make_ckpt()
    save = dict(ckpt.tensors)

    class Doubled(dict):
        def __iter__(self):
            yield from list(save) + [next(iter(save))]

    ckpt.tensors = Doubled(save)
    with pytest.raises(ContractError, match="duplicate"):
        save_checkpoint(tmp_path / "m.ckpt", ckpt)


def params_like(ckpt):
    return {name: Tensor(np.zeros_like(arr)) for name, arr in ckpt.tensors.items()}


def test_checkpoint_from_params_copies():
    params = {"w": Tensor(np.ones((2, 2), dtype=np.float32))}
    ckpt = checkpoint_from_params(params, "d", "task", 7)
    params["w"].data[...] = 5.0
    assert np.array_equal(ckpt.tensors["w"], np.ones((2, 2)))
    assert (ckpt.config_digest, ckpt.stage, ckpt.step) == ("d", "task", 7)


def test_restore_params_round_trip():
    ckpt = make_ckpt()
    params = params_like(ckpt)
    restore_params(params, ckpt)
    for name, p in params.items():
        assert np.array_equal(p.data, ckpt.tensors[name])


def test_restore_rejects_missing_and_extra():
    ckpt = make_ckpt()
    params = params_like(ckpt)
    del params["gates"]
    params["rogue"] = Tensor(np.zeros(3, dtype=np.float32))
    with pytest.raises(ContractError, match=r"missing \['rogue'\], unexpected \['gates'\]"):
        restore_params(params, ckpt)


def test_restore_rejects_shape_mismatch():
    ckpt = make_ckpt()
    params = params_like(ckpt)
    params["gates"] = Tensor(np.zeros((3,), dtype=np.float32))
    with pytest.raises(ContractError, match="shape"):
        restore_params(params, ckpt)

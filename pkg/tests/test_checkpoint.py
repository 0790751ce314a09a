from __future__ import annotations

import numpy as np
import pytest

from src.checkpoint import (
    CONCEPTS_KEY,
    MAGIC,
    decode_entries,
    describe_checkpoint,
    encode_entries,
    read_checkpoint,
    split_checkpoint,
    write_checkpoint,
)
from src.errors import CheckpointError
from src.model import ArchConfig, init_model


def test_write_read_split(tmp_path) -> None:
    arch = ArchConfig(input_dim=4, hidden_dims=(3,), num_classes=2, embed_dim=2)
    params = init_model(arch, seed=0)
    concepts = np.arange(6, dtype=np.float64).reshape(3, 2)
    upsilons = {2: np.array([0.2, 0.3, 0.5]), 0: np.array([1.0, 0.0, 0.0])}

    path = write_checkpoint(tmp_path / "run" / "round_1.ckpt", params, concepts, upsilons)
    entries = read_checkpoint(path)

    assert path.read_bytes()[:4] == MAGIC
    weights, loaded_concepts, loaded_upsilons = split_checkpoint(entries)
    assert set(weights) == set(params)
    for name, value in params.arrays().items():
        assert weights[name].dtype == np.float32
        np.testing.assert_array_equal(weights[name], value)
    np.testing.assert_array_equal(loaded_concepts, concepts)
    assert sorted(loaded_upsilons) == [0, 2]
    np.testing.assert_array_equal(loaded_upsilons[2], upsilons[2])


def test_scalar_and_integer_entries_are_stored() -> None:
    entries = decode_entries(encode_entries({"step": np.float64(3.0), "ints": np.arange(3)}))
    assert entries["step"].shape == ()
    assert entries["ints"].dtype == np.float64
    assert entries["ints"].tolist() == [0.0, 1.0, 2.0]


def test_bad_magic_rejected() -> None:
    with pytest.raises(CheckpointError, match="bad magic"):
        decode_entries(b"XXXX" + b"\x00" * 8)


def test_truncated_payload_names_offset() -> None:
    blob = encode_entries({"w": np.ones((2, 2))})
    with pytest.raises(CheckpointError, match="byte offset"):
        decode_entries(blob[:-3])


def test_missing_file(tmp_path) -> None:
    with pytest.raises(CheckpointError, match="not found"):
        read_checkpoint(tmp_path / "nope.ckpt")


def test_describe_checkpoint(tmp_path) -> None:
    path = write_checkpoint(tmp_path / "c.ckpt", {"w": np.array([3.0, 4.0])}, concepts=np.zeros((2, 2)))
    rows = {row["name"]: row for row in describe_checkpoint(path)}
    assert rows["w"]["l2_norm"] == pytest.approx(5.0)
    assert rows[CONCEPTS_KEY]["shape"] == [2, 2]

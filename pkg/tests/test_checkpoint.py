"""
Tests for the checkpoint container
"""
import json
import struct

import pytest
import torch
import torch.nn as nn
from safetensors.torch import save as save_tensors

from src.orchestration.checkpoint import (
    FORMAT_VERSION,
    METADATA_KEY,
    Checkpoint,
    load_checkpoint,
    save_checkpoint,
    serialize_checkpoint,
)
from src.utils.exceptions import CheckpointError


def trained_checkpoint() -> Checkpoint:
    torch.manual_seed(0)
    model = nn.Sequential(nn.Linear(4, 3), nn.GELU(), nn.Linear(3, 1))
    optimizer = torch.optim.AdamW(model.parameters(), lr=1e-3, weight_decay=1e-4)
    for _ in range(2):
        optimizer.zero_grad()
        model(torch.randn(5, 4)).pow(2).mean().backward()
        optimizer.step()
    return Checkpoint(
        parameters=dict(model.state_dict()),
        optimizer_state=optimizer.state_dict(),
        epoch=1,
        step=2,
        config={"seed": 42, "model": {"use_dsa": True}},
        history=[{"step": 1, "loss": 0.5}, {"step": 2, "loss": 0.25}],
    )


class TestCheckpoint:
    """Test cases for save_checkpoint / load_checkpoint"""

    def setup_method(self):
        self.checkpoint = trained_checkpoint()

    def test_roundtrip_parameters(self, tmp_path):
        path = save_checkpoint(self.checkpoint, tmp_path / "ckpt.safetensors")
        loaded = load_checkpoint(path)
        assert sorted(loaded.parameters) == sorted(self.checkpoint.parameters)
        for name, value in self.checkpoint.parameters.items():
            assert torch.equal(loaded.parameters[name], value)
        assert loaded.step == 2
        assert loaded.epoch == 1
        assert loaded.config == self.checkpoint.config
        assert loaded.history == self.checkpoint.history

    def test_roundtrip_optimizer_state(self, tmp_path):
        path = save_checkpoint(self.checkpoint, tmp_path / "ckpt.safetensors")
        loaded = load_checkpoint(path).optimizer_state
        original = self.checkpoint.optimizer_state
        assert loaded["param_groups"] == json.loads(json.dumps(original["param_groups"]))
        assert sorted(loaded["state"]) == sorted(original["state"])
        for index, state in original["state"].items():
            for key, value in state.items():
                restored = loaded["state"][index][key]
                assert torch.equal(torch.as_tensor(restored), torch.as_tensor(value))

    def test_loaded_optimizer_state_is_usable(self, tmp_path):
        path = save_checkpoint(self.checkpoint, tmp_path / "ckpt.safetensors")
        model = nn.Sequential(nn.Linear(4, 3), nn.GELU(), nn.Linear(3, 1))
        optimizer = torch.optim.AdamW(model.parameters(), lr=1e-3)
        loaded = load_checkpoint(path)
        model.load_state_dict(loaded.parameters)
        optimizer.load_state_dict(loaded.optimizer_state)
        assert optimizer.param_groups[0]["weight_decay"] == pytest.approx(1e-4)

    def test_save_load_save_is_byte_stable(self, tmp_path):
        first = save_checkpoint(self.checkpoint, tmp_path / "a.safetensors")
        second = save_checkpoint(load_checkpoint(first), tmp_path / "b.safetensors")
        assert first.read_bytes() == second.read_bytes()

    def test_no_temp_file_left(self, tmp_path):
        save_checkpoint(self.checkpoint, tmp_path / "ckpt.safetensors")
        assert [p.name for p in tmp_path.iterdir()] == ["ckpt.safetensors"]

    def test_truncated_file(self, tmp_path):
        path = save_checkpoint(self.checkpoint, tmp_path / "ckpt.safetensors")
        payload = path.read_bytes()
        path.write_bytes(payload[: len(payload) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_tiny_file(self, tmp_path):
        path = tmp_path / "ckpt.safetensors"
        path.write_bytes(b"abc")
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_corrupted_tensor_bytes(self, tmp_path):
        path = save_checkpoint(self.checkpoint, tmp_path / "ckpt.safetensors")
        payload = bytearray(path.read_bytes())
        payload[-1] ^= 0xFF
        path.write_bytes(bytes(payload))
        with pytest.raises(CheckpointError, match="integrity"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "missing.safetensors")

    def test_version_mismatch_names_both_versions(self, tmp_path):
        payload = serialize_checkpoint(self.checkpoint)
        (header_size,) = struct.unpack("<Q", payload[:8])
        header = json.loads(payload[8 : 8 + header_size])
        metadata = json.loads(header["__metadata__"][METADATA_KEY])
        metadata["format_version"] = FORMAT_VERSION + 1
        path = tmp_path / "future.safetensors"
        path.write_bytes(
            save_tensors(
                {"model.w": torch.zeros(1)}, metadata={METADATA_KEY: json.dumps(metadata)}
            )
        )
        expected = f"version {FORMAT_VERSION + 1}.*version {FORMAT_VERSION}"
        with pytest.raises(CheckpointError, match=expected):
            load_checkpoint(path)

    def test_foreign_safetensors_file(self, tmp_path):
        path = tmp_path / "foreign.safetensors"
        path.write_bytes(save_tensors({"w": torch.zeros(2)}))
        with pytest.raises(CheckpointError, match="metadata"):
            load_checkpoint(path)

    def test_non_finite_metadata_rejected(self):
        self.checkpoint.history.append({"step": 3, "loss": float("nan")})
        with pytest.raises(CheckpointError, match="serialize"):
            serialize_checkpoint(self.checkpoint)

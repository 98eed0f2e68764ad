"""
Checkpoint container

One safetensors file per checkpoint: model parameters under ``model.``,
optimizer tensors under ``optim.``, everything else in a single sorted-key JSON
metadata entry carrying the format version and a sha256 digest of the tensors.
Writes go to a temporary file that is renamed into place.
"""
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import torch
from safetensors.torch import load as load_tensors
from safetensors.torch import save as save_tensors

from src.utils import get_logger
from src.utils.exceptions import CheckpointError

logger = get_logger(__name__)

FORMAT_VERSION = 1
METADATA_KEY = "tbgdiff"
MODEL_PREFIX = "model."
OPTIM_PREFIX = "optim."


@dataclass
class Checkpoint:
    parameters: Dict[str, torch.Tensor]
    optimizer_state: Optional[Dict[str, Any]] = None
    epoch: int = 0
    step: int = 0
    config: Dict[str, Any] = field(default_factory=dict)
    history: List[Dict[str, Any]] = field(default_factory=list)


def _dumps(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)


def tensor_digest(tensors: Dict[str, torch.Tensor]) -> str:
    digest = hashlib.sha256()
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(str(tensor.dtype).encode("utf-8"))
        digest.update(str(tuple(tensor.shape)).encode("utf-8"))
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def _flatten_optimizer(
    state: Optional[Dict[str, Any]]
) -> Tuple[Dict[str, torch.Tensor], Optional[Dict[str, Any]]]:
    """Split an optimizer state_dict into tensors and JSON-able metadata"""
    if state is None:
        return {}, None
    tensors: Dict[str, torch.Tensor] = {}
    scalars: Dict[str, Dict[str, Any]] = {}
    for index, param_state in state["state"].items():
        for key, value in param_state.items():
            if isinstance(value, torch.Tensor):
                tensors[f"{OPTIM_PREFIX}state.{index}.{key}"] = value
            else:
                scalars.setdefault(str(index), {})[key] = value
    return tensors, {"param_groups": state["param_groups"], "scalars": scalars}


def _unflatten_optimizer(
    tensors: Dict[str, torch.Tensor], meta: Optional[Dict[str, Any]]
) -> Optional[Dict[str, Any]]:
    if meta is None:
        return None
    state: Dict[int, Dict[str, Any]] = {}
    for name, tensor in tensors.items():
        index, key = name[len(OPTIM_PREFIX) + len("state."):].split(".", 1)
        state.setdefault(int(index), {})[key] = tensor
    for index, values in meta["scalars"].items():
        state.setdefault(int(index), {}).update(values)
    return {"state": dict(sorted(state.items())), "param_groups": meta["param_groups"]}


def serialize_checkpoint(checkpoint: Checkpoint) -> bytes:
    tensors = {
        f"{MODEL_PREFIX}{name}": value.detach().cpu().contiguous().clone()
        for name, value in checkpoint.parameters.items()
    }
    optim_tensors, optim_meta = _flatten_optimizer(checkpoint.optimizer_state)
    tensors.update(
        {name: value.detach().cpu().contiguous().clone() for name, value in optim_tensors.items()}
    )
    metadata = {
        "format_version": FORMAT_VERSION,
        "epoch": checkpoint.epoch,
        "step": checkpoint.step,
        "config": checkpoint.config,
        "history": checkpoint.history,
        "optimizer": optim_meta,
        "digest": tensor_digest(tensors),
    }
    try:
        return save_tensors(tensors, metadata={METADATA_KEY: _dumps(metadata)})
    except (TypeError, ValueError) as e:
        logger.error(f"Checkpoint serialization failed: {str(e)}")
        raise CheckpointError(f"Cannot serialize checkpoint: {str(e)}") from e


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """
    Atomically write a checkpoint

    Args:
        checkpoint: Checkpoint to write
        path: Destination ``.safetensors`` file

    Returns:
        The written path
    """
    path = Path(path)
    payload = serialize_checkpoint(checkpoint)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_name(path.name + ".tmp")
    try:
        with open(temp_path, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(temp_path, path)
    except OSError as e:
        logger.error(f"Failed to write checkpoint {path}: {str(e)}")
        raise CheckpointError(f"Failed to write checkpoint {path}: {str(e)}") from e
    logger.debug(f"Checkpoint saved: {path} (step {checkpoint.step})")
    return path


def _read_metadata(payload: bytes, path: Path) -> Dict[str, Any]:
    if len(payload) < 8:
        raise CheckpointError(f"Checkpoint {path} is truncated")
    (header_size,) = struct.unpack("<Q", payload[:8])
    if 8 + header_size > len(payload):
        raise CheckpointError(f"Checkpoint {path} is truncated")
    try:
        header = json.loads(payload[8 : 8 + header_size])
        return json.loads(header["__metadata__"][METADATA_KEY])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"Checkpoint {path} has no readable metadata") from e


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read and verify a checkpoint

    Raises:
        CheckpointError: If the file is missing, truncated or corrupt, or was
            written by another format version
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    payload = path.read_bytes()
    metadata = _read_metadata(payload, path)

    version = metadata.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint {path} has format version {version}; "
            f"this build reads version {FORMAT_VERSION}"
        )

    try:
        tensors = load_tensors(payload)
    except Exception as e:
        logger.error(f"Cannot decode checkpoint tensors in {path}: {str(e)}")
        raise CheckpointError(f"Checkpoint {path} is corrupt: {str(e)}") from e
    if tensor_digest(tensors) != metadata.get("digest"):
        raise CheckpointError(f"Checkpoint {path} failed its integrity check")

    parameters = {
        name[len(MODEL_PREFIX):]: tensor
        for name, tensor in sorted(tensors.items())
        if name.startswith(MODEL_PREFIX)
    }
    optim_tensors = {
        name: tensor for name, tensor in tensors.items() if name.startswith(OPTIM_PREFIX)
    }
    return Checkpoint(
        parameters=parameters,
        optimizer_state=_unflatten_optimizer(optim_tensors, metadata.get("optimizer")),
        epoch=int(metadata["epoch"]),
        step=int(metadata["step"]),
        config=metadata["config"],
        history=metadata["history"],
    )

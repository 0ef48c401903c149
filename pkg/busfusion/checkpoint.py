# -*- coding: utf-8 -*-
"""Self-describing checkpoint files.

Layout of a ``.ckpt`` file::

    8 bytes   magic  b"BUSFCKPT"
    4 bytes   format version, little-endian uint32
    8 bytes   header length, little-endian uint64
    header    UTF-8 JSON with sorted keys, holding the configurations,
              seed, epoch, history and a table of tensors
              (name, dtype, shape, offset, nbytes)
    payload   raw little-endian tensor bytes in table order

Saving the bundle returned by :func:`load_checkpoint` reproduces the
original file byte for byte.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from busfusion.exceptions import CheckpointError

__all__ = [
    "FORMAT_VERSION",
    "MAGIC",
    "CheckpointBundle",
    "load_checkpoint",
    "save_checkpoint",
]

MAGIC = b"BUSFCKPT"
FORMAT_VERSION = 1

_PREAMBLE = struct.Struct("<8sIQ")

_TORCH_DTYPES = {
    "float64": torch.float64,
    "float32": torch.float32,
    "float16": torch.float16,
    "bfloat16": torch.bfloat16,
    "int64": torch.int64,
    "int32": torch.int32,
    "int16": torch.int16,
    "uint8": torch.uint8,
    "int8": torch.int8,
    "bool": torch.bool,
}
_NUMPY_DTYPES = {
    "float64": "<f8",
    "float32": "<f4",
    "float16": "<f2",
    "bfloat16": "<i2",  # stored as raw 16-bit words
    "int64": "<i8",
    "int32": "<i4",
    "int16": "<i2",
    "uint8": "|u1",
    "int8": "|i1",
    "bool": "|b1",
}


@dataclass
class CheckpointBundle:
    """Parameters of a trained model and how they were obtained.

    :ivar state: Parameter and buffer name to tensor.
    :ivar model_config: :class:`~busfusion.model.ModelConfig` as a dict.
    :ivar train_config: :class:`~busfusion.training.TrainConfig` as a dict.
    :ivar seed: Seed of the run.
    :ivar epoch: Epoch the parameters come from.
    :ivar history: Per-epoch history records.
    :ivar metadata: Free-form JSON-serializable values.
    """

    state: "OrderedDict[str, torch.Tensor]"
    model_config: Dict[str, Any]
    train_config: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    epoch: int = 0
    history: List[dict] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model, model_config, **kwargs) -> "CheckpointBundle":
        state = OrderedDict(
            (name, tensor.detach().cpu().clone()) for name, tensor in model.state_dict().items()
        )
        return cls(state=state, model_config=dict(model_config), **kwargs)

    def build_model(self):
        """Instantiate the network and load the stored parameters."""
        from busfusion.model import ModelConfig, build_model

        model = build_model(ModelConfig.from_dict(self.model_config))
        try:
            model.load_state_dict(self.state)
        except RuntimeError as err:
            raise CheckpointError(f"Parameters don't match the stored configuration: {err}")
        return model


def _dtype_name(tensor: torch.Tensor) -> str:
    name = str(tensor.dtype).replace("torch.", "")
    if name not in _TORCH_DTYPES:
        raise CheckpointError(f"Unsupported tensor dtype {tensor.dtype}")
    return name


def _to_bytes(tensor: torch.Tensor, dtype: str) -> bytes:
    tensor = tensor.detach().cpu().contiguous()
    if dtype == "bfloat16":
        tensor = tensor.view(torch.int16)
    array = tensor.numpy()
    return array.astype(np.dtype(_NUMPY_DTYPES[dtype]), copy=False).tobytes()


def save_checkpoint(bundle: CheckpointBundle, path) -> None:
    """Write a bundle to ``path``.

    :param bundle: The checkpoint to save.
    :param path: Destination file.
    """
    table, chunks, offset = [], [], 0
    for name, tensor in bundle.state.items():
        dtype = _dtype_name(tensor)
        data = _to_bytes(tensor, dtype)
        table.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        chunks.append(data)
        offset += len(data)
    header = {
        "epoch": int(bundle.epoch),
        "history": bundle.history,
        "metadata": bundle.metadata,
        "model_config": bundle.model_config,
        "seed": int(bundle.seed),
        "tensors": table,
        "train_config": bundle.train_config,
    }
    try:
        encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf8")
    except (TypeError, ValueError) as err:
        raise CheckpointError(f"Checkpoint header isn't serializable: {err}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode="wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, bundle.format_version, len(encoded)))
        f.write(encoded)
        for data in chunks:
            f.write(data)


def load_checkpoint(path, expected_version: Optional[int] = FORMAT_VERSION) -> CheckpointBundle:
    """Read a checkpoint file.

    :param path: The ``.ckpt`` file.
    :param expected_version: Format version to accept, ``None`` accepts any.
    :raises CheckpointError: on a truncated or corrupted file or a version
                             mismatch.
    :rtype: CheckpointBundle
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"Cannot read checkpoint {path}: {err}")
    if len(raw) < _PREAMBLE.size:
        raise CheckpointError(f"Truncated checkpoint {path}")
    magic, version, header_len = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a busfusion checkpoint")
    if expected_version is not None and version != expected_version:
        raise CheckpointError(
            f"Checkpoint format version {version}, expected {expected_version}"
        )
    start = _PREAMBLE.size + header_len
    if start > len(raw):
        raise CheckpointError(f"Truncated checkpoint header in {path}")
    try:
        header = json.loads(raw[_PREAMBLE.size : start].decode("utf8"))
    except (UnicodeDecodeError, ValueError) as err:
        raise CheckpointError(f"Corrupted checkpoint header in {path}: {err}")
    payload = memoryview(raw)[start:]
    state = OrderedDict()
    expected_size = 0
    for entry in header.get("tensors", []):
        dtype = entry["dtype"]
        if dtype not in _TORCH_DTYPES:
            raise CheckpointError(f"Unknown tensor dtype {dtype} in {path}")
        begin, nbytes = entry["offset"], entry["nbytes"]
        if begin + nbytes > len(payload):
            raise CheckpointError(f"Truncated tensor {entry['name']} in {path}")
        array = np.frombuffer(payload[begin : begin + nbytes], dtype=np.dtype(_NUMPY_DTYPES[dtype]))
        tensor = torch.from_numpy(array.reshape(entry["shape"]).copy())
        if dtype == "bfloat16":
            tensor = tensor.view(torch.bfloat16)
        state[entry["name"]] = tensor
        expected_size = max(expected_size, begin + nbytes)
    if expected_size != len(payload):
        raise CheckpointError(f"Unexpected trailing bytes in {path}")
    return CheckpointBundle(
        state=state,
        model_config=header["model_config"],
        train_config=header.get("train_config", {}),
        seed=header.get("seed", 0),
        epoch=header.get("epoch", 0),
        history=header.get("history", []),
        metadata=header.get("metadata", {}),
        format_version=version,
    )

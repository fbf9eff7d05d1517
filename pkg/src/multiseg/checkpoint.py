"""Checkpoint file format.

One file: an 8-byte magic, a little-endian uint64 header length, a JSON
header (model config, epoch, free-form metadata incl. RNG state, and the
tensor index), then the named tensors as raw little-endian float32 in
index order.  Round-trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, MultiTaskSegModel

MAGIC = b"MSEGCKP1"
TENSOR_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: ModelConfig
    epoch: int
    meta: dict
    tensors: dict[str, np.ndarray]


def save_checkpoint(
    path: str | Path,
    config: ModelConfig,
    epoch: int,
    tensors: dict[str, torch.Tensor | np.ndarray],
    meta: dict | None = None,
) -> None:
    arrays = {}
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arrays[name] = np.ascontiguousarray(arr, dtype=TENSOR_DTYPE)
    header = {
        "format_version": 1,
        "config": dataclasses.asdict(config),
        "epoch": int(epoch),
        "meta": meta or {},
        "tensors": [
            {"name": name, "shape": list(arr.shape)} for name, arr in arrays.items()
        ],
    }
    blob = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for arr in arrays.values():
            f.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a multiseg checkpoint")
    (header_len,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(raw[start : start + header_len].decode("utf-8"))
    offset = start + header_len

    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * TENSOR_DTYPE.itemsize if shape else TENSOR_DTYPE.itemsize
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"checkpoint payload truncated at tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype=TENSOR_DTYPE).reshape(shape).copy()
        offset += nbytes

    return Checkpoint(
        config=ModelConfig(**header["config"]),
        epoch=int(header["epoch"]),
        meta=header["meta"],
        tensors=tensors,
    )


def model_tensors(model: MultiTaskSegModel) -> dict[str, torch.Tensor]:
    return {name: p for name, p in model.named_parameters()}


def load_model_tensors(model: MultiTaskSegModel, tensors: dict[str, np.ndarray]) -> None:
    state = {
        name: torch.from_numpy(arr)
        for name, arr in tensors.items()
        if not name.startswith("opt.")
    }
    model.load_state_dict(state, strict=True)

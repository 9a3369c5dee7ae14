"""Self-describing binary checkpoints.

One container format serves the chord model and the expressive
regressors: a magic string, a format version, a JSON header describing
the stored config and every tensor (name, dtype, shape, offset), then
the raw little-endian tensor bytes. Writing the result of a load
reproduces the original file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .model import AMT, ModelConfig
from .postprocess import ExpressiveRegressor, RegressorConfig

MAGIC = b"V2MC"
FORMAT_VERSION = 1

KIND_MODEL = "amt"
KIND_REGRESSOR = "regressor"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    meta: dict


def save_checkpoint(path, kind: str, config: dict, tensors: dict,
                    meta: dict | None = None) -> None:
    """Write a checkpoint; tensor bytes land in name order.

    `meta` holds free-form training state (epoch counters and the like)
    that travels with the file without being part of the module config.
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        shape = list(arr.shape)  # before ascontiguousarray, which lifts 0-d to (1,)
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": shape,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "kind": kind, "config": config,
         "meta": meta or {}, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        handle.write(header)
        for raw in blobs:
            handle.write(raw)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as handle:
        data = handle.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(data[16: 16 + header_len].decode("utf-8"))
    base = 16 + header_len
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        raw = data[start: start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: tensor {entry['name']!r} is truncated")
        tensors[entry["name"]] = np.frombuffer(
            raw, dtype=np.dtype(entry["dtype"])
        ).reshape(entry["shape"]).copy()
    return Checkpoint(kind=header["kind"], config=header["config"],
                      tensors=tensors, meta=header.get("meta", {}))


def _state_tensors(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: value.detach().cpu().numpy()
            for name, value in module.state_dict().items()}


def _load_state(module: torch.nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = {name: torch.from_numpy(np.asarray(arr)) for name, arr in tensors.items()}
    module.load_state_dict(state)


def save_model(path, model: AMT, meta: dict | None = None) -> None:
    save_checkpoint(path, KIND_MODEL, model.config.to_dict(), _state_tensors(model), meta)


def load_model(path) -> tuple[AMT, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != KIND_MODEL:
        raise CheckpointError(f"{path}: expected a chord model checkpoint, found {ckpt.kind!r}")
    model = AMT(ModelConfig(**ckpt.config))
    _load_state(model, ckpt.tensors)
    return model, ckpt.meta


def save_regressor(path, model: ExpressiveRegressor, meta: dict | None = None) -> None:
    save_checkpoint(path, KIND_REGRESSOR, model.config.to_dict(),
                    _state_tensors(model), meta)


def load_regressor(path) -> tuple[ExpressiveRegressor, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.kind != KIND_REGRESSOR:
        raise CheckpointError(f"{path}: expected a regressor checkpoint, found {ckpt.kind!r}")
    model = ExpressiveRegressor(RegressorConfig(**ckpt.config))
    _load_state(model, ckpt.tensors)
    return model, ckpt.meta

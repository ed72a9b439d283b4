"""Single-file checkpoint container.

Layout (all integers little-endian)::

    b"SLFC"                 magic
    u32 version             currently 1
    u32 header_bytes        length of the JSON header that follows
    header (UTF-8 JSON)     {"config": {...}, "step": int,
                             "entries": [{"name", "shape", "dtype"}, ...]}
    payloads                one float32 little-endian row-major block per
                            entry, in header order, no padding

Every tensor is stored as float32 whatever its in-memory dtype; ``dtype``
records the original type (``float32``, ``int64`` or ``bool``) for restoring.
Model tensors are named ``model.<state_dict key>``; optimizer state is
``optim.<param index>.<key>``.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from slf.errors import ConfigurationError

CHECKPOINT_MAGIC = b"SLFC"
CHECKPOINT_VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64, "bool": torch.bool}


def _flatten(model: torch.nn.Module, optimizer: Optional[torch.optim.Optimizer]) -> Dict[str, torch.Tensor]:
    tensors = {f"model.{k}": v.detach() for k, v in model.state_dict().items()}
    if optimizer is not None:
        for idx, state in optimizer.state_dict()["state"].items():
            for key, value in state.items():
                tensors[f"optim.{idx}.{key}"] = torch.as_tensor(value).detach()
    return tensors


def save_checkpoint(path, model, optimizer, config: dict, step: int) -> Path:
    """Atomically write a checkpoint (temp file + rename)."""
    path = Path(path)
    tensors = _flatten(model, optimizer)
    entries = []
    blobs = []
    for name, t in tensors.items():
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise ConfigurationError(f"cannot checkpoint tensor {name} of dtype {dtype}")
        entries.append({"name": name, "shape": list(t.shape), "dtype": dtype})
        blobs.append(np.ascontiguousarray(t.cpu().to(torch.float32).numpy(), dtype="<f4").tobytes())
    header = json.dumps({"config": config, "step": int(step), "entries": entries}).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> Tuple[dict, int, Dict[str, torch.Tensor]]:
    """Returns (config dict, step, named tensors)."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    offset = 12 + header_len
    tensors = {}
    for entry in header["entries"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        t = torch.from_numpy(data.copy()).reshape(entry["shape"])
        tensors[entry["name"]] = t.to(_DTYPES[entry["dtype"]])
    if offset != len(blob):
        raise ConfigurationError(f"{path}: trailing or missing payload bytes")
    return header["config"], header["step"], tensors


def load_into(model, optimizer, tensors: Dict[str, torch.Tensor]) -> None:
    model_state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    expected = set(model.state_dict())
    if set(model_state) != expected:
        missing = sorted(expected - set(model_state))
        extra = sorted(set(model_state) - expected)
        raise ConfigurationError(f"checkpoint/model mismatch: missing={missing[:5]} extra={extra[:5]}")
    own = model.state_dict()
    for k, v in model_state.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise ConfigurationError(f"checkpoint/model mismatch for {k}: {tuple(v.shape)} vs {tuple(own[k].shape)}")
    model.load_state_dict({k: v.to(own[k].dtype) for k, v in model_state.items()})
    if optimizer is None:
        return
    state = {}
    for k, v in tensors.items():
        if not k.startswith("optim."):
            continue
        _, idx, key = k.split(".", 2)
        state.setdefault(int(idx), {})[key] = v
    sd = optimizer.state_dict()
    sd["state"] = state
    optimizer.load_state_dict(sd)

"""Parameter checkpoints: one raw binary blob plus a JSON shape manifest.

The blob is the concatenation of every tensor's little-endian float64 values
in manifest order; the manifest (written next to the blob as `<name>.json`)
records tensor names, shapes, offsets, and whether each entry is a trainable
parameter or a buffer.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import DataError, ShapeError

CKPT_FORMAT = "adaptsense.ckpt.v1"


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_checkpoint(path: str | Path, module: nn.Module, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = dict(module.named_parameters())
    tensors = dict(module.state_dict())
    entries = []
    offset = 0
    blob_parts = []
    for name, tensor in tensors.items():
        arr = tensor.detach().numpy().astype("<f8")
        blob_parts.append(arr.tobytes())
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "offset": offset,
            "kind": "param" if name in params else "buffer",
        })
        offset += arr.size
    path.write_bytes(b"".join(blob_parts))
    manifest = {"format": CKPT_FORMAT, "tensors": entries, "meta": meta or {}}
    _manifest_path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest_file = _manifest_path(path)
    if not path.exists() or not manifest_file.exists():
        raise DataError(f"checkpoint {path} or its manifest is missing")
    manifest = json.loads(manifest_file.read_text())
    if manifest.get("format") != CKPT_FORMAT:
        raise DataError(f"unsupported checkpoint format {manifest.get('format')!r}")
    blob = np.frombuffer(path.read_bytes(), dtype="<f8")
    tensors = {}
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = blob[entry["offset"]:entry["offset"] + size]
        if chunk.size != size:
            raise DataError(f"checkpoint blob too short for tensor {entry['name']}")
        tensors[entry["name"]] = chunk.reshape(entry["shape"]).copy()
    return tensors, manifest.get("meta", {})


def load_into(module: nn.Module, path: str | Path) -> dict:
    tensors, meta = load_checkpoint(path)
    state = module.state_dict()
    if set(state) != set(tensors):
        missing = set(state) ^ set(tensors)
        raise ShapeError(f"checkpoint tensors do not match the module: {sorted(missing)}")
    with torch.no_grad():
        for name, arr in tensors.items():
            target = state[name]
            if tuple(target.shape) != tuple(arr.shape):
                raise ShapeError(
                    f"tensor {name}: expected shape {tuple(target.shape)}, got {arr.shape}")
            target.copy_(torch.as_tensor(arr, dtype=target.dtype))
    return meta


def parameter_checksum(module: nn.Module) -> float:
    """Cheap content fingerprint used by stage-isolation checks."""
    total = 0.0
    for name, tensor in sorted(module.state_dict().items()):
        arr = tensor.detach().numpy().astype(np.float64)
        total += float(np.sum(arr * np.cos(np.arange(arr.size).reshape(arr.shape) + len(name))))
    return total

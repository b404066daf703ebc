"""Checkpoint container: ``manifest.json`` plus a raw little-endian tensor payload.

Layout of a checkpoint directory::

    manifest.json   {"format_version", "created_by", "config", "step", "extra",
                     "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...],
                     "optimizers": {name: {"param_groups": [...]}}}
    tensors.bin     concatenated C-order tensor bytes, little-endian

Replay buffer contents are never stored; only its cursor/count and RNG states
travel in ``extra``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import numpy as np
import torch

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PAYLOAD = "tensors.bin"

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.uint8: "|u1",
}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


def flatten_optimizer(name: str, opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    sd = opt.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            tensors[f"{name}/state/{idx}/{key}"] = torch.as_tensor(value)
    return tensors, {"param_groups": sd["param_groups"]}


def unflatten_optimizer(name: str, tensors: dict[str, torch.Tensor], meta: dict) -> dict:
    state: dict[int, dict[str, torch.Tensor]] = {}
    prefix = f"{name}/state/"
    for full, value in tensors.items():
        if not full.startswith(prefix):
            continue
        idx, key = full[len(prefix):].split("/", 1)
        state.setdefault(int(idx), {})[key] = value
    return {"state": state, "param_groups": meta["param_groups"]}


def save(path: str | Path, tensors: dict[str, torch.Tensor], *, config: dict, step: int,
         optimizers: dict | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    tmp_payload = path / (PAYLOAD + ".tmp")
    with open(tmp_payload, "wb") as fh:
        for name, tensor in tensors.items():
            t = tensor.detach().cpu().contiguous()
            if t.dtype not in _DTYPES:
                raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
            arr = t.numpy().astype(_DTYPES[t.dtype], copy=False)
            raw = arr.tobytes(order="C")
            fh.write(raw)
            entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "created_by": "mibrl",
        "config": config,
        "step": int(step),
        "tensors": entries,
        "optimizers": optimizers or {},
        "extra": extra or {},
    }
    tmp_manifest = path / (MANIFEST + ".tmp")
    tmp_manifest.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp_payload, path / PAYLOAD)
    os.replace(tmp_manifest, path / MANIFEST)
    return path


def read_manifest(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != supported {FORMAT_VERSION}")
    return manifest


def load(path: str | Path) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / PAYLOAD).read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        if e["offset"] + e["nbytes"] > len(blob):
            raise CheckpointError(f"payload truncated at tensor {e['name']}")
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return manifest, tensors

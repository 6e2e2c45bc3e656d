"""Checkpoint files: a JSON manifest next to one little-endian float32 blob.

``<stem>.json`` holds ``{"tensors": [{name, shape, dtype, byte_offset}], "meta": {...}}``
and ``<stem>.bin`` the concatenated raw data.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def save_tensors(path, tensors: dict, meta: dict | None = None) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(stem.with_suffix(".bin"), "wb") as f:
        for name, t in tensors.items():
            arr = np.ascontiguousarray(torch.as_tensor(t).detach().cpu().numpy(), dtype="<f4")
            f.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                            "byte_offset": offset})
            offset += arr.nbytes
    manifest = {"tensors": entries, "meta": meta or {}}
    with open(stem.with_suffix(".json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return stem


def load_tensors(path):
    """Return ``(tensors, meta)``."""
    stem = _stem(path)
    with open(stem.with_suffix(".json")) as f:
        manifest = json.load(f)
    blob = stem.with_suffix(".bin").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=e["byte_offset"])
        out[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return out, manifest["meta"]


def module_checksum(module: torch.nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()

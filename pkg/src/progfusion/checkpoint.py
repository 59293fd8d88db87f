"""Flat-catalog parameter checkpoints: JSON manifest + raw little-endian blob.

The manifest records name, shape, dtype, and byte offset for every tensor;
the blob is their concatenated raw bytes. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import FormatError
from .tensor import Tensor

_DTYPE_CODES = {np.dtype(np.float32): "f32le", np.dtype(np.float64): "f64le"}
_CODE_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}
FORMAT_VERSION = 1


def _paths(path: str) -> tuple[str, str]:
    base = path
    for suffix in (".ckpt.json", ".ckpt.bin"):
        if base.endswith(suffix):
            base = base[: -len(suffix)]
    return base + ".ckpt.json", base + ".ckpt.bin"


def save_checkpoint(path: str, tensors: dict[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    manifest_path, blob_path = _paths(path)
    entries = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"checkpoint tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": code,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {"version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}
    os.makedirs(os.path.dirname(manifest_path) or ".", exist_ok=True)
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(blob_path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, blob_path = _paths(path)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{manifest_path}: unsupported checkpoint version {manifest.get('version')!r}")
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    expected = sum(e["nbytes"] for e in manifest["tensors"])
    if len(blob) != expected:
        raise FormatError(f"{blob_path}: expected {expected} blob bytes, found {len(blob)}")
    tensors: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        dtype = _CODE_DTYPES.get(e["dtype"])
        if dtype is None:
            raise FormatError(f"{manifest_path}: unknown dtype code {e['dtype']!r} for {e['name']!r}")
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise FormatError(f"{blob_path}: truncated tensor {e['name']!r}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="), copy=True)
        tensors[e["name"]] = arr
    return tensors, manifest.get("meta", {})


def restore_into(named_params: dict[str, Tensor], stored: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy stored arrays into existing parameter tensors (shape-checked)."""
    for name, param in named_params.items():
        key = prefix + name
        if key not in stored:
            raise FormatError(f"checkpoint is missing tensor {key!r}")
        arr = stored[key]
        if tuple(arr.shape) != param.shape:
            raise FormatError(f"checkpoint tensor {key!r} has shape {arr.shape}, wanted {param.shape}")
        param.data = arr.astype(param.data.dtype, copy=True)

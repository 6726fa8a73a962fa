"""JSON manifest + raw little-endian float64 blob storage.

Used for both the environment cache and model checkpoints.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from causalfed.errors import FormatError


def write_tensors(directory: str | Path, fmt: str, tensors: dict[str, np.ndarray], meta: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, arr) in enumerate(tensors.items()):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        fname = f"{i:04d}.f64"
        (directory / fname).write_bytes(arr.tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {"format": fmt, **meta, "tensors": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_tensors(directory: str | Path, fmt: str) -> tuple[dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != fmt:
        raise FormatError(f"expected format {fmt!r}, found {manifest.get('format')!r}")
    tensors = {}
    for entry in manifest["tensors"]:
        raw = (directory / entry["file"]).read_bytes()
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * 8
        if len(raw) != expected:
            raise FormatError(f"blob {entry['file']} holds {len(raw)} bytes, expected {expected}", offset=len(raw))
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return manifest, tensors

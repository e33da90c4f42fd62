"""Parameter checkpoints: a JSON manifest beside a raw little-endian float64 blob.

``<stem>.json`` holds ``{"meta": {...}, "blob": "<stem>.bin", "tensors":
{name: {"shape": [...], "dtype": "f64", "offset": bytes}}}``. Round trips are
bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "mixgame-checkpoint-1"


class CheckpointError(ValueError):
    pass


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def save(path, params: dict, meta: dict | None = None) -> Path:
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    offset = 0
    with open(blob_path, "wb") as fh:
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            fh.write(arr.tobytes())
            tensors[name] = {"shape": list(arr.shape), "dtype": "f64", "offset": offset}
            offset += arr.nbytes
    manifest = {"format": FORMAT, "meta": meta or {}, "blob": blob_path.name,
                "tensors": tensors}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path


def load(path) -> tuple[dict, dict]:
    """Returns ``(params, meta)``."""
    manifest_path, _ = _paths(path)
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unrecognized checkpoint format in {manifest_path}")
    raw = (manifest_path.parent / manifest["blob"]).read_bytes()
    params = {}
    for name, info in manifest["tensors"].items():
        if info["dtype"] != "f64":
            raise CheckpointError(f"unsupported dtype {info['dtype']!r} for {name}")
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        if info["offset"] + 8 * count > len(raw):
            raise CheckpointError(f"truncated checkpoint blob for {name}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=info["offset"])
        params[name] = arr.reshape(info["shape"]).astype(np.float64)
    return params, manifest["meta"]

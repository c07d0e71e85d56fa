"""DKT1 tensor container files and checkpoint directories.

File layout: 4-byte magic ``DKT1``, u32 little-endian rank, rank u32 dims,
then the float32 payload in row-major order, little-endian.

A checkpoint is a directory of DKT1 files plus ``manifest.json`` mapping
parameter names to file names; the manifest also carries free-form metadata
(model config, hashes).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"DKT1"


def write_dkt(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4", copy=False).tobytes())


def read_dkt(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (rank,) = struct.unpack("<I", fh.read(4))
        if rank > 32:
            raise ValidationError(f"{path}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise ValidationError(f"{path}: truncated payload")
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return arr.reshape(dims)


def save_checkpoint(directory: str | Path, params: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mapping = {}
    for name in sorted(params):
        fname = name.replace("/", "__") + ".dkt"
        write_dkt(directory / fname, params[name])
        mapping[name] = fname
    manifest = {"format": "dkt-checkpoint-v1", "params": mapping}
    if meta:
        manifest["meta"] = meta
    write_json(directory / "manifest.json", manifest)


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ValidationError(f"{directory}: not a checkpoint (no manifest.json)")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != "dkt-checkpoint-v1":
        raise ValidationError(f"{directory}: unknown checkpoint format")
    params = {name: read_dkt(directory / fname)
              for name, fname in manifest["params"].items()}
    return params, manifest.get("meta", {})


def params_hash(params: dict[str, np.ndarray]) -> str:
    """Stable content hash over named float32 parameters."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float32)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def write_json(path: str | Path, payload: dict) -> None:
    """Canonical JSON emission so identical payloads are byte-identical."""
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

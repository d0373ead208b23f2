"""Versioned binary checkpoint container.

Layout: magic, format version, a JSON header (model spec fields, kind-specific
extras, and the tensor directory), then the raw tensors as little-endian
float32 in the directory's declared order. A human-readable JSON sidecar with
the same metadata is written next to every checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .models import ModelSpec

MAGIC = b"ASPC"
FORMAT_VERSION = 1


def _header_dict(spec: ModelSpec, extras: dict, directory: list) -> dict:
    return {
        "model_spec": asdict(spec),
        "extras": extras,
        "tensors": directory,
    }


def save_checkpoint(path: str | Path, spec: ModelSpec, tensors: dict[str, np.ndarray],
                    extras: dict | None = None, sidecar: dict | None = None) -> Path:
    """Write tensors (declared order = dict order) plus a sidecar record."""
    path = Path(path)
    extras = dict(extras or {})
    directory = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    header = json.dumps(_header_dict(spec, extras, directory), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for value in tensors.values():
            fh.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    meta = {
        "format_version": FORMAT_VERSION,
        "model_spec": asdict(spec),
        "extras": extras,
        "sha256": file_checksum(path),
    }
    meta.update(sidecar or {})
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                  encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelSpec, dict[str, np.ndarray], dict]:
    """Returns (spec, tensors as float64 in declared order, extras)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    spec = ModelSpec(**header["model_spec"])
    tensors: dict[str, np.ndarray] = {}
    offset = 12 + header_len
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        raw = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        tensors[entry["name"]] = raw.astype(np.float64).reshape(entry["shape"])
    if offset != len(blob):
        raise CheckpointError(f"trailing bytes in {path}")
    return spec, tensors, header["extras"]


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

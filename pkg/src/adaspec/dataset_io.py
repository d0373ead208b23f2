"""On-disk format for labeled draft datasets.

Binary container (magic, version, JSON header, then per-step arrays with
hidden states as little-endian float32) plus a human-readable manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .labeling import LabeledDraftStep

MAGIC = b"ASPD"
FORMAT_VERSION = 1


@dataclass
class LabeledDataset:
    prompts: list[list[int]]
    responses: list[list[int]]
    steps: list[list[LabeledDraftStep]]   # per prompt
    gamma_train: int
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def total_positions(self) -> int:
        return sum(len(s.tokens) for group in self.steps for s in group)


def save_dataset(path: str | Path, ds: LabeledDataset) -> Path:
    path = Path(path)
    header = {
        "gamma_train": ds.gamma_train,
        "seed": ds.seed,
        "num_prompts": len(ds.prompts),
        "meta": ds.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for prompt, response, steps in zip(ds.prompts, ds.responses, ds.steps):
            _write_ints(fh, prompt)
            _write_ints(fh, response)
            fh.write(struct.pack("<I", len(steps)))
            for step in steps:
                fh.write(struct.pack("<II", step.prefix_len, len(step.tokens)))
                _write_ints(fh, step.tokens)
                fh.write(np.asarray(step.labels, dtype="<i1").tobytes())
                hid = np.ascontiguousarray(step.hiddens, dtype="<f4")
                fh.write(struct.pack("<I", hid.shape[1]))
                fh.write(hid.tobytes())
    manifest = dict(header)
    manifest["total_positions"] = ds.total_positions
    manifest["total_steps"] = sum(len(g) for g in ds.steps)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                   encoding="utf-8")
    return path


def load_dataset(path: str | Path) -> LabeledDataset:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"dataset not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported dataset version {version}")
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    offset = 12 + header_len
    prompts, responses, all_steps = [], [], []
    for _ in range(header["num_prompts"]):
        prompt, offset = _read_ints(blob, offset)
        response, offset = _read_ints(blob, offset)
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        steps = []
        for _ in range(count):
            prefix_len, g = struct.unpack_from("<II", blob, offset)
            offset += 8
            tokens, offset = _read_ints(blob, offset, g)
            labels = np.frombuffer(blob, dtype="<i1", count=g, offset=offset).copy()
            offset += g
            (dim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            hid = np.frombuffer(blob, dtype="<f4", count=g * dim, offset=offset)
            offset += 4 * g * dim
            steps.append(LabeledDraftStep(prefix_len=prefix_len, tokens=tokens,
                                          labels=labels,
                                          hiddens=hid.astype(np.float64).reshape(g, dim)))
        prompts.append(prompt)
        responses.append(response)
        all_steps.append(steps)
    if offset != len(blob):
        raise CheckpointError(f"trailing bytes in {path}")
    return LabeledDataset(prompts=prompts, responses=responses, steps=all_steps,
                          gamma_train=header["gamma_train"], seed=header["seed"],
                          meta=header.get("meta", {}))


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def _write_ints(fh, values):
    fh.write(struct.pack("<I", len(values)))
    fh.write(np.asarray(values, dtype="<i4").tobytes())


def _read_ints(blob, offset, expected: int | None = None):
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if expected is not None and count != expected:
        raise CheckpointError("dataset record length mismatch")
    values = np.frombuffer(blob, dtype="<i4", count=count, offset=offset)
    offset += 4 * count
    return values.tolist(), offset

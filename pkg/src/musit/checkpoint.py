"""Flat little-endian float32 tensor archive with a JSON header.

``name.bin`` holds the concatenated tensors; ``name.json`` holds
``{"tensors": [{name, shape, dtype, offset}], "meta": {...}}``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch


class CheckpointError(FileNotFoundError):
    pass


def save(stem: str | Path, state: dict[str, torch.Tensor], meta: dict) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().to(torch.float64).numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps({"tensors": entries, "meta": meta}, indent=2, sort_keys=True) + "\n")
    return bin_path, json_path


def load(stem: str | Path, dtype: torch.dtype = torch.float32) -> tuple[dict[str, torch.Tensor], dict]:
    stem = Path(stem)
    bin_path, json_path = stem.with_suffix(".bin"), stem.with_suffix(".json")
    for p in (json_path, bin_path):
        if not p.exists():
            raise CheckpointError(f"missing checkpoint file: {p}")
    header = json.loads(json_path.read_text())
    raw = bin_path.read_bytes()
    state = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(np.float32)).to(dtype)
    return state, header["meta"]


def require(*stems: str | Path) -> None:
    for stem in stems:
        for suffix in (".json", ".bin"):
            p = Path(stem).with_suffix(suffix)
            if not p.exists():
                raise CheckpointError(f"missing checkpoint file: {p}")

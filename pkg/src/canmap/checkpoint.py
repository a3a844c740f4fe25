"""CANMAP01 parameter container shared by harmonizer and predictor checkpoints.

Layout::

    b"CANMAP01" | uint32 LE header length | JSON header | float32 LE blobs

The header carries ``format_version``, ``kind`` and a parameter manifest of
``{name, shape, offset}`` entries (offsets relative to the start of the blob
section), plus whatever model description the caller adds.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CANMAP01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, kind: str, state: dict[str, torch.Tensor], meta: dict) -> None:
    blobs, manifest, offset = [], [], 0
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = dict(meta, format_version=FORMAT_VERSION, kind=kind, parameters=manifest)
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_container(path, kind: str | None = None) -> tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[12:12 + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    body = memoryview(data)[12 + hlen:]
    state = OrderedDict()
    for p in header["parameters"]:
        n = int(np.prod(p["shape"])) if p["shape"] else 1
        start, end = p["offset"], p["offset"] + 4 * n
        if end > len(body):
            raise CheckpointError(f"{path}: truncated parameter blob {p['name']!r}")
        arr = np.frombuffer(body[start:end], dtype="<f4").reshape(p["shape"]).astype(np.float32)
        state[p["name"]] = torch.from_numpy(arr)
    return header, state

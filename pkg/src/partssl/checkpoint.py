"""Self-describing binary checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
raw float64 payload. The header records a format version, arbitrary config
and extra-state dicts, and per-tensor name/shape/offset. Round trips are
bit-exact because payloads are raw ``float64`` bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"PSSLCKPT"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    version: int
    config: dict
    extra: dict
    tensors: dict  # name -> np.ndarray (float64)


def save_checkpoint(path, tensors, config=None, extra=None):
    """Write named float64 arrays plus config/extra metadata."""
    arrays = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in tensors.items()}
    entries = []
    offset = 0
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = json.dumps({
        "version": VERSION,
        "config": config or {},
        "extra": extra or {},
        "tensors": entries,
    }).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(arr.tobytes())
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError("%s: not a checkpoint file (bad magic)" % path)
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != VERSION:
            raise CheckpointError(
                "%s: checkpoint version %s, this build reads version %d"
                % (path, header.get("version"), VERSION))
        payload = fh.read()
    tensors = {}
    for ent in header["tensors"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        arr = np.frombuffer(payload, dtype=np.float64, count=count, offset=start)
        tensors[ent["name"]] = arr.reshape(shape).copy()
    return Checkpoint(
        version=header["version"],
        config=header.get("config", {}),
        extra=header.get("extra", {}),
        tensors=tensors,
    )

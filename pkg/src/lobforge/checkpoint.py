"""Model checkpoints: a flat binary container of named float64 arrays plus
a JSON text manifest alongside.

Binary layout (little endian throughout):

    bytes 0..7    magic b"LOBF0001"
    bytes 8..15   uint64 header length H
    bytes 16..16+H  header JSON (utf-8): {"arrays": [{"name", "shape",
                    "offset", "nbytes"}, ...]}, offsets relative to the
                    first byte after the header
    remainder     raw C-order float64 array data, concatenated

The sidecar `<path>.json` stores the model config, seed, and a reference
to the dataset manifest whose normalization the weights assume.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor
from .errors import DataError

MAGIC = b"LOBF0001"


def save_checkpoint(path: str, params: dict[str, Tensor], meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_arrays(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        data_start = fh.tell()
        out = {}
        for entry in header["arrays"]:
            fh.seek(data_start + entry["offset"])
            raw = fh.read(entry["nbytes"])
            arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
            out[entry["name"]] = arr
    return out


def load_meta(path: str) -> dict:
    with open(path + ".json") as fh:
        return json.load(fh)


def restore_into(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    if set(params) != set(arrays):
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        raise DataError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in params.items():
        if tuple(arrays[name].shape) != p.data.shape:
            raise DataError(f"checkpoint shape mismatch for '{name}'")
        p.data[...] = arrays[name]

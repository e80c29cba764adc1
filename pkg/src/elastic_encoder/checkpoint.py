"""Binary tensor container used for model and training checkpoints.

Layout (little endian)::

    b"ELEN" | u32 version | u64 header_len | header JSON | tensor bytes

The header JSON holds ``config``, free-form ``meta`` and a ``tensors`` index of
``{name, dtype, shape, offset, nbytes}`` with offsets relative to the first
tensor byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"ELEN"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
}
_NAMES = {v[0]: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, torch.Tensor], config: dict, meta: dict | None = None) -> None:
    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        dtype = _NAMES.get(t.dtype)
        if dtype is None:
            raise CheckpointError(f"{name}: unsupported dtype {t.dtype}")
        raw = t.detach().contiguous().numpy().astype(_DTYPES[dtype][1], copy=False).tobytes()
        index.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "meta": meta or {}, "tensors": index}).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict, dict]:
    """Return (tensors, config, meta); raises CheckpointError on any malformed input."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError("checkpoint truncated")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if start > len(data):
        raise CheckpointError("checkpoint truncated")
    try:
        header = json.loads(data[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    tensors = {}
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"checkpoint truncated inside tensor {entry['name']}")
        torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
        arr = np.frombuffer(data, dtype=np_dtype, count=entry["nbytes"] // np.dtype(np_dtype).itemsize, offset=lo)
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np_dtype[1:], copy=True)).reshape(entry["shape"])
    return tensors, header["config"], header["meta"]

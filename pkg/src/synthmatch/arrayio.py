"""Binary container for named numpy arrays.

Used for feature dumps and model checkpoints.  Layout: a magic string, a
little-endian uint32 header length, a JSON header listing name/dtype/shape
/offset per array, then the raw little-endian array bytes concatenated in
header order.  Arrays are stored sorted by name so the same mapping always
produces the same bytes.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

_MAGIC = b"SMAR1\n"


def save_arrays(path, arrays: Mapping[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        src = np.asarray(arrays[name])
        shape = list(src.shape)  # ascontiguousarray promotes 0-d to 1-d
        dt = src.dtype.newbyteorder("<")
        arr = np.ascontiguousarray(src).astype(dt, copy=False)
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dt.str,
                "shape": shape,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not an array container (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    out = {}
    for entry in header["arrays"]:
        start = entry["offset"]
        raw = payload[start : start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        out[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return out

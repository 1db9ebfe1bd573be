"""Binary container: JSON header + named little-endian arrays.

Layout: 8-byte magic ``EITBLOB1``, uint32 header length, UTF-8 JSON
header, then raw array payloads in header order.  The header carries
user metadata plus an ``arrays`` list of ``{name, dtype, shape}``;
dtypes are explicit little-endian codes, so files round-trip bit-exactly
across platforms.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"EITBLOB1"

__all__ = ["write_blob", "read_blob"]


def write_blob(path, meta: dict, arrays: dict):
    header = dict(meta)
    header["arrays"] = [
        {
            "name": name,
            "dtype": np.dtype(a.dtype).newbyteorder("<").str,
            "shape": list(a.shape),
        }
        for name, a in arrays.items()
    ]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes())


def read_blob(path):
    """Return ``(meta, arrays)``; ``meta`` is the header without ``arrays``."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not an EITBLOB1 file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for spec in header.pop("arrays"):
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            data = fh.read(count * dtype.itemsize)
            arrays[spec["name"]] = np.frombuffer(data, dtype=dtype).reshape(spec["shape"]).copy()
    return header, arrays

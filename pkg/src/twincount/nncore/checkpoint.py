"""Binary checkpoint container.

Layout: 4-byte magic, little-endian uint32 format version, uint64 header
length, UTF-8 JSON header, then raw little-endian float32 data for every tensor
listed in the header, in header order.
"""

import json
import struct

import numpy as np

MAGIC = b"TWCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def write(path, tensors, header_extra):
    """Write ``tensors`` (list of dicts with name, group, kind, array) to ``path``."""
    entries = []
    blobs = []
    for t in tensors:
        arr = np.ascontiguousarray(t["array"], dtype="<f4")
        entries.append({
            "name": t["name"], "group": t["group"], "kind": t["kind"],
            "shape": list(arr.shape),
        })
        blobs.append(arr.tobytes())
    header = dict(header_extra)
    header["version"] = VERSION
    header["tensors"] = entries
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def read(path):
    """Return ``(header, tensors)``; tensors maps ``(kind, name)`` to float32 arrays."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint (no header)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version} is not supported (expected {VERSION})"
        )
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    offset = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = 4 * count
        if len(data) < offset + nbytes:
            raise CheckpointError(f"{path}: truncated checkpoint data at {entry['name']}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        tensors[(entry["kind"], entry["name"])] = arr.reshape(entry["shape"]).astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes after tensor data")
    return header, tensors

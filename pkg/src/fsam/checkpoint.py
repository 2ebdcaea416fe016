"""Checkpoint persistence: a JSON manifest plus a raw little-endian blob.

Layout: magic ``FSCK`` | u32 format version | u64 header length | header
JSON | tensor blob.  The header lists every tensor's name, group, shape,
dtype, offset, and byte count, plus training metadata (stage, epoch, seed,
config hash).  Offsets are validated to be non-overlapping and in-bounds;
save -> load -> save is byte-identical.
"""

import json
import struct

import numpy as np

from .params import ParamSet
from .tensor import ContractError, Tensor

MAGIC = b"FSCK"
FORMAT_VERSION = 1


def save_checkpoint(path, params: ParamSet, meta: dict) -> None:
    tensors = []
    blobs = []
    offset = 0
    for name, tensor in params.items():
        arr = np.ascontiguousarray(tensor.data)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        tensors.append({
            "name": name,
            "group": params.group_of(name),
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "tensors": tensors},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, expected_config_hash: str | None = None):
    """Returns (ParamSet, meta).  Refuses version or config-hash mismatches
    and blobs whose manifest entries overlap or run out of bounds."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file (magic {data[:4]!r})")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise ContractError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    (header_len,) = struct.unpack_from("<Q", data, 8)
    header_start = 16
    blob_start = header_start + header_len
    if blob_start > len(data):
        raise ContractError(f"{path}: truncated header")
    header = json.loads(data[header_start:blob_start])
    meta = header["meta"]
    if expected_config_hash is not None and meta.get("config_hash") != expected_config_hash:
        raise ContractError(
            f"{path}: config hash mismatch (checkpoint {meta.get('config_hash')!r}, "
            f"expected {expected_config_hash!r})"
        )
    blob = data[blob_start:]
    params = ParamSet()
    cursor = 0
    for entry in header["tensors"]:
        if entry["offset"] != cursor:
            raise ContractError(
                f"{path}: tensor {entry['name']} offset {entry['offset']} overlaps "
                f"or leaves a gap (expected {cursor})"
            )
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise ContractError(
                f"{path}: tensor {entry['name']} runs past the blob "
                f"({end} > {len(blob)})"
            )
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]),
                            count=entry["nbytes"] // np.dtype(entry["dtype"]).itemsize,
                            offset=entry["offset"]).reshape(entry["shape"]).copy()
        params.add(entry["name"], Tensor(arr), entry["group"])
        cursor = end
    if cursor != len(blob):
        raise ContractError(f"{path}: {len(blob) - cursor} trailing bytes after tensors")
    return params, meta

"""Reader/writer for the SPT1 binary tensor container.

Layout of one record::

    b"SPT1" | u8 rank | rank x u32 LE dims | f32 LE data (row-major)

Several records may be concatenated in one file; a JSON manifest then maps
identifiers to byte offsets (see :func:`write_bundle`).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Mapping, Tuple

import numpy as np

MAGIC = b"SPT1"


class SptFormatError(ValueError):
    """Raised for a corrupt or foreign SPT1 stream."""


def encode(array) -> bytes:
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise SptFormatError(f"rank {arr.ndim} does not fit in u8")
    if not np.all(np.isfinite(arr)):
        raise SptFormatError("refusing to serialize non-finite values")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_from(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise SptFormatError(
            f"bad magic {buf[offset:offset + 4]!r} at offset {offset}, expected {MAGIC!r}")
    if len(buf) < offset + 5:
        raise SptFormatError("truncated header")
    rank = buf[offset + 4]
    pos = offset + 5
    if len(buf) < pos + 4 * rank:
        raise SptFormatError("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = pos + 4 * count
    if len(buf) < end:
        raise SptFormatError(f"truncated data: need {4 * count} bytes for dims {dims}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return arr.astype(np.float32), end


def decode(buf: bytes) -> np.ndarray:
    arr, end = decode_from(buf, 0)
    if end != len(buf):
        raise SptFormatError(f"{len(buf) - end} trailing bytes after record")
    return arr


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_records(fh: BinaryIO, arrays: Mapping[str, np.ndarray]) -> Dict[str, int]:
    offsets = {}
    pos = fh.tell()
    for name, arr in arrays.items():
        blob = encode(arr)
        offsets[name] = pos
        fh.write(blob)
        pos += len(blob)
    return offsets


def write_bundle(blob_path, manifest_path, arrays: Mapping[str, np.ndarray], extra=None) -> None:
    """Write ``arrays`` back-to-back into ``blob_path`` with an offset manifest."""
    blob_path = Path(blob_path)
    with open(blob_path, "wb") as fh:
        offsets = write_records(fh, arrays)
    manifest = dict(extra or {})
    manifest["blob"] = blob_path.name
    manifest["offsets"] = offsets
    Path(manifest_path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_bundle(manifest_path) -> Tuple[Dict[str, np.ndarray], dict]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    buf = (manifest_path.parent / manifest["blob"]).read_bytes()
    arrays = {}
    for name, off in manifest["offsets"].items():
        arrays[name], _ = decode_from(buf, off)
    return arrays, manifest

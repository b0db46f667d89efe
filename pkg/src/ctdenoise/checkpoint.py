"""Single-file checkpoint container.

Layout (all integers little-endian):

    magic  b"DUGK"
    u32    format version
    32B    SHA-256 of everything after this field
    u64    header length
    bytes  header JSON (iteration, config snapshot, rng states,
           non-tensor optimizer fields, tensor count)
    N x    tensor record: u16 name length | name utf-8 | u8 ndim |
           ndim x u64 dims | float32 little-endian data

Weights, spectral-norm vectors, and optimizer moments all travel as named
float32 tensors, so a save/load round trip is bit-exact.
"""

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DUGK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for corrupt, truncated, or incompatible checkpoint files."""


def _pack_tensor(name, array):
    array = np.ascontiguousarray(array, dtype="<f4")
    encoded = name.encode("utf-8")
    parts = [struct.pack("<H", len(encoded)), encoded,
             struct.pack("<B", array.ndim)]
    parts += [struct.pack("<Q", d) for d in array.shape]
    parts.append(array.tobytes())
    return b"".join(parts)


def save_checkpoint(path, header, tensors):
    """Write header dict + named float32 tensors atomically.

    The file is staged to a sibling temp path and renamed into place; a
    failed write (for example a full disk) leaves no partial file behind.
    """
    path = Path(path)
    payload = [json.dumps(header, sort_keys=True).encode("utf-8")]
    body = [struct.pack("<Q", len(payload[0]))] + payload
    for name in sorted(tensors):
        body.append(_pack_tensor(name, tensors[name]))
    blob = b"".join(body)
    digest = hashlib.sha256(blob).digest()

    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(digest)
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def load_checkpoint(path):
    """Read a checkpoint, verifying magic, version, and checksum.

    Returns (header dict, {name: float32 ndarray}).
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")

    if len(raw) < len(MAGIC) + 4 + 32 + 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}")
    digest = raw[8:40]
    blob = raw[40:]
    if hashlib.sha256(blob).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")

    offset = 0
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    offset += header_len

    tensors = {}
    try:
        while offset < len(blob):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{ndim}Q", blob, offset) if ndim else ()
            offset += 8 * ndim
            count = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            tensors[name] = data.reshape(dims).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated tensor table ({exc})")
    return header, tensors

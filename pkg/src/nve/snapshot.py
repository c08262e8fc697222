"""Binary weight snapshot format (magic ``NVW1``).

Little-endian layout: magic, u32 tensor count, then per tensor: u32 name
length, utf-8 name bytes, u32 rank, rank x u32 dims, float32 payload in
row-major order. Round-trips are bitwise for float32 arrays.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"NVW1"


def pack_weights(named_arrays):
    """Serialize an ordered {name: ndarray} mapping to bytes."""
    parts = [MAGIC, struct.pack("<I", len(named_arrays))]
    for name, arr in named_arrays.items():
        # not ascontiguousarray: that would promote rank-0 arrays to rank 1,
        # and tobytes() copies to C order on its own
        a = np.asarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", a.ndim))
        if a.ndim:
            parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def unpack_weights(blob):
    """Parse snapshot bytes back into an ordered {name: ndarray} mapping."""
    if blob[:4] != MAGIC:
        raise FormatError(f"bad weight snapshot magic {blob[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(
                f"truncated snapshot reading {what}: need {pos + n} bytes, "
                f"file has {len(blob)}"
            )
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    arrays = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"name length of tensor {i}"))
        name = take(name_len, f"name of tensor {i}").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of '{name}'"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of '{name}'"))
        n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * n_values, f"payload of '{name}'")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after last tensor")
    return arrays


def save_weights(path, named_arrays):
    with open(path, "wb") as f:
        f.write(pack_weights(named_arrays))


def load_weights(path):
    with open(path, "rb") as f:
        return unpack_weights(f.read())

"""Binary container shared by models, codebooks and feature caches.

Layout: magic line, little-endian u64 header length, canonical JSON header,
then the raw little-endian blocks in the order the header lists them.
"""

import json
import struct
from typing import Any, Mapping

import numpy as np

from .exceptions import ValidationFailure


MAGIC = b"AUDIOBOW1\n"
SUPPORTED_DTYPES = ("<f4", "<i4")


class SerializationError(ValidationFailure):
    """Exception raised when a container cannot be written or parsed."""

    pass


def canonical_json(obj: Any) -> bytes:
    """Serialize to JSON with sorted keys and compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode(
        "utf-8"
    )


def pack(header: Mapping[str, Any], blocks: Mapping[str, np.ndarray]) -> bytes:
    """
    Pack a JSON header and named array blocks into bytes.

    Args:
        header: JSON-serializable metadata; the key ``blocks`` is reserved
        blocks: Arrays keyed by name, each already of a supported dtype

    Returns:
        bytes: The container, identical for identical inputs
    """
    if "blocks" in header:
        raise SerializationError("header key 'blocks' is reserved")

    layout = []
    payload = []
    offset = 0
    for name, array in blocks.items():
        dtype = np.dtype(array.dtype).newbyteorder("<").str
        if dtype not in SUPPORTED_DTYPES:
            raise SerializationError(f"block {name!r} has unsupported dtype {array.dtype}")
        raw = np.ascontiguousarray(array, dtype=dtype).tobytes(order="C")
        layout.append(
            {"name": name, "dtype": dtype, "shape": list(array.shape), "offset": offset}
        )
        payload.append(raw)
        offset += len(raw)

    head = canonical_json({**header, "blocks": layout})
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(payload)


def unpack(data: bytes) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """
    Parse a container produced by ``pack``.

    Returns:
        Tuple of (header without the block layout, arrays by name)

    Raises:
        SerializationError: If the bytes are not a valid container
    """
    if not data.startswith(MAGIC):
        raise SerializationError("not an audio-bow container (bad magic)")
    start = len(MAGIC)
    try:
        (head_len,) = struct.unpack_from("<Q", data, start)
        head_start = start + 8
        header = json.loads(data[head_start : head_start + head_len].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SerializationError(f"corrupt container header: {e}") from e

    body = head_start + head_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header.pop("blocks", []):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        begin = body + int(entry["offset"])
        end = begin + count * dtype.itemsize
        if end > len(data):
            raise SerializationError(f"block {entry['name']!r} is truncated")
        arrays[entry["name"]] = np.frombuffer(data[begin:end], dtype=dtype).reshape(shape).copy()
    return header, arrays

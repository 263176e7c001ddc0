"""
"FANT" binary tensor container used for checkpoints and imported feature maps.

Layout (little-endian throughout)::

    magic      4 bytes  b"FANT"
    version    u32
    --- payload region ---
    count      u32
    per entry: name_len u32, name (UTF-8), dtype u8 (1=f32, 2=f64),
               rank u32, extents u64 * rank, row-major values
    --- end of payload region ---
    crc32      u32 over the payload region
"""
import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np

from src.error_handling import CorruptContainerError

logger = logging.getLogger(__name__)

MAGIC = b"FANT"
FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {tag: dtype for dtype, tag in _DTYPE_TAGS.items()}


def encode_container(entries: Mapping[str, np.ndarray], dtype: Optional[np.dtype] = None) -> bytes:
    """Serialize named arrays. ``dtype`` forces a storage precision (float32 is lossy)."""
    payload = bytearray(struct.pack("<I", len(entries)))
    for name, array in entries.items():
        target = np.dtype(dtype) if dtype is not None else np.asarray(array).dtype
        target = target.newbyteorder("<")
        if target not in _DTYPE_TAGS:
            target = np.dtype("<f8")
        values = np.asarray(array, dtype=target).copy(order="C")
        encoded_name = name.encode("utf-8")
        payload += struct.pack("<I", len(encoded_name)) + encoded_name
        payload += struct.pack("<BI", _DTYPE_TAGS[target], values.ndim)
        payload += struct.pack(f"<{values.ndim}Q", *values.shape)
        payload += values.tobytes(order="C")
    header = MAGIC + struct.pack("<I", FORMAT_VERSION)
    return header + bytes(payload) + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def decode_container(blob: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptContainerError(f"{source}: not a FANT container (bad magic or truncated)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CorruptContainerError(f"{source}: unsupported container version {version}")
    payload = blob[8:-4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CorruptContainerError(f"{source}: CRC mismatch, container is corrupt or truncated")

    entries: Dict[str, np.ndarray] = {}
    try:
        (count,) = struct.unpack_from("<I", payload, 0)
        offset = 4
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            tag, rank = struct.unpack_from("<BI", payload, offset)
            offset += 5
            shape = struct.unpack_from(f"<{rank}Q", payload, offset)
            offset += 8 * rank
            dtype = _TAG_DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(payload):
                raise CorruptContainerError(f"{source}: entry {name!r} runs past the end of the payload")
            entries[name] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape).copy()
            offset += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CorruptContainerError(f"{source}: malformed entry table ({e})") from e
    if offset != len(payload):
        raise CorruptContainerError(f"{source}: {len(payload) - offset} trailing bytes after last entry")
    return entries


def write_container(path: Union[str, Path], entries: Mapping[str, np.ndarray], dtype: Optional[np.dtype] = None) -> None:
    path = Path(path)
    blob = encode_container(entries, dtype=dtype)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as e:
        logger.error(f"Error writing container {path}: {str(e)}")
        raise
    logger.debug(f"Wrote {len(entries)} entries ({len(blob)} bytes) to {path}")


def read_container(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    return decode_container(path.read_bytes(), source=str(path))

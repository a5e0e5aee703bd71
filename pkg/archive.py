"""
Named-tensor binary container.

Layout (all integers little-endian):
    magic            8 bytes (format tag, e.g. b'EFSLBKBN')
    version          u32
    metadata         u32 count, then per entry u32 len + UTF-8 key, u32 len + UTF-8 value
    directory        u32 count, then per tensor u16 len + UTF-8 name, u8 dtype tag,
                     u8 rank, rank x u32 dims, u64 payload offset
    payloads         row-major little-endian tensor bytes, in directory order
    trailer          32-byte SHA-256 of every preceding byte

Backbone checkpoints, side-chain parameters and synthetic datasets all use it
with different magic tags.
"""

import hashlib
import io
import logging
import os
import struct
from pathlib import Path

import numpy as np

from numerics import EFSLError

logger = logging.getLogger(__name__)

ARCHIVE_VERSION = 1
DIGEST_SIZE = 32

DTYPE_TAGS = {
    np.dtype('<f4'): 1,
    np.dtype('<f8'): 2,
    np.dtype('<i8'): 3,
}
TAG_DTYPES = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}


class CorruptArchiveError(EFSLError):
    """File is truncated, tampered with, or not the expected container"""


class ArchiveVersionError(EFSLError):
    """Container was written by an incompatible format version"""


def _canonical(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype.kind == 'f':
        target = np.dtype('<f8') if array.dtype.itemsize == 8 else np.dtype('<f4')
    elif array.dtype.kind in 'iu':
        target = np.dtype('<i8')
    else:
        raise TypeError(f"unsupported dtype {array.dtype}")
    return np.ascontiguousarray(array, dtype=target)


def content_hash(tensors: dict[str, np.ndarray]) -> str:
    """SHA-256 over (name, dtype, shape, bytes) of every tensor in name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        array = _canonical(tensors[name])
        h.update(name.encode('utf-8'))
        h.update(struct.pack('<B', DTYPE_TAGS[array.dtype]))
        h.update(struct.pack(f'<{array.ndim + 1}I', array.ndim, *array.shape))
        h.update(array.tobytes())
    return h.hexdigest()


def _pack_str(buf: io.BytesIO, text: str, width: str = '<I') -> None:
    raw = text.encode('utf-8')
    buf.write(struct.pack(width, len(raw)))
    buf.write(raw)


def encode_archive(magic: bytes, metadata: dict[str, str], tensors: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    arrays = {name: _canonical(tensors[name]) for name in tensors}

    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack('<I', ARCHIVE_VERSION))

    buf.write(struct.pack('<I', len(metadata)))
    for key in sorted(metadata):
        _pack_str(buf, key)
        _pack_str(buf, str(metadata[key]))

    buf.write(struct.pack('<I', len(arrays)))
    offset = 0
    for name, array in arrays.items():
        _pack_str(buf, name, '<H')
        buf.write(struct.pack('<BB', DTYPE_TAGS[array.dtype], array.ndim))
        buf.write(struct.pack(f'<{array.ndim}I', *array.shape))
        buf.write(struct.pack('<Q', offset))
        offset += array.nbytes

    for array in arrays.values():
        buf.write(array.tobytes())

    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def write_archive(path, magic: bytes, metadata: dict[str, str], tensors: dict[str, np.ndarray]) -> str:
    """Write atomically (temp file + rename); returns the trailing file digest."""
    blob = encode_archive(magic, metadata, tensors)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + '.tmp')
    with open(tmp, 'wb') as fh:
        fh.write(blob)
    os.replace(tmp, path)
    logger.info(f"Wrote {path} ({len(blob)} bytes, {len(tensors)} tensors)")
    return blob[-DIGEST_SIZE:].hex()


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise CorruptArchiveError(f"{self.path}: truncated header")
        values = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return values

    def text(self, width: str = '<I') -> str:
        (length,) = self.take(width)
        if self.pos + length > len(self.blob):
            raise CorruptArchiveError(f"{self.path}: truncated string")
        raw = self.blob[self.pos:self.pos + length]
        self.pos += length
        return raw.decode('utf-8')


def decode_archive(blob: bytes, magic: bytes, path='<memory>') -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if len(blob) < 8 + 4 + DIGEST_SIZE:
        raise CorruptArchiveError(f"{path}: file too short ({len(blob)} bytes)")
    if blob[:8] != magic:
        raise CorruptArchiveError(f"{path}: bad magic {blob[:8]!r}, expected {magic!r}")
    body, trailer = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != trailer:
        raise CorruptArchiveError(f"{path}: content hash mismatch")

    reader = _Reader(body, path)
    reader.pos = 8
    (version,) = reader.take('<I')
    if version != ARCHIVE_VERSION:
        raise ArchiveVersionError(f"{path}: format version {version}, expected {ARCHIVE_VERSION}")

    (n_meta,) = reader.take('<I')
    metadata = {}
    for _ in range(n_meta):
        key = reader.text()
        metadata[key] = reader.text()

    (n_tensors,) = reader.take('<I')
    directory = []
    for _ in range(n_tensors):
        name = reader.text('<H')
        tag, rank = reader.take('<BB')
        if tag not in TAG_DTYPES:
            raise CorruptArchiveError(f"{path}: unknown dtype tag {tag} for {name}")
        dims = reader.take(f'<{rank}I') if rank else ()
        (offset,) = reader.take('<Q')
        directory.append((name, TAG_DTYPES[tag], tuple(dims), offset))

    payload_start = reader.pos
    tensors = {}
    for name, dtype, dims, offset in directory:
        count = int(np.prod(dims)) if dims else 1
        start = payload_start + offset
        end = start + count * dtype.itemsize
        if end > len(body):
            raise CorruptArchiveError(f"{path}: payload for {name} runs past end of file")
        tensors[name] = np.frombuffer(body, dtype=dtype, count=count, offset=start).reshape(dims).copy()
    return metadata, tensors


def read_archive(path, magic: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, 'rb') as fh:
        blob = fh.read()
    return decode_archive(blob, magic, path)

"""TIDM checkpoint container.

Layout::

    b"TIDM" | uint32 version | uint64 manifest length | manifest (UTF-8) | payload | uint64 checksum

All integers are little-endian. Manifest lines are either
``meta <key> <json>`` or ``array <name> <shape-json> <offset> <length>``;
array offsets are relative to the payload start, in order and contiguous.
The payload is the arrays as little-endian float32; the checksum is the
8-byte BLAKE2b digest of the payload.
"""

import hashlib
import json
import logging
import os
import struct
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from ..errors import (
    CheckpointFormatError,
    ChecksumMismatchError,
    InputError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from ..numerics import ParamStore

logger = logging.getLogger(__name__)

MAGIC = b"TIDM"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_CHECKSUM = struct.Struct("<Q")


def payload_checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def encode_checkpoint(params: ParamStore, meta: Optional[Mapping[str, Any]] = None) -> bytes:
    lines: List[str] = []
    meta = dict(meta or {})
    meta.setdefault("step_count", params.step_count)
    for key in sorted(meta):
        if not key or any(ch.isspace() for ch in key):
            raise InputError(f"checkpoint: invalid meta key {key!r}")
        lines.append(f"meta {key} {json.dumps(meta[key], sort_keys=True, separators=(',', ':'))}")
    chunks: List[bytes] = []
    offset = 0
    for name, value in params.items():
        data = np.ascontiguousarray(value, dtype="<f4").tobytes()
        shape = json.dumps(list(value.shape), separators=(",", ":"))
        lines.append(f"array {name} {shape} {offset} {len(data)}")
        chunks.append(data)
        offset += len(data)
    manifest = "".join(line + "\n" for line in lines).encode("utf-8")
    payload = b"".join(chunks)
    return _HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + payload + _CHECKSUM.pack(payload_checksum(payload))


def save_checkpoint(path: str, params: ParamStore, meta: Optional[Mapping[str, Any]] = None) -> str:
    """Write atomically; returns the parameter checksum."""
    blob = encode_checkpoint(params, meta)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as handle:
        handle.write(blob)
    os.replace(tmp, path)
    checksum = params.checksum()
    logger.info("Checkpoint: wrote %s (%d arrays, %d bytes, checksum %s)", path, len(params), len(blob), checksum)
    return checksum


def _parse_manifest(text: str) -> Tuple[Dict[str, Any], List[Tuple[str, Tuple[int, ...], int, int]]]:
    meta: Dict[str, Any] = {}
    arrays: List[Tuple[str, Tuple[int, ...], int, int]] = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        kind, _, rest = line.partition(" ")
        try:
            if kind == "meta":
                key, _, value = rest.partition(" ")
                meta[key] = json.loads(value)
            elif kind == "array":
                name, shape, offset, length = rest.split(" ")
                arrays.append((name, tuple(int(d) for d in json.loads(shape)), int(offset), int(length)))
            else:
                raise ValueError(f"unknown entry {kind!r}")
        except ValueError as exc:
            raise CheckpointFormatError(f"checkpoint manifest line {number}: {exc}") from exc
    return meta, arrays


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Tuple[ParamStore, Dict[str, Any]]:
    if len(blob) < _HEADER.size:
        raise TruncatedCheckpointError(f"{source}: truncated header ({len(blob)} bytes)")
    magic, version, manifest_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: unsupported checkpoint version {version} (known: {VERSION})")
    start = _HEADER.size
    if len(blob) < start + manifest_len:
        raise TruncatedCheckpointError(f"{source}: truncated manifest")
    try:
        manifest = blob[start : start + manifest_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"{source}: manifest is not UTF-8") from exc
    meta, arrays = _parse_manifest(manifest)

    expected = 0
    for name, shape, offset, length in arrays:
        if offset != expected or length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointFormatError(f"{source}: array {name} has inconsistent offset/length")
        expected += length
    payload_start = start + manifest_len
    total = payload_start + expected + _CHECKSUM.size
    if len(blob) < total:
        raise TruncatedCheckpointError(f"{source}: truncated payload ({len(blob)} of {total} bytes)")
    if len(blob) > total:
        raise CheckpointFormatError(f"{source}: {len(blob) - total} trailing bytes")
    payload = blob[payload_start : payload_start + expected]
    (stored,) = _CHECKSUM.unpack_from(blob, payload_start + expected)
    if stored != payload_checksum(payload):
        raise ChecksumMismatchError(f"{source}: payload checksum mismatch")

    params = ParamStore(step_count=int(meta.get("step_count", 0)))
    for name, shape, offset, length in arrays:
        params[name] = np.frombuffer(payload, dtype="<f4", count=length // 4, offset=offset).reshape(shape).astype(np.float32)
    return params, meta


def read_checkpoint(path: str) -> Tuple[ParamStore, Dict[str, Any]]:
    if not os.path.exists(path):
        raise InputError(f"checkpoint not found: {path}")
    with open(path, "rb") as handle:
        blob = handle.read()
    params, meta = decode_checkpoint(blob, path)
    logger.debug("Checkpoint: loaded %s (%d arrays)", path, len(params))
    return params, meta


def load_checkpoint(path: str) -> ParamStore:
    return read_checkpoint(path)[0]

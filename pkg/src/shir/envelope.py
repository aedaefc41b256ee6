"""Binary wire format for the shareable summary.

Layout (little-endian throughout):

    magic     4 bytes  b"SHIR"
    version   u16
    site_id   u16 length prefix + UTF-8 bytes
    family    u8       0 = squared-error, 1 = logistic
    n         u64
    p         u32
    lambda_m  f64
    g         p f64
    H_upper   p (p + 1) / 2 f64, row-major upper triangle incl. diagonal
    crc       u32, CRC-32 of every preceding byte

The checksum is verified before any field is consumed, so any single-byte
corruption is rejected as a checksum failure.  The payload is O(p^2) and
independent of the site's sample size.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .data import SUMMARY_SCHEMA_VERSION, LocalSummary
from .errors import (BadMagicError, ChecksumError, ContractViolation,
                     TruncationError, UnsupportedVersionError)

MAGIC = b"SHIR"
_FAMILY_TO_TAG = {"squared-error": 0, "logistic": 1}
_TAG_TO_FAMILY = {v: k for k, v in _FAMILY_TO_TAG.items()}


def _upper_indices(p):
    return np.triu_indices(p)


def envelope_size(p: int, site_id: str = "") -> int:
    """Exact byte length of an encoded summary."""
    sid = site_id.encode("utf-8")
    return 4 + 2 + (2 + len(sid)) + 1 + 8 + 4 + 8 + 8 * p + 8 * (p * (p + 1) // 2) + 4


def encode_summary(s: LocalSummary) -> bytes:
    """Canonical envelope bytes; identical inputs give identical bytes."""
    sid = str(s.site_id).encode("utf-8")
    if len(sid) > 0xFFFF:
        raise ContractViolation("site_id longer than 65535 bytes")
    p = s.p
    n_upper = p * (p + 1) // 2
    if n_upper > 0xFFFFFFFF:
        raise ContractViolation("matrix too large for the wire format")
    parts = [
        MAGIC,
        struct.pack("<H", s.schema_version),
        struct.pack("<H", len(sid)), sid,
        struct.pack("<B", _FAMILY_TO_TAG[s.family.value]),
        struct.pack("<Q", s.n),
        struct.pack("<I", p),
        struct.pack("<d", s.lambda_m),
        np.ascontiguousarray(s.g, dtype="<f8").tobytes(),
        np.ascontiguousarray(s.H[_upper_indices(p)], dtype="<f8").tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_summary(buf: bytes) -> LocalSummary:
    """Parse and validate envelope bytes back into a summary.

    Error kinds: TruncationError (too short / trailing or missing bytes),
    ChecksumError (any corruption), BadMagicError, UnsupportedVersionError.
    """
    buf = bytes(buf)
    if len(buf) < 4 + 2 + 2 + 1 + 8 + 4 + 8 + 4:
        raise TruncationError(f"envelope too short ({len(buf)} bytes)")
    body, crc_stored = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError("checksum mismatch")
    if body[:4] != MAGIC:
        raise BadMagicError(f"bad magic {body[:4]!r}")
    version = struct.unpack_from("<H", body, 4)[0]
    if version != SUMMARY_SCHEMA_VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    off = 6
    (sid_len,) = struct.unpack_from("<H", body, off)
    off += 2
    if off + sid_len > len(body):
        raise TruncationError("site_id runs past the end")
    site_id = body[off:off + sid_len].decode("utf-8")
    off += sid_len
    try:
        tag, n, p = struct.unpack_from("<BQI", body, off)
    except struct.error:
        raise TruncationError("header runs past the end") from None
    off += 13
    if tag not in _TAG_TO_FAMILY:
        raise TruncationError(f"unknown family tag {tag}")
    try:
        (lambda_m,) = struct.unpack_from("<d", body, off)
    except struct.error:
        raise TruncationError("header runs past the end") from None
    off += 8
    n_upper = p * (p + 1) // 2
    expect = off + 8 * p + 8 * n_upper
    if len(body) != expect:
        raise TruncationError(
            f"payload length {len(body)} does not match p={p} (expected {expect})")
    g = np.frombuffer(body, dtype="<f8", count=p, offset=off).astype(np.float64)
    off += 8 * p
    upper = np.frombuffer(body, dtype="<f8", count=n_upper, offset=off)
    H = np.zeros((p, p))
    iu = _upper_indices(p)
    H[iu] = upper
    H = H + np.triu(H, 1).T
    return LocalSummary(site_id=site_id, n=int(n), H=H, g=g,
                        family=_TAG_TO_FAMILY[tag], lambda_m=float(lambda_m),
                        schema_version=int(version))


def sidecar_manifest(s: LocalSummary) -> str:
    """Human-readable key-value companion for an encoded envelope."""
    lines = [
        f"site_id: {s.site_id}",
        f"schema_version: {s.schema_version}",
        f"family: {s.family.value}",
        f"n: {s.n}",
        f"p: {s.p}",
        f"lambda_m: {s.lambda_m!r}",
        f"payload_bytes: {envelope_size(s.p, str(s.site_id))}",
    ]
    return "\n".join(lines) + "\n"

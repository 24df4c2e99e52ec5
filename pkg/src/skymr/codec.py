"""Speed-oriented byte compression with a framed block format.

Frames wrap raw-deflate payloads (LZ77 + Huffman at the fastest level)
in 256 KiB input blocks: a stream header carrying a magic tag, then per
block [raw_len: u32 LE][comp_len: u32 LE][payload].  Decompression
validates the frame structure and raises CodecError on anything
malformed, so corrupt data never decodes silently.
"""

from __future__ import annotations

import struct
import zlib

MAGIC = b"SLZ1"
BLOCK_BYTES = 256 * 1024
_LEVEL = 1

CODECS = ("none", "lz")


class CodecError(ValueError):
    """Corrupt or truncated compressed frame."""


def compress(data: bytes) -> bytes:
    out = [MAGIC]
    for start in range(0, len(data), BLOCK_BYTES):
        block = data[start : start + BLOCK_BYTES]
        comp = zlib.compress(block, _LEVEL)
        out.append(struct.pack("<II", len(block), len(comp)))
        out.append(comp)
    return b"".join(out)


def decompress(data: bytes) -> bytes:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise CodecError("bad magic; not a compressed frame")
    pos = len(MAGIC)
    out = []
    while pos < len(data):
        if pos + 8 > len(data):
            raise CodecError("truncated block header")
        raw_len, comp_len = struct.unpack_from("<II", data, pos)
        pos += 8
        if raw_len > BLOCK_BYTES:
            raise CodecError(f"block claims {raw_len} raw bytes, limit {BLOCK_BYTES}")
        if pos + comp_len > len(data):
            raise CodecError("truncated block payload")
        try:
            block = zlib.decompress(data[pos : pos + comp_len])
        except zlib.error as exc:
            raise CodecError(f"corrupt payload: {exc}") from exc
        if len(block) != raw_len:
            raise CodecError(f"block inflated to {len(block)} bytes, header said {raw_len}")
        out.append(block)
        pos += comp_len
    return b"".join(out)


def encode(data: bytes, codec: str) -> bytes:
    if codec == "none":
        return data
    if codec == "lz":
        return compress(data)
    raise ValueError(f"unknown codec {codec!r}")


def decode(data: bytes, codec: str) -> bytes:
    if codec == "none":
        return data
    if codec == "lz":
        return decompress(data)
    raise ValueError(f"unknown codec {codec!r}")

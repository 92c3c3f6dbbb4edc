"""32-bit range coder over 16-bit frequency tables, and the ``IPC1`` container.

The coder is the carry-propagating variant (one cached byte plus a run of
pending 0xFF bytes). The first byte such a coder emits is always zero and is
not stored. At the end the encoder picks the value inside the final interval
with the most trailing zero bytes and drops those zero bytes (at most the
four flush bytes); the decoder supplies up to four zero bytes past the end.
A stream is therefore at most ``renormalizations + 4`` bytes long, and a
stream that runs dry beyond that allowance is reported as truncated.

Container layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"IPC1"
    4       1     version (1)
    5       4     image width  (u32)
    9       4     image height (u32)
    13      8     architecture descriptor hash
    21      8     checkpoint content hash
    29      4     len(b_z) (u32)
    33      n     b_z
    33+n    4     len(b_y) (u32)
    37+n    m     b_y
"""
from __future__ import annotations

import struct
from bisect import bisect_right
from dataclasses import dataclass
from typing import Sequence

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK = 0xFFFFFFFF
FLUSH_BYTES = 4

MAGIC = b"IPC1"
VERSION = 1
HEADER_SIZE = 37


@dataclass(frozen=True)
class PMFTable:
    """Cumulative frequencies for the integer support ``[lower, upper]``."""

    lower: int
    cdf: tuple[int, ...]

    def __post_init__(self):
        c = self.cdf
        if len(c) < 2 or c[0] != 0 or c[-1] != TOTAL:
            raise ValueError(f"cdf must start at 0 and end at {TOTAL}")
        if any(b <= a for a, b in zip(c, c[1:])):
            raise ValueError("cdf must be strictly increasing")

    @property
    def upper(self) -> int:
        return self.lower + len(self.cdf) - 2

    @property
    def size(self) -> int:
        return len(self.cdf) - 1

    def freq(self, symbol: int) -> int:
        i = symbol - self.lower
        return self.cdf[i + 1] - self.cdf[i]

    def probabilities(self) -> list[float]:
        return [(b - a) / TOTAL for a, b in zip(self.cdf, self.cdf[1:])]


class RangeCoderError(ValueError):
    pass


class TruncatedStream(RangeCoderError):
    pass


def ec_encode(symbols: Sequence[int], tables: Sequence[PMFTable]) -> bytes:
    """Encode ``symbols[i]`` under ``tables[i]``; every symbol must lie in its table's support."""
    if len(symbols) != len(tables):
        raise ValueError(f"{len(symbols)} symbols but {len(tables)} tables")
    out = bytearray()
    low, rng, cache, cache_size = 0, _MASK, 0, 1

    def shift_low():
        nonlocal low, cache, cache_size
        if low < 0xFF000000 or low > _MASK:
            carry = low >> 32
            temp = cache
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                cache_size -= 1
                if not cache_size:
                    break
            cache = (low >> 24) & 0xFF
        cache_size += 1
        low = (low << 8) & _MASK

    for s, t in zip(symbols, tables):
        i = s - t.lower
        cdf = t.cdf
        if i < 0 or i >= len(cdf) - 1:
            raise RangeCoderError(f"symbol {s} outside support [{t.lower}, {t.upper}]; clamp it first")
        r = rng >> PRECISION
        low += r * cdf[i]
        rng = r * (cdf[i + 1] - cdf[i])
        while rng < _TOP:
            rng <<= 8
            shift_low()
    # any value in [low, low + rng) decodes correctly; take the roundest one
    for k in (4, 3, 2, 1):
        m = 1 << (8 * k)
        v = -(-low // m) * m
        if v < low + rng:
            low = v
            break
    for _ in range(5):
        shift_low()
    assert out[0] == 0
    end = len(out)
    while end > max(1, len(out) - FLUSH_BYTES) and out[end - 1] == 0:
        end -= 1
    return bytes(out[1:end])


def ec_decode(data: bytes, tables: Sequence[PMFTable], count: int) -> list[int]:
    """Inverse of :func:`ec_encode`.

    The tables must equal the encoder's; a mismatch cannot be detected and
    yields garbage symbols rather than an error.
    """
    if len(tables) != count:
        raise ValueError(f"{count} symbols requested but {len(tables)} tables given")
    pos = 4
    code = int.from_bytes(bytes(data[:4]).ljust(4, b"\x00"), "big")
    rng = _MASK
    n = len(data)
    out = []
    for t in tables:
        cdf = t.cdf
        r = rng >> PRECISION
        v = code // r
        if v >= TOTAL:
            raise RangeCoderError("corrupt stream: code outside coding interval")
        i = bisect_right(cdf, v) - 1
        code -= r * cdf[i]
        rng = r * (cdf[i + 1] - cdf[i])
        while rng < _TOP:
            if pos >= n + FLUSH_BYTES:
                raise TruncatedStream("stream ended before all symbols were decoded")
            code = ((code << 8) | (data[pos] if pos < n else 0)) & _MASK
            pos += 1
            rng <<= 8
        out.append(i + t.lower)
    return out


# --------------------------------------------------------------------------- #
# container
# --------------------------------------------------------------------------- #

class ContainerError(ValueError):
    code = 10


class MagicMismatch(ContainerError):
    code = 11


class VersionMismatch(ContainerError):
    code = 12


class ArchitectureMismatch(ContainerError):
    code = 13


class CheckpointMismatch(ContainerError):
    code = 14


class TruncatedContainer(ContainerError):
    code = 15


@dataclass(frozen=True)
class ContainerMeta:
    width: int
    height: int
    arch_hash: bytes
    checkpoint_hash: bytes


def pack_container(meta: ContainerMeta, b_z: bytes, b_y: bytes) -> bytes:
    if len(meta.arch_hash) != 8 or len(meta.checkpoint_hash) != 8:
        raise ValueError("hashes must be 8 bytes")
    for name, b in (("b_z", b_z), ("b_y", b_y)):
        if len(b) >= 1 << 32:
            raise ValueError(f"{name} payload too large")
    return b"".join([
        MAGIC,
        struct.pack("<BII", VERSION, meta.width, meta.height),
        meta.arch_hash,
        meta.checkpoint_hash,
        struct.pack("<I", len(b_z)), b_z,
        struct.pack("<I", len(b_y)), b_y,
    ])


def unpack_container(data: bytes, arch_hash: bytes | None = None,
                     checkpoint_hash: bytes | None = None) -> tuple[ContainerMeta, bytes, bytes]:
    """Split a container; when expected hashes are given they must match."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicMismatch(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}")
    if len(data) < 33:
        raise TruncatedContainer("container header truncated")
    version, width, height = struct.unpack_from("<BII", data, 4)
    if version != VERSION:
        raise VersionMismatch(f"unsupported container version {version}")
    meta = ContainerMeta(width, height, bytes(data[13:21]), bytes(data[21:29]))
    if arch_hash is not None and meta.arch_hash != arch_hash:
        raise ArchitectureMismatch("container was produced by a different architecture")
    if checkpoint_hash is not None and meta.checkpoint_hash != checkpoint_hash:
        raise CheckpointMismatch(
            f"checkpoint hash mismatch: container expects {meta.checkpoint_hash.hex()}, got {checkpoint_hash.hex()}"
        )
    (nz,) = struct.unpack_from("<I", data, 29)
    end_z = 33 + nz
    if len(data) < end_z + 4:
        raise TruncatedContainer("b_z payload truncated")
    (ny,) = struct.unpack_from("<I", data, end_z)
    if len(data) != end_z + 4 + ny:
        raise TruncatedContainer(f"container length {len(data)} != {end_z + 4 + ny}")
    return meta, bytes(data[33:end_z]), bytes(data[end_z + 4:])

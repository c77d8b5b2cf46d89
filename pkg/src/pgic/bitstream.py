"""The PGIC progressive container.

Layout (see FORMAT.md for the byte-level description)::

    header (12 bytes) | stage 1 | stage 2 | ... | stage S

Each stage holds the index grid in raster order, ``l_bits`` bits per index,
most significant bit first, zero-padded to a byte boundary. Because every
stage starts on a byte boundary and has a size fixed by the header, any
stage-aligned prefix of a stream is itself a valid stream.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (BadMagicError, FormatError, PacketGapError, ShapeError,
                     TruncatedError, UnsupportedVersionError)
from .rvq import StageIndices

log = logging.getLogger(__name__)

MAGIC = b"PGIC"
VERSION = 1
HEADER_SIZE = 12
SEQ_SIZE = 4

# magic, version<<4 | (l_bits - 1), width, height, n_total, f, stages_present
_HEADER = struct.Struct("<4sBHHBBB")
assert _HEADER.size == HEADER_SIZE


@dataclass(frozen=True)
class BitstreamHeader:
    orig_width: int
    orig_height: int
    n_total: int
    l_bits: int
    downsample_f: int
    stages_present: int
    version: int = VERSION

    def __post_init__(self):
        if not 1 <= self.l_bits <= 16:
            raise FormatError(f"l_bits must be in 1..16, got {self.l_bits}")
        if not 1 <= self.n_total <= 255:
            raise FormatError(f"n_total must be in 1..255, got {self.n_total}")
        if not 1 <= self.stages_present <= self.n_total:
            raise FormatError(f"stages_present {self.stages_present} outside 1..{self.n_total}")
        if not (1 <= self.orig_width <= 0xFFFF and 1 <= self.orig_height <= 0xFFFF):
            raise FormatError(f"image dims {self.orig_width}x{self.orig_height} out of range")
        if not 1 <= self.downsample_f <= 255:
            raise FormatError(f"downsample factor must be in 1..255, got {self.downsample_f}")
        if not 0 <= self.version <= 15:
            raise FormatError(f"version must fit in 4 bits, got {self.version}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        """Latent grid (rows, cols) after padding to a multiple of f."""
        f = self.downsample_f
        return -(-self.orig_height // f), -(-self.orig_width // f)

    @property
    def positions(self) -> int:
        h, w = self.grid_shape
        return h * w

    @property
    def stage_bytes(self) -> int:
        return -(-self.positions * self.l_bits // 8)

    def with_stages(self, stages: int) -> "BitstreamHeader":
        return replace(self, stages_present=stages)

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, (self.version << 4) | (self.l_bits - 1), self.orig_width,
                            self.orig_height, self.n_total, self.downsample_f, self.stages_present)

    @classmethod
    def unpack(cls, data: bytes) -> "BitstreamHeader":
        if len(data) < HEADER_SIZE:
            raise TruncatedError(f"stream has {len(data)} bytes, the header alone needs {HEADER_SIZE}")
        magic, vl, w, h, n, f, s = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version = vl >> 4
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported stream version {version}")
        return cls(w, h, n, (vl & 0x0F) + 1, f, s, version)


def bpp(header: BitstreamHeader) -> float:
    """Bits per pixel of the stages present: ``stages * L / f^2``."""
    return header.stages_present * header.l_bits / (header.downsample_f ** 2)


def bpp_increment(l_bits: int, f: int) -> float:
    """Smallest rate step, one stage: ``L / f^2``."""
    return l_bits / (f * f)


# ---------------------------------------------------------------------------
# fixed-width packing


def pack_indices(values: np.ndarray, bits: int) -> bytes:
    """MSB-first fixed-width packing, zero-padded to a whole byte."""
    v = np.asarray(values, dtype=np.int64).reshape(-1)
    if v.size and (v.min() < 0 or v.max() >= (1 << bits)):
        raise FormatError(f"index out of range for {bits}-bit packing")
    shifts = np.arange(bits - 1, -1, -1, dtype=np.int64)
    bitarr = ((v[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(bitarr).tobytes()


def unpack_indices(data: bytes, count: int, bits: int) -> np.ndarray:
    need = -(-count * bits // 8)
    if len(data) < need:
        raise TruncatedError(f"need {need} bytes for {count} indices, got {len(data)}")
    bitarr = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=need))[:count * bits]
    weights = (1 << np.arange(bits - 1, -1, -1, dtype=np.int64))
    return bitarr.reshape(count, bits).astype(np.int64) @ weights


# ---------------------------------------------------------------------------
# streams


def serialize(header: BitstreamHeader, indices: list[StageIndices]) -> bytes:
    if len(indices) != header.stages_present:
        raise ShapeError(f"header announces {header.stages_present} stages, got {len(indices)}")
    parts = [header.pack()]
    for expected, s in enumerate(indices, start=1):
        if s.stage != expected:
            raise ShapeError(f"stages must be 1..{header.stages_present} in order, got stage {s.stage}")
        if s.grid.shape != header.grid_shape:
            raise ShapeError(f"stage {s.stage} grid {s.grid.shape} does not match "
                             f"{header.grid_shape} implied by {header.orig_width}x{header.orig_height}"
                             f" with f={header.downsample_f}")
        parts.append(pack_indices(s.grid, header.l_bits))
    return b"".join(parts)


def deserialize(data: bytes) -> tuple[BitstreamHeader, list[StageIndices]]:
    """Decode the header and every complete stage in ``data``.

    The returned header's ``stages_present`` is the number of stages actually
    recovered. A partial trailing stage is logged and dropped.
    """
    data = bytes(data)
    header = BitstreamHeader.unpack(data)
    size = header.stage_bytes
    body = len(data) - HEADER_SIZE
    complete = min(header.stages_present, body // size)
    if complete < 1:
        raise TruncatedError(f"no complete stage: {body} payload bytes, a stage needs {size}")
    leftover = min(body, header.stages_present * size) - complete * size
    if leftover:
        log.info("dropping partial stage %d (%d of %d bytes)", complete + 1, leftover, size)
    shape = header.grid_shape
    indices = []
    for i in range(complete):
        start = HEADER_SIZE + i * size
        grid = unpack_indices(data[start:start + size], header.positions, header.l_bits)
        indices.append(StageIndices(i + 1, grid.reshape(shape)))
    return header.with_stages(complete), indices


def truncate_to_stages(data: bytes, stages: int) -> bytes:
    """Cut a stream down to its first ``stages`` stages, rewriting the header."""
    header = BitstreamHeader.unpack(data)
    stages = min(stages, header.stages_present)
    body = data[HEADER_SIZE:HEADER_SIZE + stages * header.stage_bytes]
    return header.with_stages(stages).pack() + body


@dataclass(frozen=True)
class StageSpan:
    stage: int
    start: int
    end: int
    complete: bool


def stage_spans(data: bytes) -> list[StageSpan]:
    """Byte ranges of every announced stage, marking which are fully present."""
    header = BitstreamHeader.unpack(data)
    size = header.stage_bytes
    spans = []
    for i in range(header.stages_present):
        start = HEADER_SIZE + i * size
        spans.append(StageSpan(i + 1, start, start + size, start + size <= len(data)))
    return spans


# ---------------------------------------------------------------------------
# packets


@dataclass(frozen=True)
class Packet:
    """One transmission unit: sequence number, stream header, data slice.

    Every packet repeats the 12-byte stream header so that the stage data
    slices are exactly ``payload_size`` bytes each.
    """

    seq: int
    header: bytes
    data: bytes

    def to_bytes(self) -> bytes:
        return struct.pack("<I", self.seq) + self.header + self.data

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Packet":
        if len(raw) < SEQ_SIZE + HEADER_SIZE:
            raise TruncatedError(f"packet of {len(raw)} bytes is shorter than its preamble")
        (seq,) = struct.unpack_from("<I", raw)
        return cls(seq, bytes(raw[SEQ_SIZE:SEQ_SIZE + HEADER_SIZE]), bytes(raw[SEQ_SIZE + HEADER_SIZE:]))


def packetize(data: bytes, payload_size: int) -> list[Packet]:
    """Split the stage data of a stream into ``payload_size``-byte packets."""
    if payload_size < 1:
        raise ValueError(f"payload_size must be at least 1, got {payload_size}")
    BitstreamHeader.unpack(data)
    head, body = bytes(data[:HEADER_SIZE]), bytes(data[HEADER_SIZE:])
    if not body:
        return [Packet(0, head, b"")]
    return [Packet(seq, head, body[off:off + payload_size])
            for seq, off in enumerate(range(0, len(body), payload_size))]


def reassemble(packets: list[Packet]) -> bytes:
    """Concatenate an in-order packet prefix back into a stream prefix."""
    if not packets:
        raise ValueError("no packets to reassemble")
    for expected, p in enumerate(packets):
        if p.seq != expected:
            raise PacketGapError(expected)
        if p.header != packets[0].header:
            raise FormatError(f"packet {p.seq} carries a different stream header")
    return packets[0].header + b"".join(p.data for p in packets)

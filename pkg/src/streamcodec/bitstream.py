"""Packed bitstream: fixed 32-byte header plus 10-byte code frames.

Each frame packs its book indices most-significant-bit first, book order
0..num_books-1, padded with zero bits to a whole byte (the canonical
8 x 10 bit layout is exactly 80 bits, no padding). All multi-byte header
fields are little-endian so alternate implementations can interoperate
bit-exactly.
"""

import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import BitstreamError

MAGIC = b"ADC1"
BITSTREAM_VERSION = 1
HEADER_SIZE = 32

VARIANT_IDS = {"sym": 0, "v0": 1, "v1": 2, "v2": 3}
VARIANT_NAMES = {v: k for k, v in VARIANT_IDS.items()}

_HEADER_STRUCT = struct.Struct("<4sHIIBBBB8s6s")
assert _HEADER_STRUCT.size == HEADER_SIZE


@dataclass(frozen=True)
class BitstreamHeader:
    """Everything needed to parse frames and check decoder compatibility."""

    sample_rate: int
    hop: int
    num_books: int
    bits_per_code: int
    variant: str
    codes_normalized: bool
    config_hash_prefix: bytes  # first 8 bytes of the sha256 config hash
    version: int = BITSTREAM_VERSION

    def __post_init__(self):
        if self.num_books < 1 or self.num_books > 255:
            raise ValueError("num_books out of range")
        if self.bits_per_code < 1 or self.bits_per_code > 16:
            raise ValueError("bits_per_code out of range")
        if self.variant not in VARIANT_IDS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if len(self.config_hash_prefix) != 8:
            raise ValueError("config_hash_prefix must be 8 bytes")

    @property
    def frame_bits(self) -> int:
        return self.num_books * self.bits_per_code

    @property
    def frame_bytes(self) -> int:
        return (self.frame_bits + 7) // 8

    def to_bytes(self) -> bytes:
        flags = 1 if self.codes_normalized else 0
        return _HEADER_STRUCT.pack(
            MAGIC,
            self.version,
            self.sample_rate,
            self.hop,
            self.num_books,
            self.bits_per_code,
            VARIANT_IDS[self.variant],
            flags,
            self.config_hash_prefix,
            b"\x00" * 6,
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "BitstreamHeader":
        if len(data) < HEADER_SIZE:
            raise BitstreamError(
                f"header truncated: need {HEADER_SIZE} bytes, have {len(data)}"
            )
        magic, version, rate, hop, books, bits, variant_id, flags, hash_prefix, _ = (
            _HEADER_STRUCT.unpack(data[:HEADER_SIZE])
        )
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r} (expected {MAGIC!r})")
        if version != BITSTREAM_VERSION:
            raise BitstreamError(f"unknown bitstream version {version}")
        if variant_id not in VARIANT_NAMES:
            raise BitstreamError(f"unknown variant id {variant_id}")
        return cls(
            sample_rate=rate,
            hop=hop,
            num_books=books,
            bits_per_code=bits,
            variant=VARIANT_NAMES[variant_id],
            codes_normalized=bool(flags & 1),
            config_hash_prefix=hash_prefix,
            version=version,
        )


def bitrate(header: BitstreamHeader) -> int:
    """Bits per second of the payload: sample_rate / hop * num_books * bits."""
    return header.sample_rate * header.num_books * header.bits_per_code // header.hop


def pack_payload(codes: np.ndarray, header: BitstreamHeader) -> bytes:
    """Pack [frames, num_books] indices into frame_bytes-per-frame payload."""
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] != header.num_books:
        raise ValueError(f"codes must be [frames, {header.num_books}]")
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << header.bits_per_code)):
        raise ValueError(
            f"code index out of range for {header.bits_per_code}-bit packing"
        )
    n = codes.shape[0]
    if n == 0:
        return b""
    wide = codes.astype(">u2").view(np.uint8).reshape(n, header.num_books, 2)
    bits = np.unpackbits(wide, axis=-1)[..., 16 - header.bits_per_code :]
    bits = bits.reshape(n, header.frame_bits)
    pad = header.frame_bytes * 8 - header.frame_bits
    if pad:
        bits = np.concatenate([bits, np.zeros((n, pad), dtype=np.uint8)], axis=1)
    return np.packbits(bits, axis=1).tobytes()


def unpack_payload(data: bytes, header: BitstreamHeader, offset: int = 0) -> np.ndarray:
    """Inverse of pack_payload; rejects trailing partial frames."""
    fb = header.frame_bytes
    if len(data) % fb:
        raise BitstreamError(
            f"truncated payload: {len(data) % fb} dangling byte(s) at offset "
            f"{offset + len(data) - len(data) % fb}"
        )
    n = len(data) // fb
    if n == 0:
        return np.zeros((0, header.num_books), dtype=np.int64)
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, fb)
    bits = np.unpackbits(raw, axis=1)[:, : header.frame_bits]
    bits = bits.reshape(n, header.num_books, header.bits_per_code)
    lead = np.zeros((n, header.num_books, 16 - header.bits_per_code), dtype=np.uint8)
    wide = np.packbits(np.concatenate([lead, bits], axis=-1), axis=-1)
    return wide.reshape(n, header.num_books * 2).view(">u2").astype(np.int64)


def pack_frames(codes: np.ndarray, header: BitstreamHeader) -> bytes:
    """Full stream: header then packed frames."""
    return header.to_bytes() + pack_payload(codes, header)


def unpack_frames(data: bytes) -> Tuple[BitstreamHeader, np.ndarray]:
    """Parse a full stream; exact inverse of pack_frames."""
    header = BitstreamHeader.from_bytes(data)
    codes = unpack_payload(data[HEADER_SIZE:], header, offset=HEADER_SIZE)
    return header, codes

"""Bit-exact packing of frames into attribute images ("GSAI") and of sparse
deltas into wire payloads ("GSDP").

Attribute images: one 16-bit plane per scalar attribute, pixel i <->
primitive i in row-major order, per-plane affine dequantization. Delta
payloads: gap-encoded varint indices plus fixed-point i32 components with a
shared quantization step. Everything is little-endian.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, DecodeError, StructuralError
from .model import DeltaTensor, GaussianFrame, degree_from_param_dim

IMAGE_MAGIC = b"GSAI"
IMAGE_VERSION = 1
DELTA_MAGIC = b"GSDP"
BIT_DEPTH = 16
QMAX = (1 << BIT_DEPTH) - 1

_IMAGE_HEADER = struct.Struct("<4sHIHHHB")  # magic, version, n, m, w, h, bit_depth
_DELTA_HEADER = struct.Struct("<4sIIId")  # magic, frame_index, base_key, entry_count, quant_step
DELTA_HEADER_BYTES = _DELTA_HEADER.size


def encode_varint(value: int) -> bytes:
    """Protocol-buffer style base-128 varint; non-negative values only."""
    if value < 0:
        raise StructuralError(f"cannot varint-encode negative value {value}")
    out = bytearray()
    while value > 0x7F:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    out.append(value)
    return bytes(out)


def decode_varint(data: bytes, offset: int = 0) -> tuple:
    """Returns (value, next_offset)."""
    value = 0
    shift = 0
    while True:
        if offset >= len(data):
            raise DecodeError("truncated varint")
        byte = data[offset]
        offset += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, offset
        shift += 7
        if shift > 63:
            raise DecodeError("varint too long")


@dataclass(frozen=True)
class AttributeImageSet:
    """Multi-channel 2D-image encoding of one frame."""

    images: np.ndarray  # (m, h, w) uint16
    scales: np.ndarray  # (m,) float64
    offsets: np.ndarray  # (m,) float64
    count: int  # n primitives; pixels >= n are zero padding
    frame_index: int
    group_key: int
    bit_depth: int = BIT_DEPTH

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def num_attributes(self) -> int:
        return self.images.shape[0]

    def to_bytes(self) -> bytes:
        m, h, w = self.images.shape
        out = bytearray()
        out += _IMAGE_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, self.count, m, w, h, self.bit_depth)
        out += struct.pack("<II", self.frame_index, self.group_key)
        for j in range(m):
            out += struct.pack("<dd", self.scales[j], self.offsets[j])
            out += self.images[j].astype("<u2").tobytes()
        return bytes(out)

    @staticmethod
    def from_bytes(data: bytes) -> "AttributeImageSet":
        if len(data) < _IMAGE_HEADER.size:
            raise DecodeError("attribute image container too short")
        magic, version, n, m, w, h, depth = _IMAGE_HEADER.unpack_from(data, 0)
        if magic != IMAGE_MAGIC:
            raise DecodeError(f"bad attribute-image magic {magic!r}")
        if version != IMAGE_VERSION or depth != BIT_DEPTH:
            raise DecodeError("unsupported attribute-image version or bit depth")
        pos = _IMAGE_HEADER.size
        frame_index, group_key = struct.unpack_from("<II", data, pos)
        pos += 8
        plane_bytes = 2 * w * h
        images = np.empty((m, h, w), dtype=np.uint16)
        scales = np.empty(m)
        offsets = np.empty(m)
        for j in range(m):
            if pos + 16 + plane_bytes > len(data):
                raise DecodeError("truncated attribute image container")
            scales[j], offsets[j] = struct.unpack_from("<dd", data, pos)
            pos += 16
            images[j] = np.frombuffer(data, dtype="<u2", count=w * h, offset=pos).reshape(h, w)
            pos += plane_bytes
        return AttributeImageSet(
            images=images, scales=scales, offsets=offsets, count=n,
            frame_index=frame_index, group_key=group_key,
        )


def encode_frame(frame: GaussianFrame, width: int = None, height: int = None) -> AttributeImageSet:
    """Pack a frame into per-attribute 16-bit planes.

    Round-trip error per parameter is at most one quantization step
    ``(max - min) / (2**16 - 1)`` per plane; a constant plane round-trips
    exactly (scale 0, offset = value).
    """
    n, m = frame.params.shape
    if width is None or height is None:
        side = math.ceil(math.sqrt(n))
        width = width or side
        height = height or side
    if n > width * height:
        raise CapacityError(f"{n} primitives exceed {width}x{height} image capacity")
    images = np.zeros((m, height * width), dtype=np.uint16)
    scales = np.zeros(m)
    offsets = np.zeros(m)
    for j in range(m):
        col = frame.params[:, j]
        lo, hi = float(col.min()), float(col.max())
        if hi == lo:
            scales[j] = 0.0
            offsets[j] = lo
        else:
            scales[j] = (hi - lo) / QMAX
            offsets[j] = lo
            images[j, :n] = np.clip(np.rint((col - lo) / scales[j]), 0, QMAX).astype(np.uint16)
    return AttributeImageSet(
        images=images.reshape(m, height, width),
        scales=scales,
        offsets=offsets,
        count=n,
        frame_index=frame.frame_index,
        group_key=frame.group_key,
    )


def decode_frame(image_set: AttributeImageSet) -> GaussianFrame:
    m = image_set.num_attributes
    degree_from_param_dim(m)  # validates the attribute count
    n = image_set.count
    flat = image_set.images.reshape(m, -1)[:, :n].astype(np.float64)
    params = (flat * image_set.scales[:, None] + image_set.offsets[:, None]).T
    return GaussianFrame(
        params=params, frame_index=image_set.frame_index, group_key=image_set.group_key
    )


@dataclass(frozen=True)
class DeltaPayload:
    """Serialized sparse delta; ``payload_bytes`` is the exact wire size."""

    data: bytes
    frame_index: int
    base_key: int
    entry_count: int
    quant_step: float

    @property
    def payload_bytes(self) -> int:
        return len(self.data)


def encode_delta(delta: DeltaTensor, quant_step: float, frame_index: int = 0,
                 base_key: int = 0) -> DeltaPayload:
    """Quantize to i32 fixed point; entries that quantize to all zeros are
    dropped (they would decode as exact zero anyway)."""
    if quant_step <= 0:
        raise StructuralError("quant_step must be positive")
    kept = []
    for idx in sorted(delta.entries):
        q = np.rint(delta.entries[idx] / quant_step).astype(np.int64)
        if np.any(q != 0):
            if np.any(np.abs(q) > np.iinfo(np.int32).max):
                raise StructuralError(f"delta at {idx} overflows i32 fixed point")
            kept.append((idx, q.astype(np.int32)))
    out = bytearray()
    out += _DELTA_HEADER.pack(DELTA_MAGIC, frame_index, base_key, len(kept), quant_step)
    prev = 0
    for idx, _ in kept:
        out += encode_varint(idx - prev)
        prev = idx
    for _, q in kept:
        out += q.astype("<i4").tobytes()
    return DeltaPayload(
        data=bytes(out),
        frame_index=frame_index,
        base_key=base_key,
        entry_count=len(kept),
        quant_step=quant_step,
    )


def decode_delta(payload, base_count: int = None, param_width: int = None) -> DeltaTensor:
    """Inverse of :func:`encode_delta`. ``base_count``/``param_width`` pin
    the base the delta applies to; by default they are inferred from the
    largest index (count) and the remaining byte length (width)."""
    data = payload.data if isinstance(payload, DeltaPayload) else bytes(payload)
    if len(data) < DELTA_HEADER_BYTES:
        raise DecodeError("delta payload shorter than its header")
    magic, frame_index, base_key, entry_count, quant_step = _DELTA_HEADER.unpack_from(data, 0)
    if magic != DELTA_MAGIC:
        raise DecodeError(f"bad delta magic {magic!r}")
    pos = DELTA_HEADER_BYTES
    indices = []
    prev = 0
    for _ in range(entry_count):
        gap, pos = decode_varint(data, pos)
        prev += gap
        indices.append(prev)
    remaining = len(data) - pos
    if param_width is None:
        if entry_count == 0:
            raise DecodeError("param_width required to decode an empty delta")
        if remaining % (4 * entry_count):
            raise DecodeError("delta payload length inconsistent with entry count")
        param_width = remaining // (4 * entry_count)
    if remaining != 4 * entry_count * param_width:
        raise DecodeError("truncated delta payload")
    q = np.frombuffer(data, dtype="<i4", count=entry_count * param_width, offset=pos)
    q = q.reshape(entry_count, param_width)
    if base_count is None:
        base_count = (indices[-1] + 1) if indices else 0
    entries = {idx: q[i].astype(np.float64) * quant_step for i, idx in enumerate(indices)}
    return DeltaTensor(base_count=base_count, param_width=param_width, entries=entries)

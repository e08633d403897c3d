"""Wire format shared by mailboxes and permanent queues.

A frame is a 4-byte little-endian header (opcode u16, payload length u16)
followed by exactly ``length`` payload bytes.  On data-plane mailboxes
(512-byte slots) every payload starts with a 2-byte fragment header: bit 15
flags the final fragment, bits 0..14 count fragments from zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

HEADER = struct.Struct("<HH")
HEADER_SIZE = HEADER.size
FRAG = struct.Struct("<H")
FRAG_FINAL = 0x8000


class Op(IntEnum):
    OK = 0x0001
    EMPTY = 0x0003
    DISABLE = 0x0010
    QUERY_STATUS = 0x0011
    PRINT = 0x0100
    READLINE = 0x0101
    ALLOCATE = 0x0200
    BIND = 0x0201
    AUTHENTICATE = 0x0202
    READ_BLOCKS = 0x0203
    WRITE_BLOCKS = 0x0204
    BOOTFS_LOOKUP = 0x0210
    READ_IMAGE = 0x0211
    STAGE_IMAGE = 0x0212
    NET_SEND = 0x0300
    NET_RECV = 0x0301
    TPM_EXTEND = 0x0400
    TPM_QUOTE = 0x0401
    TPM_READ = 0x0402
    RM_REQUEST = 0x0500
    RM_GRANTED = 0x0501
    RM_QUEUED = 0x0502
    RM_DENIED = 0x0503
    RM_LAUNCH = 0x0504
    SENSOR_READ = 0x0600
    PUMP_AUTH = 0x0610
    PUMP_DOSE = 0x0611
    ERROR = 0xFFFF


class FrameError(ValueError):
    code = "malformed-frame"


@dataclass(frozen=True)
class Frame:
    opcode: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return encode(self.opcode, self.payload)

    @property
    def is_error(self) -> bool:
        return self.opcode == Op.ERROR

    @property
    def error_code(self) -> str:
        return self.payload.decode("ascii", "replace") if self.is_error else ""


def encode(opcode: int, payload: bytes = b"") -> bytes:
    if not 0 <= opcode <= 0xFFFF:
        raise FrameError(f"opcode {opcode} out of range")
    if len(payload) > 0xFFFF:
        raise FrameError("payload too long")
    return HEADER.pack(opcode, len(payload)) + bytes(payload)


def decode(data: bytes) -> Frame:
    if len(data) < HEADER_SIZE:
        raise FrameError("short header")
    opcode, length = HEADER.unpack_from(data)
    if length != len(data) - HEADER_SIZE:
        raise FrameError(f"length field {length} != payload {len(data) - HEADER_SIZE}")
    return Frame(opcode, bytes(data[HEADER_SIZE:]))


def error(code: str) -> bytes:
    return encode(Op.ERROR, code.encode("ascii"))


def max_payload(msg_size: int) -> int:
    return msg_size - HEADER_SIZE


def fragment(opcode: int, body: bytes, msg_size: int) -> list[bytes]:
    """Split ``body`` into encoded frames that each fit in ``msg_size``."""
    chunk = max_payload(msg_size) - FRAG.size
    if chunk <= 0:
        raise FrameError("slot too small to fragment")
    pieces = [body[i:i + chunk] for i in range(0, len(body), chunk)] or [b""]
    if len(pieces) > 0x7FFF:
        raise FrameError("too many fragments")
    out = []
    for i, piece in enumerate(pieces):
        seq = i | (FRAG_FINAL if i == len(pieces) - 1 else 0)
        out.append(encode(opcode, FRAG.pack(seq) + piece))
    return out


class Reassembler:
    """Collects fragments of one logical message."""

    def __init__(self):
        self.opcode: int | None = None
        self.parts: list[bytes] = []

    def feed(self, frame: Frame) -> bytes | None:
        """Returns the full body once the final fragment arrives."""
        if len(frame.payload) < FRAG.size:
            raise FrameError("missing fragment header")
        (seq,) = FRAG.unpack_from(frame.payload)
        index = seq & ~FRAG_FINAL
        if index != len(self.parts) or (self.opcode is not None and frame.opcode != self.opcode):
            self.reset()
            raise FrameError("fragment out of order")
        self.opcode = frame.opcode
        self.parts.append(frame.payload[FRAG.size:])
        if seq & FRAG_FINAL:
            body = b"".join(self.parts)
            self.reset()
            return body
        return None

    def reset(self) -> None:
        self.opcode = None
        self.parts = []


def unfragment(frames: list[bytes]) -> tuple[int, bytes]:
    r = Reassembler()
    for raw in frames:
        f = decode(raw)
        body = r.feed(f)
        if body is not None:
            return f.opcode, body
    raise FrameError("no final fragment")

"""TPM root of trust: PCR bank, quotes, the ROM bootloader and the TPM mediator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Collection, Mapping, Optional, Union

from . import frames
from .crypto import DIGEST_SIZE, hash_bytes, mac, mac_verify
from .frames import Op

ZERO_DIGEST = bytes(DIGEST_SIZE)
FRESHNESS_CONST = b"\xf5" * DIGEST_SIZE
NONCE_SIZE = 16


class AttestationError(Exception):
    code = "attestation-error"


class BadIndex(AttestationError):
    code = "bad-index"


class EmptySelection(AttestationError):
    code = "empty-selection"


class ImageMissing(AttestationError):
    code = "image-missing"


class ForbiddenExtend(AttestationError):
    code = "forbidden-extend"


def H(data: bytes) -> bytes:
    return hash_bytes(data)


def extend_value(old: bytes, measurement: bytes) -> bytes:
    return H(old + measurement)


def boot_pcr(image_digest: bytes) -> bytes:
    """PCR value of a domain right after its bootloader measured ``image_digest``."""
    return extend_value(ZERO_DIGEST, image_digest)


def used_pcr(image_digest: bytes) -> bytes:
    """PCR value once the domain's service has marked itself used."""
    return extend_value(boot_pcr(image_digest), FRESHNESS_CONST)


class PcrBank:
    def __init__(self, size: int):
        self.registers = [ZERO_DIGEST] * size

    def __len__(self):
        return len(self.registers)

    def _check(self, index: int) -> None:
        if not 0 <= index < len(self.registers):
            raise BadIndex(f"no PCR {index}")

    def read(self, index: int) -> bytes:
        self._check(index)
        return self.registers[index]

    def extend(self, index: int, digest: bytes) -> bytes:
        self._check(index)
        if len(digest) != DIGEST_SIZE:
            raise ValueError("measurements are 32-byte digests")
        self.registers[index] = extend_value(self.registers[index], digest)
        return self.registers[index]

    def reset(self, index: int) -> None:
        # reachable only from the ROM bootloader's locality
        self._check(index)
        self.registers[index] = ZERO_DIGEST

    def power_on(self) -> None:
        self.registers = [ZERO_DIGEST] * len(self.registers)


def _quote_message(nonce: bytes, selection: tuple, values: tuple) -> bytes:
    head = nonce + struct.pack("<H", len(selection)) + b"".join(struct.pack("<H", i) for i in selection)
    return head + b"".join(values)


@dataclass(frozen=True)
class Quote:
    nonce: bytes
    selection: tuple
    values: tuple
    mac: bytes

    def to_bytes(self) -> bytes:
        return _quote_message(self.nonce, self.selection, self.values) + self.mac

    @classmethod
    def from_bytes(cls, data: bytes) -> "Quote":
        nonce = data[:NONCE_SIZE]
        (count,) = struct.unpack_from("<H", data, NONCE_SIZE)
        off = NONCE_SIZE + 2
        selection = tuple(struct.unpack_from("<H", data, off + 2 * i)[0] for i in range(count))
        off += 2 * count
        values = tuple(data[off + DIGEST_SIZE * i: off + DIGEST_SIZE * (i + 1)] for i in range(count))
        off += DIGEST_SIZE * count
        tag = data[off:off + DIGEST_SIZE]
        if len(tag) != DIGEST_SIZE or len(nonce) != NONCE_SIZE:
            raise ValueError("truncated quote")
        return cls(nonce, selection, values, tag)


def quote(bank: PcrBank, nonce: bytes, selection, device_key: bytes) -> Quote:
    sel = tuple(sorted(set(selection)))
    if not sel:
        raise EmptySelection("quote needs at least one PCR")
    if len(nonce) != NONCE_SIZE:
        raise ValueError(f"nonce must be {NONCE_SIZE} bytes")
    values = tuple(bank.read(i) for i in sel)
    return Quote(nonce, sel, values, mac(device_key, _quote_message(nonce, sel, values)))


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: Optional[str] = None  # "mac" | "nonce" | "pcr-mismatch"

    def __bool__(self):
        return self.accepted


ACCEPT = Verdict(True)

Expected = Mapping[int, Union[bytes, Collection[bytes]]]


def verify_quote(q: Quote, expected: Expected, nonce: bytes, device_key: bytes) -> Verdict:
    if not mac_verify(device_key, _quote_message(q.nonce, q.selection, q.values), q.mac):
        return Verdict(False, "mac")
    if q.nonce != nonce:
        return Verdict(False, "nonce")
    got = dict(zip(q.selection, q.values))
    for index, want in expected.items():
        options = {want} if isinstance(want, (bytes, bytearray)) else set(want)
        if got.get(index) not in options:
            return Verdict(False, "pcr-mismatch")
    return ACCEPT


@dataclass(frozen=True)
class BootImage:
    name: str
    payload: bytes

    def __post_init__(self):
        if len(self.name.encode()) > 16:
            raise ValueError(f"image name {self.name!r} longer than 16 bytes")

    @property
    def digest(self) -> bytes:
        return H(self.payload)


def bootload(domain, image: Optional[BootImage], bank: PcrBank) -> None:
    """ROM bootloader: wipe the domain, measure the image, start it."""
    if image is None:
        raise ImageMissing(f"no image for domain {domain.id}")
    domain.memory[:] = bytes(len(domain.memory))
    bank.reset(domain.pcr_index)
    bank.extend(domain.pcr_index, image.digest)
    domain.image = image
    domain.state = "running"


class TpmMediator:
    """Serialises TPM requests arriving on per-domain permanent queues.

    A domain may extend only its own PCR; quotes may cover any PCRs.
    """

    def __init__(self, bank: PcrBank, device_key: bytes, pcr_of: Mapping[int, int]):
        self.bank = bank
        self.device_key = device_key
        self.pcr_of = dict(pcr_of)

    def handle(self, domain_id: int, raw: bytes) -> tuple[bytes, dict]:
        """Process one request; returns (response frame, trace detail)."""
        try:
            f = frames.decode(raw)
        except frames.FrameError:
            return frames.error("malformed-frame"), {"op": "malformed"}
        try:
            if f.opcode == Op.TPM_EXTEND:
                index, digest = struct.unpack_from("<H", f.payload)[0], f.payload[2:]
                if index != self.pcr_of.get(domain_id):
                    raise ForbiddenExtend(f"domain {domain_id} may not extend PCR {index}")
                value = self.bank.extend(index, digest)
                return frames.encode(Op.OK, value), {"op": "extend", "pcr": index,
                                                     "measurement": digest.hex()}
            if f.opcode == Op.TPM_QUOTE:
                nonce = f.payload[:NONCE_SIZE]
                (count,) = struct.unpack_from("<H", f.payload, NONCE_SIZE)
                sel = [struct.unpack_from("<H", f.payload, NONCE_SIZE + 2 + 2 * i)[0] for i in range(count)]
                q = quote(self.bank, nonce, sel, self.device_key)
                return frames.encode(Op.OK, q.to_bytes()), {"op": "quote", "selection": list(q.selection)}
            if f.opcode == Op.TPM_READ:
                (index,) = struct.unpack_from("<H", f.payload)
                return frames.encode(Op.OK, self.bank.read(index)), {"op": "read", "pcr": index}
        except (AttestationError, struct.error, ValueError) as exc:
            code = getattr(exc, "code", "bad-request")
            return frames.error(code), {"op": "rejected", "error": code}
        return frames.error("bad-opcode"), {"op": "rejected", "error": "bad-opcode"}


def extend_request(index: int, digest: bytes) -> bytes:
    return frames.encode(Op.TPM_EXTEND, struct.pack("<H", index) + digest)


def quote_request(nonce: bytes, selection) -> bytes:
    sel = list(selection)
    return frames.encode(Op.TPM_QUOTE, nonce + struct.pack("<H", len(sel))
                         + b"".join(struct.pack("<H", i) for i in sel))

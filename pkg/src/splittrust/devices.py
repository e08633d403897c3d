"""Emulated I/O devices and the in-process peers they talk to.

Devices are owned by exactly one I/O domain (the untrusted workload store is
the exception: it is the untrusted domain's script source).  Every externally
visible side effect is reported through ``emit`` so it lands in the trace.
"""

from __future__ import annotations

import json
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import attestation
from .crypto import DIGEST_SIZE, hash_bytes, mac, mac_verify

BLOCK_SIZE = 512

Emit = Callable[..., None]


def _noop(event: str, **detail) -> None:
    pass


class DeviceError(Exception):
    code = "device-error"


class LinkDown(DeviceError):
    code = "link-down"


class PumpAuthError(DeviceError):
    code = "pump-auth"


class BadMagic(DeviceError):
    code = "bad-magic"


class NotFound(DeviceError):
    code = "not-found"


# ---------------------------------------------------------------------------
# serial


class SerialOut:
    def __init__(self, emit: Emit = _noop):
        self.sink: list[str] = []
        self.emit = emit

    def print(self, text: str) -> None:
        self.sink.append(text)
        self.emit("DeviceEffect", device="serial_out", op="print", text=text)

    @property
    def text(self) -> str:
        return "".join(self.sink)


class SerialIn:
    def __init__(self, lines=(), emit: Emit = _noop):
        self.lines = deque(lines)
        self.emit = emit
        self.consumed: list[str] = []

    def inject(self, line: str) -> None:
        self.lines.append(line)

    def readline(self) -> Optional[str]:
        if not self.lines:
            return None
        line = self.lines.popleft()
        self.consumed.append(line)
        self.emit("DeviceEffect", device="serial_in", op="readline", text=line)
        return line


# ---------------------------------------------------------------------------
# storage and the boot filesystem

BOOTFS_MAGIC = b"STFS"
BOOTFS_HEADER = struct.Struct("<4sI")
BOOTFS_ENTRY = struct.Struct("<16sII32s8x")
BOOTFS_TABLE_BLOCKS = 2


@dataclass(frozen=True)
class BootFsEntry:
    name: str
    offset: int  # first block
    length: int  # bytes
    digest: bytes


class Storage:
    def __init__(self, blocks: int = 2048, boot_blocks: int = 256, emit: Emit = _noop):
        if boot_blocks < BOOTFS_TABLE_BLOCKS + 1 or boot_blocks > blocks:
            raise ValueError("boot partition too small")
        self.n_blocks = blocks
        self.boot_blocks = boot_blocks
        self.data = bytearray(blocks * BLOCK_SIZE)
        self.emit = emit
        self.touched: list[tuple] = []  # (op, first, count) of client I/O

    def read(self, first: int, count: int) -> bytes:
        self._check(first, count)
        return bytes(self.data[first * BLOCK_SIZE:(first + count) * BLOCK_SIZE])

    def write(self, first: int, data: bytes) -> None:
        count = -(-len(data) // BLOCK_SIZE)
        self._check(first, count)
        padded = data + bytes(count * BLOCK_SIZE - len(data))
        self.data[first * BLOCK_SIZE:first * BLOCK_SIZE + len(padded)] = padded

    def _check(self, first: int, count: int) -> None:
        if first < 0 or count < 0 or first + count > self.n_blocks:
            raise DeviceError(f"blocks {first}+{count} outside device")


def format_bootfs(dev: Storage, images: dict) -> list[BootFsEntry]:
    """Write ``images`` (name -> payload bytes) into the boot partition."""
    capacity = (BOOTFS_TABLE_BLOCKS * BLOCK_SIZE - BOOTFS_HEADER.size) // BOOTFS_ENTRY.size
    if len(images) > capacity:
        raise ValueError(f"boot table holds at most {capacity} images")
    entries = []
    block = BOOTFS_TABLE_BLOCKS
    for name in sorted(images):
        payload = images[name]
        blocks = max(1, -(-len(payload) // BLOCK_SIZE))
        if block + blocks > dev.boot_blocks:
            raise ValueError("boot partition full")
        dev.write(block, payload)
        entries.append(BootFsEntry(name, block, len(payload), hash_bytes(payload)))
        block += blocks
    table = BOOTFS_HEADER.pack(BOOTFS_MAGIC, len(entries)) + b"".join(
        BOOTFS_ENTRY.pack(e.name.encode().ljust(16, b"\0"), e.offset, e.length, e.digest) for e in entries
    )
    dev.write(0, table.ljust(BOOTFS_TABLE_BLOCKS * BLOCK_SIZE, b"\0"))
    return entries


def bootfs_entries(dev: Storage) -> list[BootFsEntry]:
    raw = dev.read(0, BOOTFS_TABLE_BLOCKS)
    magic, count = BOOTFS_HEADER.unpack_from(raw)
    if magic != BOOTFS_MAGIC:
        raise BadMagic("boot partition not formatted")
    out = []
    for i in range(count):
        name, offset, length, digest = BOOTFS_ENTRY.unpack_from(raw, BOOTFS_HEADER.size + i * BOOTFS_ENTRY.size)
        out.append(BootFsEntry(name.rstrip(b"\0").decode(), offset, length, digest))
    return out


def bootfs_lookup(dev: Storage, name: str) -> BootFsEntry:
    for e in bootfs_entries(dev):
        if e.name == name:
            return e
    raise NotFound(name)


def bootfs_read(dev: Storage, name: str) -> bytes:
    e = bootfs_lookup(dev, name)
    blocks = max(1, -(-e.length // BLOCK_SIZE))
    return dev.read(e.offset, blocks)[:e.length]


# ---------------------------------------------------------------------------
# network


class EchoPeer:
    """Returns every frame unchanged."""

    def __init__(self, **_):
        self.received: list[bytes] = []

    def handle(self, data: bytes) -> list[bytes]:
        self.received.append(data)
        return [data]


class BankVerifier:
    """Scripted bank server: nonce, attestation check, credential check.

    Exchange (one frame each way per step):
      client ``HELLO``            -> server ``NONCE`` + 16-byte nonce
      client ``QUOTE`` + quote + mac(bank_key, nonce || credential)
                                  -> server ``OK`` + mac(bank_key, b"ok" || nonce)
                                     or ``REJECT`` + reason
    """

    def __init__(self, device_key: str, bank_key: str, credential: str, expected_digest: str,
                 pcr_index: int, seed: int = 0, **_):
        self.device_key = bytes.fromhex(device_key)
        self.bank_key = bytes.fromhex(bank_key)
        self.credential = credential.encode()
        self.expected = attestation.boot_pcr(bytes.fromhex(expected_digest))
        self.pcr_index = pcr_index
        self.seed = seed
        self.nonce: Optional[bytes] = None
        self.counter = 0
        self.outcomes: list[str] = []
        self.received: list[bytes] = []

    def handle(self, data: bytes) -> list[bytes]:
        self.received.append(data)
        if data == b"HELLO":
            self.counter += 1
            self.nonce = hash_bytes(b"bank-nonce" + struct.pack("<QQ", self.seed, self.counter))[:16]
            return [b"NONCE" + self.nonce]
        if data.startswith(b"QUOTE") and self.nonce is not None:
            blob = data[5:]
            try:
                q = attestation.Quote.from_bytes(blob[:-DIGEST_SIZE])
            except (ValueError, struct.error):
                return self._reject("bad-quote")
            verdict = attestation.verify_quote(q, {self.pcr_index: self.expected}, self.nonce, self.device_key)
            if not verdict:
                return self._reject(verdict.reason)
            if not mac_verify(self.bank_key, self.nonce + self.credential, blob[-DIGEST_SIZE:]):
                return self._reject("credential")
            self.outcomes.append("accepted")
            nonce, self.nonce = self.nonce, None
            return [b"OK" + mac(self.bank_key, b"ok" + nonce)]
        return self._reject("protocol")

    def _reject(self, reason: str) -> list[bytes]:
        self.outcomes.append(f"rejected:{reason}")
        self.nonce = None
        return [b"REJECT" + reason.encode()]


PEERS = {"echo": EchoPeer, "bank": BankVerifier}


class Network:
    def __init__(self, peer: str = "echo", emit: Emit = _noop, link_down: bool = False, **peer_args):
        self.peer = PEERS[peer](**peer_args)
        self.rx: deque = deque()
        self.link_up = not link_down
        self.emit = emit
        self.sent: list[bytes] = []

    def send(self, data: bytes) -> None:
        if not self.link_up:
            self.emit("DeviceEffect", device="network", op="send-failed", error="link-down")
            raise LinkDown("link is down")
        self.sent.append(bytes(data))
        self.emit("DeviceEffect", device="network", op="send", length=len(data), digest=hash_bytes(data).hex()[:16])
        self.rx.extend(self.peer.handle(bytes(data)))

    def recv(self) -> Optional[bytes]:
        if not self.link_up:
            raise LinkDown("link is down")
        if not self.rx:
            return None
        data = self.rx.popleft()
        self.emit("DeviceEffect", device="network", op="recv", length=len(data))
        return data


# ---------------------------------------------------------------------------
# medical devices


class GlucoseSensor:
    def __init__(self, readings=(120,), emit: Emit = _noop):
        self.readings = list(readings) or [120]
        self.index = 0
        self.emit = emit

    def read(self) -> int:
        value = self.readings[self.index % len(self.readings)]
        self.index += 1
        self.emit("DeviceEffect", device="sensor", op="read", value=value)
        return value


class InsulinPump:
    """Accepts a dose only with a MAC over a fresh challenge."""

    def __init__(self, key: str, emit: Emit = _noop):
        self.key = bytes.fromhex(key)
        self.counter = 0
        self.challenge: Optional[bytes] = None
        self.doses: list[int] = []
        self.emit = emit

    def auth(self) -> bytes:
        self.counter += 1
        self.challenge = hash_bytes(b"pump" + struct.pack("<Q", self.counter))[:16]
        return self.challenge

    def dose(self, units: int, tag: bytes) -> None:
        challenge, self.challenge = self.challenge, None
        if challenge is None or not mac_verify(self.key, challenge + struct.pack("<H", units), tag):
            self.emit("DeviceEffect", device="pump", op="dose-rejected", units=units)
            raise PumpAuthError("bad dose authorisation")
        self.doses.append(units)
        self.emit("DeviceEffect", device="pump", op="dose", units=units)


# ---------------------------------------------------------------------------
# untrusted workload source


@dataclass
class Workload:
    """Script store for the untrusted domain; scenarios may append at runtime."""

    script: deque = field(default_factory=deque)
    results: list = field(default_factory=list)

    def push(self, *actions: dict) -> None:
        self.script.extend(actions)


def build_device(kind: str, config: dict, emit: Emit, context: dict):
    cfg = dict(config)
    if kind == "serial_out":
        return SerialOut(emit)
    if kind == "serial_in":
        return SerialIn(cfg.get("lines", []), emit)
    if kind == "storage":
        return Storage(cfg.get("blocks", 2048), cfg.get("boot_blocks", 256), emit)
    if kind == "network":
        peer = cfg.pop("peer", "echo")
        link_down = cfg.pop("link_down", False)
        if peer == "bank":
            cfg.setdefault("device_key", context["device_key"].hex())
            cfg.setdefault("seed", context.get("seed", 0))
        return Network(peer, emit, link_down, **cfg)
    if kind == "sensor":
        return GlucoseSensor(cfg.get("readings", [120]), emit)
    if kind == "pump":
        return InsulinPump(cfg["key"], emit)
    raise ValueError(f"unknown device kind {kind!r}")


def canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()

"""I/O service programs run inside I/O domains.

Every service shares one skeleton:

* a fresh service extends its own PCR with ``FRESHNESS_CONST`` (and waits for
  the TPM acknowledgement) before it even decodes its first message, so a
  quote over that PCR reveals whether the domain has served anyone since its
  last reset;
* a disabled service answers every frame with an error and never touches its
  device again until reset;
* malformed frames get an error reply, never a crash.

The storage service is *restricted*: it is not reset between clients.
Instead the resource manager partitions it and binds partitions to programs,
and a client must authenticate in every session before block I/O.
"""

from __future__ import annotations

import struct
from enum import Enum
from typing import Optional

from . import attestation, devices, frames
from .devices import BLOCK_SIZE
from .frames import Op
from .mailbox import RESOURCE_MANAGER, MailboxError
from .platform import MbRead, MbStatus, Port, poll_queue, program, send_frames, QSend


class Lifecycle(str, Enum):
    FRESH = "Fresh"
    ACTIVE = "Active"
    DISABLED = "Disabled"


LIFECYCLE_CODE = {Lifecycle.FRESH: 0, Lifecycle.ACTIVE: 1, Lifecycle.DISABLED: 2}
MAX_BLOCKS_PER_READ = 8


class Service:
    device_name = ""

    def __init__(self, port: Port):
        self.port = port
        self.device = port.device
        self.lifecycle = Lifecycle.FRESH
        specs = port.manifest.mailboxes_of(port.id)
        self.requests = [m for m in specs if m.direction == "req"]
        self.responses = {m.plane: m for m in specs if m.direction == "resp"}
        self.reassembly = {m.id: frames.Reassembler() for m in self.requests if m.plane == "data"}
        self.tpm_queue = port.queue_to("tpm")
        self.pcr = port.manifest.domain(port.id).pcr_index

    # -- skeleton ----------------------------------------------------------

    def run(self):
        i = 0
        while True:
            mb = self.requests[i % len(self.requests)]
            i += 1
            try:
                raw = yield MbRead(mb.id, quiet=True)
            except MailboxError:
                continue
            yield from self.on_raw(mb, raw)

    def mark_used(self):
        yield QSend(self.tpm_queue, attestation.extend_request(self.pcr, attestation.FRESHNESS_CONST))
        yield from poll_queue(self.tpm_queue)
        self.lifecycle = Lifecycle.ACTIVE
        self.port.trace("Freshness", pcr=self.pcr)

    def on_raw(self, mb, raw: bytes):
        if self.lifecycle is Lifecycle.FRESH:
            yield from self.mark_used()
        try:
            frame = frames.decode(raw)
            if mb.plane == "data":
                body = self.reassembly[mb.id].feed(frame)
                if body is None:
                    return
            else:
                body = frame.payload
        except frames.FrameError:
            self.port.trace("MalformedFrame", mb.id)
            yield from self.reply_error(mb.plane, "malformed-frame")
            return
        op = frame.opcode
        if op == Op.DISABLE:
            yield from self.on_disable(mb.plane)
            return
        if self.lifecycle is Lifecycle.DISABLED:
            self.port.trace("DisabledReject", mb.id, op=op)
            yield from self.reply_error(mb.plane, "disabled")
            return
        if op == Op.QUERY_STATUS:
            yield from self.reply(mb.plane, Op.OK, self.status_payload())
            return
        yield from self.handle(op, body, mb)

    def on_disable(self, plane: str):
        if self.lifecycle is Lifecycle.DISABLED:
            yield from self.reply_error(plane, "already-disabled")
            return
        self.lifecycle = Lifecycle.DISABLED
        if self.buffers_pending():
            self.port.trace("DisableWarning", reason="device buffers not empty")
        self.port.trace("ServiceDisabled")
        yield from self.reply(plane, Op.OK)

    def buffers_pending(self) -> bool:
        return False

    def status_payload(self) -> bytes:
        return struct.pack("<B", LIFECYCLE_CODE[self.lifecycle])

    def handle(self, op: int, body: bytes, mb):
        yield from self.reply_error(mb.plane, "bad-opcode")

    # -- replies -----------------------------------------------------------

    def reply(self, plane: str, opcode: int, payload: bytes = b""):
        spec = self.responses[plane]
        if spec.plane == "data":
            raws = frames.fragment(opcode, payload, spec.msg_size)
        else:
            raws = [frames.encode(opcode, payload)]
        yield from send_frames(spec.id, raws)

    def reply_error(self, plane: str, code: str):
        yield from self.reply(plane, Op.ERROR, code.encode())

    def current_owner(self, mailbox_id: str):
        status = yield MbStatus(mailbox_id)
        return status.owner


class SerialOutService(Service):
    device_name = "serial_out"

    def handle(self, op, body, mb):
        if op != Op.PRINT:
            yield from self.reply_error(mb.plane, "bad-opcode")
            return
        self.device.print(body.decode("utf-8", "replace"))
        yield from self.reply(mb.plane, Op.OK)


class SerialInService(Service):
    """READLINE blocks until a line is injected or the requester loses the mailbox."""

    device_name = "serial_in"

    def handle(self, op, body, mb):
        if op != Op.READLINE:
            yield from self.reply_error(mb.plane, "bad-opcode")
            return
        requester = yield from self.current_owner(mb.id)
        while True:
            line = self.device.readline()
            if line is not None:
                yield from self.reply(mb.plane, Op.OK, line.encode()[:frames.max_payload(self.responses[mb.plane].msg_size)])
                return
            owner = yield from self.current_owner(mb.id)
            if owner != requester:
                self.port.trace("ReadlineDropped", mb.id, requester=requester)
                return


class NetworkService(Service):
    device_name = "network"

    def buffers_pending(self) -> bool:
        return bool(self.device.rx)

    def handle(self, op, body, mb):
        if op == Op.NET_SEND:
            try:
                self.device.send(body)
            except devices.LinkDown:
                yield from self.reply_error(mb.plane, "link-down")
                return
            yield from self.reply(mb.plane, Op.OK)
        elif op == Op.NET_RECV:
            try:
                data = self.device.recv()
            except devices.LinkDown:
                yield from self.reply_error(mb.plane, "link-down")
                return
            if data is None:
                yield from self.reply(mb.plane, Op.EMPTY)
            else:
                yield from self.reply(mb.plane, Op.NET_RECV, data)
        else:
            yield from self.reply_error(mb.plane, "bad-opcode")


class SensorService(Service):
    device_name = "sensor"

    def handle(self, op, body, mb):
        if op != Op.SENSOR_READ:
            yield from self.reply_error(mb.plane, "bad-opcode")
            return
        yield from self.reply(mb.plane, Op.OK, struct.pack("<H", self.device.read()))


class PumpService(Service):
    device_name = "pump"

    def handle(self, op, body, mb):
        if op == Op.PUMP_AUTH:
            yield from self.reply(mb.plane, Op.OK, self.device.auth())
        elif op == Op.PUMP_DOSE and len(body) == 2 + 32:
            (units,) = struct.unpack_from("<H", body)
            try:
                self.device.dose(units, body[2:])
            except devices.PumpAuthError:
                yield from self.reply_error(mb.plane, "pump-auth")
                return
            yield from self.reply(mb.plane, Op.OK)
        else:
            yield from self.reply_error(mb.plane, "bad-opcode")


# ---------------------------------------------------------------------------
# storage

ALLOC = struct.Struct("<HII")
BLOCKS = struct.Struct("<IH")


class StorageError(Exception):
    def __init__(self, code: str):
        super().__init__(code)
        self.code = code


class Partitions:
    """Resource table of the restricted storage service."""

    def __init__(self, boot_blocks: int, n_blocks: int):
        self.n_blocks = n_blocks
        self.table: dict[int, list] = {0: [0, boot_blocks - 1, None]}
        self.armed: Optional[int] = None

    def allocate(self, pid: int, first: int, last: int) -> None:
        if pid == 0 or first > last or last >= self.n_blocks:
            raise StorageError("bad-range")
        if pid in self.table:
            if self.table[pid][:2] == [first, last]:
                return
            raise StorageError("overlap")
        for f, l, _ in self.table.values():
            if first <= l and f <= last:
                raise StorageError("overlap")
        self.table[pid] = [first, last, None]

    def bind(self, pid: int, credential: bytes) -> None:
        if pid not in self.table or pid == 0:
            raise StorageError("unknown-partition")
        self.table[pid][2] = credential
        self.armed = pid

    def authenticate(self, credential: bytes) -> int:
        # only the partition bound for the current grant can be unlocked
        pid = self.armed
        if pid is not None and self.table[pid][2] == credential:
            return pid
        raise StorageError("auth-failed")

    def check(self, pid: int, first: int, count: int) -> None:
        f, l, _ = self.table[pid]
        if count < 1 or first < f or first + count - 1 > l:
            raise StorageError("out-of-partition")


class StorageService(Service):
    device_name = "storage"

    def __init__(self, port: Port):
        super().__init__(port)
        self.partitions = Partitions(self.device.boot_blocks, self.device.n_blocks)
        self.auth_partition: Optional[int] = None
        self.auth_owner: Optional[int] = None
        self.ctrl_req = next(m.id for m in self.requests if m.plane == "ctrl")

    def status_payload(self) -> bytes:
        part = self.auth_partition if self.auth_partition is not None else -1
        return struct.pack("<Bh", LIFECYCLE_CODE[self.lifecycle], part)

    def on_disable(self, plane: str):
        # restricted service stays up across clients: disable ends the client's login only
        self.auth_partition = None
        self.auth_owner = None
        self.port.trace("StorageLogout")
        yield from self.reply(plane, Op.OK)

    def handle(self, op, body, mb):
        owner = yield from self.current_owner(self.ctrl_req)
        if self.auth_owner is not None and owner != self.auth_owner:
            self.auth_partition = None
            self.auth_owner = None
        try:
            if op in (Op.ALLOCATE, Op.BIND, Op.READ_IMAGE, Op.STAGE_IMAGE) and owner != RESOURCE_MANAGER:
                raise StorageError("not-rm")
            if op == Op.ALLOCATE:
                pid, first, last = ALLOC.unpack(body)
                self.partitions.allocate(pid, first, last)
                self.port.trace("StorageAllocate", partition=pid, first=first, last=last)
                yield from self.reply("ctrl", Op.OK)
            elif op == Op.BIND:
                (pid,) = struct.unpack_from("<H", body)
                self.partitions.bind(pid, body[2:34])
                self.port.trace("StorageBind", partition=pid)
                yield from self.reply("ctrl", Op.OK)
            elif op == Op.BOOTFS_LOOKUP:
                entry = devices.bootfs_lookup(self.device, body[:16].rstrip(b"\0").decode())
                yield from self.reply("ctrl", Op.OK, struct.pack("<II", entry.offset, entry.length) + entry.digest)
            elif op in (Op.READ_IMAGE, Op.STAGE_IMAGE):
                name = body[:16].rstrip(b"\0").decode()
                payload = devices.bootfs_read(self.device, name)
                self.port.trace("ImageServed", image=name, op=op)
                yield from self.reply("data", op, body[:16].ljust(16, b"\0") + payload)
                yield from self.reply("ctrl", Op.OK)
            elif op == Op.AUTHENTICATE:
                pid = self.partitions.authenticate(body[:32])
                self.auth_partition, self.auth_owner = pid, owner
                self.port.trace("StorageAuth", partition=pid, owner=owner)
                yield from self.reply("ctrl", Op.OK, struct.pack("<H", pid))
            elif op == Op.READ_BLOCKS:
                first, count = BLOCKS.unpack(body)
                pid = self._authorised(first, count)
                if count > MAX_BLOCKS_PER_READ:
                    raise StorageError("too-large")
                data = self.device.read(first, count)
                self.device.touched.append(("read", first, count, pid))
                yield from self.reply("ctrl", Op.OK, struct.pack("<H", count))
                yield from self.reply("data", Op.READ_BLOCKS, data)
            elif op == Op.WRITE_BLOCKS:
                first, count = BLOCKS.unpack_from(body)
                data = body[BLOCKS.size:]
                pid = self._authorised(first, count)
                if len(data) > count * BLOCK_SIZE:
                    raise StorageError("too-large")
                self.device.write(first, data.ljust(count * BLOCK_SIZE, b"\0"))
                self.device.touched.append(("write", first, count, pid))
                yield from self.reply("ctrl", Op.OK)
            else:
                raise StorageError("bad-opcode")
        except StorageError as err:
            yield from self.reply_error("ctrl", err.code)
        except devices.DeviceError as err:
            yield from self.reply_error("ctrl", err.code)
        except struct.error:
            yield from self.reply_error("ctrl", "malformed-frame")

    def _authorised(self, first: int, count: int) -> int:
        if self.auth_partition is None:
            raise StorageError("not-authenticated")
        self.partitions.check(self.auth_partition, first, count)
        return self.auth_partition


SERVICES = {
    "serial_out": SerialOutService,
    "serial_in": SerialInService,
    "network": NetworkService,
    "storage": StorageService,
    "sensor": SensorService,
    "pump": PumpService,
}


def _register(name: str, cls):
    @program(name)
    def run(port: Port):
        return cls(port).run()
    return run


for _name, _cls in SERVICES.items():
    _register(_name, _cls)

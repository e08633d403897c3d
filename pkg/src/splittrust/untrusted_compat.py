"""Untrusted-domain workload and its compatibility layer.

The commodity OS is replaced by a deterministic interpreter of a
*WorkloadScript*: a JSON array of action objects executed strictly in order.
The compatibility layer turns file and network actions into manager
requests, mailbox frames and DMA transfers, the way a driver stub would.

Script actions::

    {"op": "open", "resource": "storage", "ticks": 40}
    {"op": "read", "first": 1024, "count": 1}
    {"op": "write", "first": 1024, "data": "<hex>"}
    {"op": "stream", "first": 1024, "count": 64, "ops": 200}
    {"op": "net_send", "data": "<hex>", "addr": 4096}
    {"op": "net_recv", "addr": 8192, "len": 512}
    {"op": "spin", "ticks": 10}
    {"op": "close"}

Hostile actions (each is expected to fail)::

    {"op": "mb_write", "mailbox": "...", "data": "<hex>"}  (or "frame": "<Op name>", "text": ...)
    {"op": "mb_read", "mailbox": "..."}
    {"op": "status", "mailbox": "..."}
    {"op": "reset", "target": "tee1"}
    {"op": "dma", "direction": "out", "addr": ..., "len": ...}
    {"op": "auth", "credential": "<hex>"}          (inside a storage session)
    {"op": "read_foreign", "first": ..., "count": 1} (blocks outside our partition)

Every action leaves a ``Workload`` trace event with its outcome; actions
marked ``"hostile": true`` carry the flag into the event.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

from . import frames
from .frames import Op
from .mailbox import INFINITE, MailboxError
from .platform import (
    Dma,
    MbRead,
    MbStatus,
    MbWrite,
    MbYield,
    PlatformError,
    Port,
    QSend,
    Reset,
    poll_queue,
    program,
)
from .resource_manager import decode_msg, encode_msg, enc_msgs

SESSION_TICKS = 40
RENEW_MARGIN = 6
BUFFER = 0x1000
REPLY_TIMEOUT = 400


class CompatError(Exception):
    def __init__(self, code: str):
        super().__init__(code)
        self.code = code


@dataclass
class CompatSession:
    resource: str
    mailboxes: tuple
    deadline: int


class Compat:
    def __init__(self, port: Port):
        self.port = port
        self.m = port.manifest
        self.workload = port.device
        self.rm_queue = port.queue_to(0)
        self.credential = bytes.fromhex(port.config.get("credential", "00" * 32))
        self.sessions: dict[str, CompatSession] = {}
        self.session_ticks = port.config.get("session_ticks", SESSION_TICKS)

    # -- sessions ------------------------------------------------------------

    def acquire(self, resource: str, ticks: Optional[int] = None, msgs=INFINITE):
        s = self.sessions.get(resource)
        if s is not None and s.deadline - self.port.now > RENEW_MARGIN:
            return s
        if s is not None:
            yield from self.release(resource)
        ticks = ticks or self.session_ticks
        yield QSend(self.rm_queue, encode_msg(Op.RM_REQUEST, {
            "resource": resource, "msgs": enc_msgs(msgs), "ticks": ticks, "tag": "compat"}))
        since = self.port.now
        self.port.trace("CompatBlocked", resource=resource)
        while True:
            raw = yield from poll_queue(self.rm_queue)
            op, body = decode_msg(raw)
            if body.get("resource") != resource:
                continue
            if op == Op.RM_GRANTED:
                break
            if op == Op.RM_DENIED:
                self.port.trace("CompatUnblocked", resource=resource, waited=self.port.now - since,
                                outcome="denied")
                raise CompatError(body.get("reason", "denied"))
        self.port.trace("CompatUnblocked", resource=resource, waited=self.port.now - since, outcome="granted")
        s = CompatSession(resource, tuple(body["mailboxes"]), body["deadline"])
        self.sessions[resource] = s
        if resource == "storage":
            yield from self.call("storage", Op.AUTHENTICATE, self.credential)
        return s

    def release(self, resource: str):
        s = self.sessions.pop(resource, None)
        if s is None:
            return
        for mb in s.mailboxes:
            try:
                yield MbYield(mb)
            except MailboxError:
                pass

    # -- frame I/O -------------------------------------------------------------

    def call(self, device: str, op: int, body: bytes = b"", plane: str = "ctrl"):
        """Send one request to ``device`` and wait for its reply."""
        names = [f"{device}.req", f"{device}.resp"]
        if device == "storage":
            names = [f"storage.{plane}.req", f"storage.{plane}.resp"]
        req, resp = names
        spec = self.m.mailbox(req)
        raws = frames.fragment(op, body, spec.msg_size) if spec.plane == "data" else [frames.encode(op, body)]
        for raw in raws:
            yield from self._write(req, raw)
        return (yield from self.receive(resp))

    def _write(self, mb: str, raw: bytes):
        while True:
            try:
                yield MbWrite(mb, raw)
                return
            except MailboxError as err:
                if err.code != "queue-full":
                    raise CompatError(err.code)

    def receive(self, mb: str):
        data_plane = self.m.mailbox(mb).plane == "data"
        r = frames.Reassembler()
        start = self.port.now
        while True:
            try:
                raw = yield MbRead(mb)
            except MailboxError as err:
                if err.code == "queue-empty" and self.port.now - start < REPLY_TIMEOUT:
                    continue
                raise CompatError(err.code)
            f = frames.decode(raw)
            body = r.feed(f) if data_plane else f.payload
            if body is None:
                continue
            if f.opcode == Op.ERROR:
                raise CompatError(body.decode("ascii", "replace"))
            return f.opcode, body

    # -- file / network API ---------------------------------------------------------

    def storage_read(self, first: int, count: int, into: int = BUFFER):
        yield from self.acquire("storage")
        yield from self.call("storage", Op.READ_BLOCKS, struct.pack("<IH", first, count))
        _, data = yield from self.receive("storage.data.resp")
        self.port.memory[into:into + len(data)] = data
        return data

    def storage_write(self, first: int, data: bytes):
        yield from self.acquire("storage")
        count = max(1, -(-len(data) // 512))
        body = struct.pack("<IH", first, count) + data
        for raw in frames.fragment(Op.WRITE_BLOCKS, body, self.m.mailbox("storage.data.req").msg_size):
            yield from self._write("storage.data.req", raw)
        yield from self.receive("storage.ctrl.resp")

    def net_dma(self, direction: str, addr: int, length: int):
        yield from self.acquire("network")
        net = self.m.io_domain("network").id
        try:
            moved = yield Dma(net, direction, addr, length)
        except PlatformError as err:
            raise CompatError(err.code)
        while self.port.irq:
            self.port.irq.popleft()
        return moved

    # -- interpreter ---------------------------------------------------------------

    def run(self):
        while True:
            if not self.workload.script:
                yield None
                continue
            action = self.workload.script.popleft()
            try:
                detail = yield from self.perform(action)
                outcome = detail.pop("outcome", "ok")
            except CompatError as err:
                outcome, detail = err.code, {}
            except (MailboxError, PlatformError) as err:
                outcome, detail = err.code, {}
            record = {"op": action.get("op"), "outcome": outcome, "tick": self.port.now, **detail}
            if action.get("hostile"):
                record["hostile"] = True
            self.workload.results.append(record)
            self.port.trace("Workload", action.get("mailbox"), **{k: v for k, v in record.items() if k != "tick"})

    def _frame(self, a: dict) -> bytes:
        if "data" in a:
            return bytes.fromhex(a["data"])
        op = Op[a.get("frame", "PRINT")]
        body = a.get("text", "pwned").encode()
        spec = self.m.mailbox(a["mailbox"])
        if spec.plane == "data":
            return frames.fragment(op, body, spec.msg_size)[0]
        return frames.encode(op, body)

    def perform(self, a: dict):
        op = a.get("op")
        if op == "spin":
            for _ in range(a.get("ticks", 1)):
                yield None
            return {}
        if op == "open":
            yield from self.acquire(a["resource"], a.get("ticks"))
            return {}
        if op == "close":
            for resource in sorted(self.sessions):
                yield from self.release(resource)
            return {}
        if op == "read":
            data = yield from self.storage_read(a["first"], a.get("count", 1))
            return {"length": len(data)}
        if op == "write":
            yield from self.storage_write(a["first"], bytes.fromhex(a["data"]))
            return {}
        if op == "stream":
            done = 0
            for i in range(a.get("ops", 1)):
                first = a["first"] + i % a.get("count", 1)
                yield from self.storage_read(first, 1)
                done += 1
                self.port.trace("StreamRead", block=first)
            return {"reads": done}
        if op == "net_send":
            data = bytes.fromhex(a["data"])
            addr = a.get("addr", BUFFER)
            self.port.memory[addr:addr + len(data)] = data
            moved = yield from self.net_dma("out", addr, len(data))
            return {"length": moved}
        if op == "net_recv":
            moved = yield from self.net_dma("in", a.get("addr", BUFFER), a.get("len", 512))
            return {"length": moved}
        # hostile probes ------------------------------------------------------
        if op == "mb_write":
            yield MbWrite(a["mailbox"], self._frame(a))
            return {"outcome": "succeeded"}
        if op == "mb_read":
            data = yield MbRead(a["mailbox"])
            return {"outcome": "succeeded", "length": len(data)}
        if op == "status":
            status = yield MbStatus(a["mailbox"])
            return {"outcome": "dummy" if status.is_dummy else "leaked", "owner": status.owner}
        if op == "reset":
            result = yield Reset(self.m.domain(a["target"]).id)
            return {"outcome": result.status}
        if op == "dma":
            net = self.m.io_domain("network").id
            moved = yield Dma(net, a.get("direction", "out"), a["addr"], a.get("len", 16))
            return {"outcome": "succeeded", "length": moved}
        if op == "auth":
            yield from self.acquire("storage")
            yield from self.call("storage", Op.AUTHENTICATE, bytes.fromhex(a["credential"]))
            return {"outcome": "succeeded"}
        if op == "read_foreign":
            data = yield from self.storage_read(a["first"], a.get("count", 1))
            return {"outcome": "succeeded", "length": len(data)}
        raise CompatError("unknown-op")


@program("untrusted")
def untrusted(port: Port):
    return Compat(port).run()

"""The assembled machine: domains, mailboxes, permanent queues, PMU, arbiter.

Domain software is written as generator functions.  Each ``yield`` hands one
hardware *action* to the machine; that action is executed inside the domain's
quantum and its result (or error) is delivered when the generator resumes in
its next quantum.  ``yield None`` is an idle/compute tick.  Local computation
between yields is free, so a domain performs exactly one hardware primitive
per tick.

Tick order:

1. ``expire_check`` on every mailbox
2. arbiter routes recomputed
3. the TPM mediator serves requests queued in earlier ticks
4. scheduled input injections and tick hooks
5. one quantum per running domain, ascending id
"""

from __future__ import annotations

import json
import math
import random
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Optional

from . import attestation, devices, frames, guards
from .attestation import BootImage, PcrBank, TpmMediator
from .crypto import hash_bytes
from .frames import Op
from .guards import Route
from .mailbox import (
    INFINITE,
    RESOURCE_MANAGER,
    Mailbox,
    MailboxError,
    MailboxStatus,
    NoAccess,
    Quota,
)
from .manifest import DomainKind, DomainSpec, Manifest


class PlatformError(Exception):
    code = "platform-error"


class NotRm(PlatformError):
    code = "not-rm"


class UnknownDomain(PlatformError):
    code = "unknown-domain"


class NoArbiter(PlatformError):
    code = "no-arbiter"


class RouteDisabled(PlatformError):
    code = "route-disabled"


class WindowViolation(PlatformError):
    code = "window-violation"


class QueueError(PlatformError):
    code = "queue-error"


class BadAction(PlatformError):
    code = "bad-action"


# ---------------------------------------------------------------------------
# actions


@dataclass(frozen=True)
class MbWrite:
    mailbox: str
    data: bytes


@dataclass(frozen=True)
class MbRead:
    mailbox: str
    quiet: bool = False


@dataclass(frozen=True)
class MbStatus:
    mailbox: str
    quiet: bool = False


@dataclass(frozen=True)
class MbYield:
    mailbox: str


@dataclass(frozen=True)
class Delegate:
    mailbox: str
    target: int
    quota: Quota


@dataclass(frozen=True)
class QSend:
    queue: str
    data: bytes


@dataclass(frozen=True)
class QRecv:
    queue: str


@dataclass(frozen=True)
class Reset:
    target: int
    image: Optional[str] = None


@dataclass(frozen=True)
class Dma:
    io_domain: int
    direction: str  # "in" | "out"
    addr: int
    length: int


@dataclass(frozen=True)
class Bootload:
    name: str
    payload: bytes


@dataclass(frozen=True)
class ResetResult:
    status: str  # "ok" | "blocked"
    blocker: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


# ---------------------------------------------------------------------------
# trace


def _jsonable(value):
    if isinstance(value, (bytes, bytearray)):
        return bytes(value).hex()
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return [_jsonable(v) for v in items]
    if hasattr(value, "value") and not isinstance(value, (int, str)):
        return value.value
    return value


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    event: str
    domain: Optional[int] = None
    mailbox: Optional[str] = None
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"tick": self.tick, "event": self.event, "domain": self.domain,
                "mailbox": self.mailbox, "detail": _jsonable(self.detail)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "TraceEvent":
        return cls(d["tick"], d["event"], d.get("domain"), d.get("mailbox"), d.get("detail", {}))


def dump_trace(events, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")


def load_trace(path) -> list[TraceEvent]:
    with open(path, encoding="utf-8") as fh:
        return [TraceEvent.from_dict(json.loads(line)) for line in fh if line.strip()]


def trace_bytes(events) -> bytes:
    return "".join(ev.to_json() + "\n" for ev in events).encode()


# ---------------------------------------------------------------------------
# permanent queues


class PermanentQueue:
    """Point-to-point bidirectional hardware queue; never delegated."""

    def __init__(self, spec):
        self.spec = spec
        self.inbox: dict[Any, deque] = {spec.a: deque(), spec.b: deque()}
        self.seq = 0

    def other(self, end):
        return self.spec.b if end == self.spec.a else self.spec.a

    def send(self, sender, data: bytes, tick: int) -> None:
        if sender not in self.inbox:
            raise QueueError(f"{sender} is not an endpoint of {self.spec.id}")
        if len(data) > self.spec.msg_size:
            raise QueueError(f"{len(data)} bytes exceeds {self.spec.msg_size}")
        box = self.inbox[self.other(sender)]
        if len(box) >= self.spec.depth:
            raise QueueError(f"{self.spec.id} full")
        self.seq += 1
        box.append((tick, self.seq, bytes(data)))

    def recv(self, receiver) -> Optional[bytes]:
        if receiver not in self.inbox:
            raise QueueError(f"{receiver} is not an endpoint of {self.spec.id}")
        box = self.inbox[receiver]
        return box.popleft()[2] if box else None

    def clear(self, end) -> None:
        self.inbox[end].clear()


# ---------------------------------------------------------------------------
# programs

Program = Callable[["Port"], Generator]
PROGRAMS: dict[str, Program] = {}


def program(name: str):
    def register(fn: Program) -> Program:
        PROGRAMS[name] = fn
        return fn
    return register


def _load_programs() -> None:
    # program modules register themselves on import
    from . import apps, io_services, resource_manager, untrusted_compat  # noqa: F401


@dataclass
class Domain:
    spec: DomainSpec
    memory: bytearray
    state: str = "off"  # off | booting | running | halted
    image: Optional[BootImage] = None
    program: Optional[Generator] = None
    started: bool = False
    pending: tuple = (None, None)
    irq: deque = field(default_factory=deque)
    port: Optional["Port"] = None

    @property
    def id(self) -> int:
        return self.spec.id

    @property
    def pcr_index(self) -> int:
        return self.spec.pcr_index


class Port:
    """What a program running in a domain can see without spending a tick."""

    def __init__(self, machine: "Machine", domain: Domain):
        self._m = machine
        self._d = domain
        self.id = domain.id
        self.name = domain.spec.name
        self.kind = domain.spec.kind
        self.manifest = machine.manifest
        self.rng = random.Random(f"{machine.seed}:{domain.id}")
        self._nonces = 0

    @property
    def now(self) -> int:
        return self._m.now

    @property
    def memory(self) -> bytearray:
        return self._d.memory

    @property
    def image(self) -> Optional[BootImage]:
        return self._d.image

    @property
    def config(self) -> dict:
        if self._d.image is None:
            return {}
        return dict(json.loads(self._d.image.payload).get("config", {}))

    @property
    def device(self):
        """The device hard-wired to this I/O domain (or the untrusted workload)."""
        if self.kind is DomainKind.IO:
            return self._m.devices.get(self._d.spec.device)
        if self.kind is DomainKind.UNTRUSTED:
            return self._m.workload
        return None

    @property
    def device_key(self) -> Optional[bytes]:
        # symmetric stand-in for the vendor certificate; TEE verifiers need it
        return self._m.manifest.device_key if self.kind is DomainKind.TEE else None

    @property
    def faults(self) -> list:
        # compromised-manager fault injections (CLI --inject); RM only
        return self._m.faults if self.kind is DomainKind.RESOURCE_MANAGER else []

    @property
    def irq(self) -> deque:
        return self._d.irq

    def golden_digest(self, image_name: str) -> bytes:
        return self._m.manifest.boot_image(image_name).digest

    def pcr_of(self, domain_name: str) -> int:
        return self._m.manifest.domain(domain_name).pcr_index

    def queue_to(self, other) -> Optional[str]:
        for q in self._m.queues.values():
            ends = {q.spec.a, q.spec.b}
            if self.id in ends and other in ends and (other != self.id):
                return q.spec.id
        return None

    def nonce(self) -> bytes:
        self._nonces += 1
        return hash_bytes(struct.pack("<QQQ", self._m.seed, self.id, self._nonces) + b"nonce")[:16]

    def trace(self, event: str, mailbox: Optional[str] = None, **detail) -> None:
        self._m.emit(event, self.id, mailbox, **detail)


# ---------------------------------------------------------------------------
# ROM bootloaders (firmware, not measured)


def rom_storage(port: Port):
    payload = devices.bootfs_read(port.device, port.manifest.domain(port.id).image)
    yield Bootload(port.manifest.domain(port.id).image, payload)


def _poll(action, errors=(MailboxError,)):
    while True:
        try:
            return (yield action)
        except errors:
            pass


def recv_image(port: Port, mailbox: str):
    """Collect fragments of one staged image from ``mailbox``."""
    r = frames.Reassembler()
    while True:
        raw = yield from _poll(MbRead(mailbox, quiet=True))
        try:
            body = r.feed(frames.decode(raw))
        except frames.FrameError:
            continue
        if body is not None:
            return body[:16].rstrip(b"\0").decode(), body[16:]


def rom_rm(port: Port):
    name = port.manifest.domain(port.id).image
    key = name.encode().ljust(16, b"\0")
    yield MbWrite("storage.ctrl.req", frames.encode(Op.BOOTFS_LOOKUP, key))
    reply = frames.decode((yield from _poll(MbRead("storage.ctrl.resp", quiet=True))))
    if reply.is_error:
        port.trace("BootAbort", image=name, error=reply.error_code)
        return
    yield MbWrite("storage.ctrl.req", frames.encode(Op.READ_IMAGE, key))
    got, payload = yield from recv_image(port, "storage.data.resp")
    yield from _poll(MbRead("storage.ctrl.resp", quiet=True))
    yield Bootload(got, payload)


def rom_staged(port: Port):
    got, payload = yield from recv_image(port, "storage.data.resp")
    yield Bootload(got, payload)


# ---------------------------------------------------------------------------


@dataclass
class ArbiterState:
    io_domain: int
    mailbox: str
    window: tuple
    route: Route = Route.FIFO


class Machine:
    def __init__(self, manifest: Manifest, faults=(), seed: Optional[int] = None):
        _load_programs()
        self.manifest = manifest
        self.seed = manifest.seed if seed is None else seed
        self.faults = list(faults)
        self.now = 0
        self.trace: list[TraceEvent] = []
        self.hooks: list[Callable[["Machine"], None]] = []
        self.inputs: list[tuple] = []  # (tick, device, line)
        self.domains = {d.id: Domain(d, bytearray(d.memory)) for d in manifest.domains}
        self.mailboxes = {m.id: Mailbox(m.to_config(), listener=self._on_mailbox) for m in manifest.mailboxes}
        self.queues = {q.id: PermanentQueue(q) for q in manifest.queues}
        self.bank = PcrBank(max(d.pcr_index for d in manifest.domains) + 1)
        self.tpm = TpmMediator(self.bank, manifest.device_key, {d.id: d.pcr_index for d in manifest.domains})
        self.arbiters = {a.io_domain: ArbiterState(a.io_domain, a.mailbox, a.window) for a in manifest.arbiters}
        self.workload = devices.Workload()
        self.devices: dict = {}
        self.boot_entries: list = []
        for name in manifest.images:
            if json.loads(manifest.image_payload(name))["program"] not in PROGRAMS:
                from .manifest import InvalidManifest
                raise InvalidManifest(f"image {name}: unknown program")

    # -- tracing -----------------------------------------------------------

    def emit(self, event: str, domain: Optional[int] = None, mailbox: Optional[str] = None, **detail) -> None:
        self.trace.append(TraceEvent(self.now, event, domain, mailbox, detail))

    def _on_mailbox(self, event: str, mailbox_id: str, detail: dict) -> None:
        name = {"delegated": "MailboxDelegated", "yielded": "MailboxYielded",
                "expired": "SessionExpired", "reset": "MailboxReset"}[event]
        who = detail.get("previous_owner", RESOURCE_MANAGER)
        detail = {k: v for k, v in detail.items() if k != "tick"}
        self.emit(name, who, mailbox_id, **detail)

    def _device_emitter(self, domain_id: Optional[int]):
        def emit(event: str, **detail):
            self.emit(event, domain_id, None, **detail)
        return emit

    # -- lifecycle -----------------------------------------------------------

    def power_on(self) -> None:
        """Cold start: bypasses the reset guard, models a power cycle."""
        m = self.manifest
        self.bank.power_on()
        for mb in self.mailboxes.values():
            mb.listener = None
            mb.hw_reset()
            mb.listener = self._on_mailbox
        for q in self.queues.values():
            for end in q.inbox:
                q.clear(end)
        self.devices = {}
        for d in m.domains:
            if d.kind is DomainKind.IO:
                self.devices[d.device] = devices.build_device(
                    d.device, m.devices.get(d.device, {}), self._device_emitter(d.id),
                    {"device_key": m.device_key, "seed": self.seed})
        self.workload = devices.Workload(deque(m.devices.get("untrusted", {}).get("script", [])))
        store = self.devices[m.io_domain("storage").device]
        self.boot_entries = devices.format_bootfs(store, {n: m.image_payload(n) for n in m.images})
        for line in m.devices.get("serial_in", {}).get("inputs", []):
            self.inputs.append((line["tick"], "serial_in", line["line"]))
        self.emit("PowerOn", None, None, images=len(m.images))
        storage_id = m.io_domain("storage").id
        for dom in self.domains.values():
            dom.memory[:] = bytes(len(dom.memory))
            dom.image = None
            dom.irq.clear()
            dom.port = Port(self, dom)
            if dom.id == storage_id:
                rom = rom_storage
            elif dom.id == RESOURCE_MANAGER:
                rom = rom_rm
            else:
                rom = rom_staged
            self._start(dom, rom(dom.port), "booting")

    def _start(self, dom: Domain, gen: Optional[Generator], state: str) -> None:
        dom.program = gen
        dom.started = False
        dom.pending = (None, None)
        dom.state = state

    def image_for(self, name: str) -> BootImage:
        if name not in self.manifest.images:
            raise attestation.ImageMissing(name)
        return self.manifest.boot_image(name)

    def _install(self, dom: Domain, image: BootImage) -> None:
        attestation.bootload(dom, image, self.bank)
        prog = json.loads(image.payload).get("program")
        self.emit("BootLoaded", dom.id, None, image=image.name, digest=image.digest,
                  pcr=self.bank.read(dom.pcr_index))
        factory = PROGRAMS.get(prog)
        if factory is None:
            self.emit("ProgramMissing", dom.id, None, program=prog)
            self._start(dom, None, "halted")
            return
        dom.port = Port(self, dom)
        self._start(dom, factory(dom.port), "running")

    # -- clock ---------------------------------------------------------------

    def step(self, n: int = 1) -> list[TraceEvent]:
        start = len(self.trace)
        for _ in range(n):
            self._tick()
        return self.trace[start:]

    def run_until(self, predicate: Callable[["Machine"], bool], max_ticks: int) -> bool:
        for _ in range(max_ticks):
            if predicate(self):
                return True
            self._tick()
        return predicate(self)

    def _tick(self) -> None:
        for mb in self.mailboxes.values():
            mb.expire_check(self.now)
        self._update_arbiters()
        self._serve_tpm()
        for tick, device, line in self.inputs:
            if tick == self.now and device in self.devices:
                self.devices[device].inject(line)
        for hook in list(self.hooks):
            hook(self)
        for dom_id in sorted(self.domains):
            dom = self.domains[dom_id]
            if dom.program is not None:
                self._quantum(dom)
        self.now += 1

    def _quantum(self, dom: Domain) -> None:
        value, exc = dom.pending
        dom.pending = (None, None)
        gen = dom.program
        try:
            if not dom.started:
                dom.started = True
                action = next(gen)
            elif exc is not None:
                action = gen.throw(exc)
            else:
                action = gen.send(value)
        except StopIteration:
            self.emit("ProgramExit", dom.id, None)
            self._start(dom, None, "halted")
            return
        except Exception as err:  # a crashing program halts its own domain only
            self.emit("ProgramCrash", dom.id, None, error=f"{type(err).__name__}: {err}")
            self._start(dom, None, "halted")
            return
        if action is None:
            return
        try:
            result = self._execute(dom, action)
        except (MailboxError, PlatformError, attestation.AttestationError) as err:
            if dom.program is gen:
                dom.pending = (None, err)
            return
        if dom.program is gen:
            dom.pending = (result, None)

    # -- actions ---------------------------------------------------------------

    def _execute(self, dom: Domain, a):
        now = self.now
        if isinstance(a, MbWrite):
            mb = self._mb(a.mailbox)
            try:
                mb.write(dom.id, a.data, now)
            except MailboxError as err:
                if err.code != "queue-full":
                    self.emit("MbDenied", dom.id, a.mailbox, op="write", code=err.code)
                raise
            self.emit("MbWrite", dom.id, a.mailbox, length=len(a.data), op=_opcode(a.data))
            return None
        if isinstance(a, MbRead):
            mb = self._mb(a.mailbox)
            try:
                data = mb.read(dom.id, now)
            except MailboxError as err:
                if err.code != "queue-empty" and not a.quiet:
                    self.emit("MbDenied", dom.id, a.mailbox, op="read", code=err.code)
                raise
            self.emit("MbRead", dom.id, a.mailbox, length=len(data), op=_opcode(data))
            return data
        if isinstance(a, MbStatus):
            status = self._mb(a.mailbox).read_status(dom.id, now)
            if status.is_dummy and not a.quiet:
                self.emit("StatusDummy", dom.id, a.mailbox)
            return status
        if isinstance(a, MbYield):
            self._mb(a.mailbox).yield_access(dom.id, now)
            return None
        if isinstance(a, Delegate):
            try:
                self._mb(a.mailbox).delegate(dom.id, a.target, a.quota, now)
            except MailboxError as err:
                self.emit("DelegateDenied", dom.id, a.mailbox, code=err.code, target=a.target)
                raise
            return None
        if isinstance(a, QSend):
            self._queue(a.queue).send(dom.id, a.data, now)
            return None
        if isinstance(a, QRecv):
            return self._queue(a.queue).recv(dom.id)
        if isinstance(a, Reset):
            return self.request_reset(dom.id, a.target, a.image)
        if isinstance(a, Dma):
            return self.dma_transfer(a.io_domain, a.direction, a.addr, a.length, caller=dom.id)
        if isinstance(a, Bootload):
            if dom.state != "booting":
                raise BadAction("bootload outside the ROM bootloader")
            self._install(dom, BootImage(a.name, a.payload))
            return None
        raise BadAction(f"unknown action {a!r}")

    def _mb(self, mailbox_id: str) -> Mailbox:
        try:
            return self.mailboxes[mailbox_id]
        except KeyError:
            raise BadAction(f"no mailbox {mailbox_id}") from None

    def _queue(self, queue_id: str) -> PermanentQueue:
        try:
            return self.queues[queue_id]
        except KeyError:
            raise QueueError(f"no queue {queue_id}") from None

    # -- TPM mediator ------------------------------------------------------------

    def _serve_tpm(self) -> None:
        ready = []
        for q in self.queues.values():
            if q.spec.b != "tpm":
                continue
            box = q.inbox["tpm"]
            while box and box[0][0] < self.now:
                tick, seq, data = box.popleft()
                ready.append((tick, q.spec.a, seq, q, data))
        for tick, dom_id, seq, q, data in sorted(ready, key=lambda r: r[:3]):
            response, detail = self.tpm.handle(dom_id, data)
            event = {"extend": "PcrExtend", "quote": "Quote", "read": "PcrRead"}.get(detail.get("op"), "TpmRejected")
            self.emit(event, dom_id, None, **detail)
            try:
                q.send("tpm", response, self.now)
            except QueueError:
                self.emit("TpmDropped", dom_id, None)

    # -- PMU / reset guard ---------------------------------------------------------

    def reset_blocker(self, target: int) -> Optional[str]:
        return guards.reset_guard_blocker(self.mailboxes.values(), target, self.now)

    def request_reset(self, caller: int, target: int, image: Optional[str] = None) -> ResetResult:
        if caller != RESOURCE_MANAGER:
            self.emit("ResetDenied", caller, None, target=target, code="not-rm")
            raise NotRm(f"domain {caller} cannot command the PMU")
        if target not in self.domains or target == RESOURCE_MANAGER:
            raise UnknownDomain(f"cannot reset domain {target}")
        blocker = self.reset_blocker(target)
        if blocker is not None:
            self.emit("ResetBlocked", caller, blocker, target=target)
            return ResetResult("blocked", blocker)
        dom = self.domains[target]
        name = image or dom.spec.image
        boot_image = self.image_for(name)
        for mb in self.mailboxes.values():
            if target == mb.config.fixed_end and not mb.is_default:
                self.emit("MailboxNotReset", target, mb.mailbox_id)
        for mb in guards.resettable_mailboxes(self.mailboxes.values(), target):
            if mb.config.fixed_end == target:
                mb.hw_reset()
        for q in self.queues.values():
            if target in q.inbox:
                q.clear(target)
            if q.spec.a == target and q.spec.b == "tpm":
                q.clear("tpm")
        dom.irq.clear()
        self.emit("DomainReset", caller, None, target=target, image=name)
        self._install(dom, boot_image)
        return ResetResult("ok")

    # -- arbiter / DMA -------------------------------------------------------------

    def _update_arbiters(self) -> None:
        for arb in self.arbiters.values():
            route = self.arbiter_route(arb.io_domain)
            if route is not arb.route:
                arb.route = route
                self.emit("ArbiterRoute", arb.io_domain, arb.mailbox, route=route.value)

    def arbiter_route(self, io_domain: int) -> Route:
        arb = self.arbiters.get(io_domain)
        if arb is None:
            raise NoArbiter(f"no arbiter for domain {io_domain}")
        return guards.arbiter_route(self.mailboxes[arb.mailbox], self.manifest.untrusted.id)

    def dma_transfer(self, io_domain: int, direction: str, addr: int, length: int, caller=None):
        route = self.arbiter_route(io_domain)
        arb = self.arbiters[io_domain]
        if route is not Route.DMA:
            self.emit("DmaRejected", caller, arb.mailbox, code="route-disabled", addr=addr, length=length)
            raise RouteDisabled("FIFO path active")
        lo, hi = arb.window
        if length < 0 or addr < lo or addr + length > hi:
            self.emit("DmaRejected", caller, arb.mailbox, code="window-violation", addr=addr, length=length)
            raise WindowViolation(f"[{addr:#x}, {addr + length:#x}) outside DMA window")
        unt = self.domains[self.manifest.untrusted.id]
        off = addr - unt.spec.base
        dev = self.devices[self.manifest.domain(io_domain).device]
        if direction == "out":
            dev.send(bytes(unt.memory[off:off + length]))
            moved = length
        elif direction == "in":
            data = dev.recv() or b""
            data = data[:length]
            unt.memory[off:off + len(data)] = data
            moved = len(data)
        else:
            raise BadAction(f"bad DMA direction {direction!r}")
        self.emit("DmaTransfer", io_domain, arb.mailbox, direction=direction, addr=addr, length=moved)
        unt.irq.append(("dma-done", io_domain, moved))
        self.emit("DmaInterrupt", unt.id, None, io_domain=io_domain, length=moved)
        return moved

    # -- introspection ---------------------------------------------------------------

    def domain(self, key) -> Domain:
        if isinstance(key, str):
            return self.domains[self.manifest.domain(key).id]
        return self.domains[key]

    def device(self, name: str):
        return self.devices[name]

    def events(self, name: str) -> list[TraceEvent]:
        return [e for e in self.trace if e.event == name]

    def trace_jsonl(self) -> bytes:
        return trace_bytes(self.trace)


def _opcode(data: bytes):
    if len(data) >= 4:
        return struct.unpack_from("<H", data)[0]
    return None


def build(manifest: Manifest, faults=(), seed: Optional[int] = None) -> Machine:
    """Wire a machine from ``manifest``; everything held in reset, clock at 0."""
    return Machine(manifest, faults=faults, seed=seed)


def boot(manifest: Manifest, faults=(), max_ticks: int = 5000) -> Machine:
    m = build(manifest, faults)
    m.power_on()
    m.run_until(lambda mm: bool(mm.events("BootComplete")) or bool(mm.events("BootAbort")), max_ticks)
    return m


# ---------------------------------------------------------------------------
# helpers shared by domain programs


def poll(action, errors=(MailboxError,), timeout: Optional[int] = None, port: Optional[Port] = None):
    """Repeat ``action`` until it succeeds; returns None on timeout."""
    start = port.now if port is not None else None
    while True:
        try:
            return (yield action)
        except errors:
            if timeout is not None and port is not None and port.now - start >= timeout:
                return None


def poll_queue(queue: str, timeout: Optional[int] = None, port: Optional[Port] = None):
    start = port.now if port is not None else None
    while True:
        data = yield QRecv(queue)
        if data is not None:
            return data
        if timeout is not None and port is not None and port.now - start >= timeout:
            return None


def send_frames(mailbox: str, raws: list, errors=("queue-full",)):
    """Write frames in order, retrying while the queue is full."""
    for raw in raws:
        while True:
            try:
                yield MbWrite(mailbox, raw)
                break
            except MailboxError as err:
                if err.code not in errors:
                    raise


def status_owner(status: MailboxStatus) -> int:
    return status.owner

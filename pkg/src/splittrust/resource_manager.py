"""Resource manager program.

The manager is untrusted for confidentiality and integrity: everything it
does is either checked by the hardware (mailbox ownership, reset guard) or
verified afterwards by the TEE runtime.  It boots the machine, grants
exclusive sessions from a FIFO wait list without ever preempting, configures
the restricted storage service before delegating it, and runs the shell.

Internally it is a small cooperative scheduler: each task is a generator
that yields hardware actions, and the manager advances one task per tick.

Requests and replies travel on the manager's permanent queues as frames
whose payload is compact JSON::

    RM_REQUEST {"resource": str, "msgs": int | "inf", "ticks": int, "tag": str}
    RM_GRANTED {"resource", "mailboxes": [...], "msgs", "deadline"}
    RM_QUEUED  {"resource", "position"}
    RM_DENIED  {"resource", "reason"}

Shell commands (one per input line): ``run <image>`` launches an image in a
TEE domain, ``help`` lists commands; anything else is echoed back with
``unknown command``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

from . import frames
from .frames import Op
from .mailbox import INFINITE, RESOURCE_MANAGER, MailboxError, Quota
from .manifest import DomainKind
from .platform import (
    Delegate,
    MbRead,
    MbStatus,
    MbWrite,
    PlatformError,
    Port,
    QRecv,
    QSend,
    Reset,
    poll,
    program,
)

STAGE_SLACK = 500
CHUNK = frames.max_payload(512) - frames.FRAG.size


def encode_msg(op: int, body: dict) -> bytes:
    return frames.encode(op, json.dumps(body, sort_keys=True, separators=(",", ":")).encode())


def decode_msg(raw: bytes) -> tuple[int, dict]:
    f = frames.decode(raw)
    return f.opcode, json.loads(f.payload.decode() or "{}")


def enc_msgs(v):
    return "inf" if v == INFINITE else int(v)


def dec_msgs(v):
    return INFINITE if v == "inf" else int(v)


@dataclass(frozen=True)
class Resource:
    name: str
    kind: str  # device | storage | ipc
    mailboxes: tuple
    domains: tuple  # I/O domains reset before use


@dataclass
class AccessRequest:
    requester: int
    resource: str
    msgs: float
    ticks: int
    tag: str = ""
    arrived: int = 0


@dataclass
class ActiveSession:
    request: AccessRequest
    mailboxes: tuple
    deadline: int
    started: int
    attacks_done: set = field(default_factory=set)


class Task:
    """Wraps a generator so the manager can interleave several of them."""

    def __init__(self, name: str, gen):
        self.name = name
        self.gen = gen
        self.value = None
        self.exc: Optional[BaseException] = None
        self.done = False
        self.error: Optional[BaseException] = None

    def step(self):
        """Advance until the task yields; returns True if it used the tick."""
        if self.done:
            return False
        try:
            if self.exc is not None:
                exc, self.exc = self.exc, None
                action = self.gen.throw(exc)
            else:
                value, self.value = self.value, None
                action = self.gen.send(value)
        except StopIteration:
            self.done = True
            return False
        except Exception as err:
            self.done = True
            self.error = err
            return False
        if action is None:
            return False
        try:
            self.value = yield action
        except (MailboxError, PlatformError) as err:
            self.exc = err
        return True


def derive_resources(manifest) -> dict:
    res = {}
    for d in manifest.domains_of(DomainKind.IO):
        mbs = tuple(m.id for m in manifest.mailboxes_of(d.id))
        kind = "storage" if d.device == "storage" else "device"
        res[d.device] = Resource(d.device, kind, mbs, (d.id,) if kind == "device" else ())
    if "serial_in" in res and "serial_out" in res:
        res["ui"] = Resource("ui", "device", res["serial_in"].mailboxes + res["serial_out"].mailboxes,
                             res["serial_in"].domains + res["serial_out"].domains)
    for m in manifest.mailboxes:
        if m.id.startswith("ipc."):
            peer = manifest.domain(m.fixed_end).name
            res[f"ipc:{peer}"] = Resource(f"ipc:{peer}", "ipc", (m.id,), ())
    return res


def parse_faults(specs) -> list[tuple]:
    out = []
    for spec in specs:
        kind, _, rest = spec.partition(":")
        out.append((kind, rest))
    return out


class ResourceManager:
    def __init__(self, port: Port):
        self.port = port
        self.m = port.manifest
        self.policy = self.m.policy
        self.resources = derive_resources(self.m)
        self.waiting: list[AccessRequest] = []
        self.active: list[ActiveSession] = []
        self.busy: set = set()
        self.images = {d.id: d.image for d in self.m.domains}
        self.request_queues = {}
        for q in self.m.queues:
            if q.a == RESOURCE_MANAGER and isinstance(q.b, int):
                self.request_queues[q.b] = q.id
        self.faults = parse_faults(port.faults)
        self.grant_counts: dict = {}
        self.launch_queue: list = []
        self.boot_done_at: Optional[int] = None
        self.tasks: list[Task] = []
        self.cursor = 0

    # -- boot ----------------------------------------------------------------

    def stage_boot(self):
        """Stage every remaining domain's image through the storage data plane."""
        for name in self.m.boot_order[2:]:
            dom = self.m.domain(name)
            key = dom.image.encode().ljust(16, b"\0")
            yield MbWrite("storage.ctrl.req", frames.encode(Op.BOOTFS_LOOKUP, key))
            reply = frames.decode((yield from poll(MbRead("storage.ctrl.resp", quiet=True))))
            if reply.is_error:
                self.port.trace("BootAbort", image=dom.image, domain_name=name, error=reply.error_code)
                return False
            _, length = struct.unpack_from("<II", reply.payload)
            nfrags = max(1, math.ceil((16 + length) / CHUNK))
            yield Delegate("storage.data.resp", dom.id, Quota(nfrags, self.port.now + STAGE_SLACK))
            yield MbWrite("storage.ctrl.req", frames.encode(Op.STAGE_IMAGE, key))
            yield from poll(MbRead("storage.ctrl.resp", quiet=True))
            while True:
                status = yield MbStatus("storage.data.resp", quiet=True)
                if status.owner == RESOURCE_MANAGER:
                    break
            self.port.trace("Staged", domain_name=name, image=dom.image)
        return True

    # -- main loop -----------------------------------------------------------

    def run(self):
        if not (yield from self.stage_boot()):
            return
        self.boot_done_at = self.port.now
        self.port.trace("BootComplete")
        self.tasks = [Task("intake", self.intake()), Task("monitor", self.monitor()),
                      Task("launcher", self.launcher())]
        if "ui" in self.resources:
            self.tasks.append(Task("shell", self.shell()))
        while True:
            self.dispatch()
            acted = False
            for _ in range(len(self.tasks)):
                task = self.tasks[self.cursor % len(self.tasks)]
                self.cursor += 1
                acted = yield from task.step()
                if task.done:
                    self.tasks.remove(task)
                    if task.error is not None:
                        self.port.trace("RmTaskError", task=task.name, error=f"{type(task.error).__name__}: {task.error}")
                if acted:
                    break
            if not acted:
                yield None

    # -- requests --------------------------------------------------------------

    def intake(self):
        while True:
            for requester in sorted(self.request_queues):
                queue = self.request_queues[requester]
                raw = yield QRecv(queue)
                if raw is None:
                    continue
                yield from self.accept(requester, raw)
            yield None

    def accept(self, requester: int, raw: bytes):
        queue = self.request_queues[requester]
        try:
            op, body = decode_msg(raw)
            req = AccessRequest(requester, body["resource"], dec_msgs(body["msgs"]), int(body["ticks"]),
                                body.get("tag", ""), self.port.now)
        except (frames.FrameError, ValueError, KeyError, TypeError):
            yield QSend(queue, encode_msg(Op.RM_DENIED, {"resource": None, "reason": "malformed"}))
            return
        reason = self.deny_reason(req)
        if reason:
            self.port.trace("RequestDenied", requester=requester, resource=req.resource, reason=reason)
            yield QSend(queue, encode_msg(Op.RM_DENIED, {"resource": req.resource, "reason": reason}))
            return
        self.waiting.append(req)
        self.port.trace("RequestQueued", requester=requester, resource=req.resource,
                        msgs=req.msgs, ticks=req.ticks, tag=req.tag)
        if not self.dispatch_one(req):
            position = self.waiting.index(req) if req in self.waiting else 0
            yield QSend(queue, encode_msg(Op.RM_QUEUED, {"resource": req.resource, "position": position}))

    def deny_reason(self, req: AccessRequest) -> Optional[str]:
        res = self.resources.get(req.resource)
        if res is None:
            return "unknown-resource"
        if req.ticks < 1 or req.ticks > self.policy.max_ticks:
            return "policy-denied"
        if req.msgs != INFINITE and (req.msgs < 1 or req.msgs > self.policy.max_msgs):
            return "policy-denied"
        for mb in res.mailboxes:
            if req.requester not in self.m.mailbox(mb).wired:
                return "not-wired"
        if res.kind == "storage" and self.images.get(req.requester) not in self.policy.storage_bindings:
            return "no-binding"
        return None

    def dispatch(self) -> None:
        for req in list(self.waiting):
            self.dispatch_one(req)

    def dispatch_one(self, req: AccessRequest) -> bool:
        if req not in self.waiting:
            return False
        mbs = set(self.resources[req.resource].mailboxes)
        if mbs & self.busy:
            return False
        for earlier in self.waiting[:self.waiting.index(req)]:
            if mbs & set(self.resources[earlier.resource].mailboxes):
                return False  # FIFO: never overtake a conflicting earlier request
        self.waiting.remove(req)
        self.busy |= mbs
        self.tasks.append(Task(f"grant:{req.resource}:{req.requester}", self.grant(req)))
        return True

    # -- grants ----------------------------------------------------------------

    def fault(self, kind: str, target: str) -> Optional[str]:
        for k, rest in self.faults:
            name, _, arg = rest.partition(":")
            if k == kind and name == target:
                return arg
        return None

    def grant(self, req: AccessRequest):
        res = self.resources[req.resource]
        count = self.grant_counts.get(req.resource, 0) + 1
        self.grant_counts[req.resource] = count
        self.port.trace("GrantStart", requester=req.requester, resource=req.resource)
        try:
            if res.kind == "device":
                for dom_id in res.domains:
                    yield from self.prepare_device(dom_id, count)
            elif res.kind == "storage":
                ok = yield from self.prepare_storage(req)
                if not ok:
                    self.busy -= set(res.mailboxes)
                    yield QSend(self.request_queues[req.requester],
                                encode_msg(Op.RM_DENIED, {"resource": req.resource, "reason": "storage-setup"}))
                    return
            msgs = req.msgs
            if self.fault("shrink-quota", req.resource) is not None and msgs != INFINITE:
                msgs = max(1, int(msgs) // 2)
                self.port.trace("Attack", kind="shrink-quota", target=req.resource, outcome="attempted")
            deadline = self.port.now + req.ticks
            for mb in res.mailboxes:
                yield Delegate(mb, req.requester, Quota(msgs, deadline))
            self.active.append(ActiveSession(req, res.mailboxes, deadline, deadline - req.ticks))
            self.port.trace("Granted", requester=req.requester, resource=req.resource,
                            msgs=msgs, deadline=deadline, program=self.images.get(req.requester))
            yield QSend(self.request_queues[req.requester], encode_msg(Op.RM_GRANTED, {
                "resource": req.resource, "mailboxes": list(res.mailboxes),
                "msgs": enc_msgs(msgs), "deadline": deadline}))
        except (MailboxError, PlatformError) as err:
            self.port.trace("GrantFailed", requester=req.requester, resource=req.resource, error=err.code)
            if not any(s.request is req for s in self.active):
                # mailboxes that did get delegated are tracked until they return
                self.active.append(ActiveSession(req, res.mailboxes, self.port.now, self.port.now))

    def prepare_device(self, dom_id: int, count: int):
        device = self.m.domain(dom_id).device
        skip = self.fault("skip-reset", device)
        if skip is not None and (skip == "" or int(skip) == count):
            self.port.trace("Attack", kind="skip-reset", target=device, outcome="attempted")
        else:
            while True:
                result = yield Reset(dom_id)
                if result.ok:
                    break
        inject = self.fault("inject-frame", device)
        if inject is not None:
            yield from self.inject_frame(dom_id, bytes.fromhex(inject) if inject else b"")

    def inject_frame(self, dom_id: int, raw: bytes):
        """Compromised-manager attack: use the service before the client does."""
        specs = self.m.mailboxes_of(dom_id)
        req = next(m for m in specs if m.direction == "req")
        resp = next(m for m in specs if m.direction == "resp" and m.plane == req.plane)
        if not raw:
            raw = frames.encode(Op.QUERY_STATUS)
            if req.plane == "data":
                raw = frames.fragment(Op.QUERY_STATUS, b"", req.msg_size)[0]
        yield MbWrite(req.id, raw[:req.msg_size])
        got = yield from poll(MbRead(resp.id, quiet=True), timeout=64, port=self.port)
        self.port.trace("Attack", kind="inject-frame", target=self.m.domain(dom_id).name,
                        outcome="answered" if got is not None else "silent")

    def prepare_storage(self, req: AccessRequest):
        program_name = self.images.get(req.requester)
        binding = self.policy.storage_bindings[program_name]
        allocate = struct.pack("<HII", binding.partition, binding.first, binding.last)
        for op, payload in ((Op.ALLOCATE, allocate),
                            (Op.BIND, struct.pack("<H", binding.partition) + binding.credential)):
            yield MbWrite("storage.ctrl.req", frames.encode(op, payload))
            reply = frames.decode((yield from poll(MbRead("storage.ctrl.resp", quiet=True))))
            if reply.is_error:
                self.port.trace("StorageSetupFailed", op=int(op), error=reply.error_code)
                return False
        self.port.trace("StorageBound", requester=req.requester, program=program_name,
                        partition=binding.partition)
        return True

    # -- session monitoring ------------------------------------------------------

    def monitor(self):
        while True:
            if not self.active:
                yield None
                continue
            for session in list(self.active):
                yield from self.attacks(session)
                free = True
                for mb in session.mailboxes:
                    status = yield MbStatus(mb, quiet=True)
                    if status.owner != RESOURCE_MANAGER:
                        free = False
                        break
                if free:
                    self.active.remove(session)
                    self.busy -= set(session.mailboxes)
                    self.port.trace("SessionClosed", requester=session.request.requester,
                                    resource=session.request.resource)
            yield None

    def attacks(self, session: ActiveSession):
        """Compromised-manager probes against a live session (fault injection)."""
        requester = session.request.requester
        if self.port.now >= session.deadline:
            return
        targets = [requester] + list(self.resources[session.request.resource].domains)
        for dom_id in targets:
            target_name = self.m.domain(dom_id).name
            if ("reset", dom_id) in session.attacks_done or self.fault("reset-attempt", target_name) is None:
                continue
            session.attacks_done.add(("reset", dom_id))
            result = yield Reset(dom_id)
            self.port.trace("Attack", kind="reset-attempt", target=target_name,
                            outcome="blocked" if not result.ok else "succeeded")
        for mb in session.mailboxes:
            if ("hijack", mb) not in session.attacks_done and self.fault("hijack", mb) is not None:
                session.attacks_done.add(("hijack", mb))
                try:
                    yield MbWrite(mb, frames.encode(Op.PRINT, b"hijack"))
                    outcome = "succeeded"
                except MailboxError as err:
                    outcome = err.code
                self.port.trace("Attack", kind="hijack", target=mb, outcome=outcome)
            if ("snoop", mb) not in session.attacks_done and self.fault("snoop", mb) is not None:
                session.attacks_done.add(("snoop", mb))
                status = yield MbStatus(mb)
                self.port.trace("Attack", kind="status-snoop", target=mb,
                                outcome="dummy" if status.is_dummy else "leaked")

    # -- launches ------------------------------------------------------------------

    def launcher(self):
        schedule = []
        for launch in self.policy.launches:
            for k in range(launch.count):
                schedule.append((launch.at + k * launch.period, launch.domain, launch.image))
        schedule.sort()
        while True:
            due = [s for s in schedule if s[0] <= self.port.now - self.boot_done_at]
            due += self.launch_queue
            if not due:
                yield None
                continue
            item = due[0]
            _, name, image = item
            dom = self.m.domain(name)
            result = yield Reset(dom.id, image)
            if result.ok:
                if item in schedule:
                    schedule.remove(item)
                else:
                    self.launch_queue.remove(item)
                self.images[dom.id] = image
                dropped = [r for r in self.waiting if r.requester == dom.id]
                for r in dropped:
                    self.waiting.remove(r)
                    self.port.trace("RequestDropped", requester=dom.id, resource=r.resource)
                self.port.trace("Launch", domain_name=name, image=image)
            else:
                yield None

    def pick_tee(self) -> Optional[str]:
        busy = {s.request.requester for s in self.active}
        for d in self.m.domains_of(DomainKind.TEE):
            if d.id not in busy and self.images.get(d.id) == d.image:
                return d.name
        for d in self.m.domains_of(DomainKind.TEE):
            if d.id not in busy:
                return d.name
        return None

    # -- shell ---------------------------------------------------------------------

    def ui_free(self) -> bool:
        return not (set(self.resources["ui"].mailboxes) & self.busy)

    def shell(self):
        while True:
            if not self.ui_free():
                yield None
                continue
            ok = yield from self.shell_print("> ")
            if not ok:
                continue
            line = yield from self.shell_readline()
            if line is None:
                continue
            self.port.trace("ShellCommand", line=line)
            words = line.split()
            if len(words) == 2 and words[0] == "run" and words[1] in self.m.images:
                tee = self.pick_tee()
                if tee is None:
                    yield from self.shell_print("busy\n")
                else:
                    self.launch_queue.append((0, tee, words[1]))
                    yield from self.shell_print(f"{line}\n")
            elif words == ["help"]:
                yield from self.shell_print("run <image>\n")
            else:
                yield from self.shell_print(f"{line}: unknown command\n")

    def shell_print(self, text: str):
        try:
            yield MbWrite("serial_out.req", frames.encode(Op.PRINT, text.encode()[:60]))
        except MailboxError:
            return False
        while self.ui_free():
            try:
                yield MbRead("serial_out.resp", quiet=True)
                return True
            except MailboxError:
                yield None
        return False

    def shell_readline(self):
        try:
            yield MbWrite("serial_in.req", frames.encode(Op.READLINE))
        except MailboxError:
            return None
        while self.ui_free():
            try:
                raw = yield MbRead("serial_in.resp", quiet=True)
            except MailboxError:
                yield None
                continue
            f = frames.decode(raw)
            return f.payload.decode("utf-8", "replace") if f.opcode == Op.OK else None
        return None


@program("rmanager")
def rmanager(port: Port):
    return ResourceManager(port).run()

"""Runtime library for programs running in a TEE domain.

All calls that touch hardware are generators: use them with ``yield from``
inside a domain program.  The five API groups are:

1. access: :meth:`Runtime.request_and_verify`, :meth:`Runtime.end_session`
2. I/O: ``print``, ``readline``, ``net_send``/``net_recv``,
   ``storage_read``/``storage_write``
3. attestation: :meth:`Runtime.attest`
4. IPC between TEEs: :meth:`Runtime.ipc_send`, :meth:`Runtime.ipc_recv`
5. crypto: re-exported from :mod:`splittrust.crypto`
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import attestation, frames
from .attestation import Quote
from .crypto import ae_open, ae_seal, hash_bytes, mac, mac_verify  # noqa: F401  (API group 5)
from .devices import BLOCK_SIZE
from .frames import Op
from .mailbox import INFINITE, MailboxError
from .platform import MbRead, MbStatus, MbWrite, MbYield, Port, QSend, poll_queue
from .resource_manager import dec_msgs, decode_msg, encode_msg, enc_msgs

STATUS_SLACK = 32
GRANT_TIMEOUT = 5000
REPLY_TIMEOUT = 400


class TeeError(Exception):
    code = "tee-error"

    def __init__(self, message: str = "", detail: Optional[str] = None):
        super().__init__(message or self.code)
        self.detail = detail
        self.session = None


class GrantTimeout(TeeError):
    code = "grant-timeout"


class PolicyDenied(TeeError):
    code = "policy-denied"


class StatusMismatch(TeeError):
    code = "status-mismatch"


class AttestReject(TeeError):
    code = "attest-reject"


class StaleDomain(TeeError):
    code = "stale-domain"


class AlreadyEnded(TeeError):
    code = "already-ended"


class Unverified(TeeError):
    code = "unverified"


class QuotaExhausted(TeeError):
    code = "quota-exhausted"


class ServiceError(TeeError):
    code = "service-error"


@dataclass(frozen=True)
class QuotaUpdate:
    mailbox: str
    msgs_left: float
    time_left: int


QuotaCallback = Callable[[QuotaUpdate], None]


@dataclass
class Session:
    resource: str
    mailboxes: tuple
    msgs: float
    deadline: int
    verified: bool = False
    freshness_checked: bool = False
    ended: bool = False
    left: dict = field(default_factory=dict)
    partition: Optional[int] = None

    def mailbox(self, device: str, direction: str, plane: Optional[str] = None) -> str:
        for mb in self.mailboxes:
            parts = mb.split(".")
            if parts[0] == device and parts[-1] == direction and (plane is None or plane in parts):
                return mb
        raise KeyError(f"{self.resource} has no {device} {plane or ''} {direction} mailbox")


class Runtime:
    def __init__(self, port: Port, reserve: Optional[int] = None,
                 on_quota: Optional[QuotaCallback] = None):
        self.port = port
        self.reserve = port.manifest.policy.reserve_msgs if reserve is None else reserve
        self.on_quota = on_quota
        self.rm_queue = port.queue_to(0)
        self.tpm_queue = port.queue_to("tpm")
        self.pcr = port.manifest.domain(port.id).pcr_index
        self.credential = bytes.fromhex(port.config.get("credential", "00" * 32))

    # -- 1. access -------------------------------------------------------------

    def request(self, resource: str, msgs, ticks: int, tag: str = "", timeout: int = GRANT_TIMEOUT):
        yield QSend(self.rm_queue, encode_msg(Op.RM_REQUEST, {
            "resource": resource, "msgs": enc_msgs(msgs), "ticks": ticks, "tag": tag}))
        start = self.port.now
        while self.port.now - start < timeout:
            raw = yield from poll_queue(self.rm_queue, timeout=timeout, port=self.port)
            if raw is None:
                break
            op, body = decode_msg(raw)
            if body.get("resource") != resource:
                continue
            if op == Op.RM_GRANTED:
                return Session(resource, tuple(body["mailboxes"]), dec_msgs(body["msgs"]), body["deadline"])
            if op == Op.RM_DENIED:
                raise PolicyDenied(body.get("reason", ""), body.get("reason"))
        raise GrantTimeout(f"no grant for {resource} within {timeout} ticks")

    def request_and_verify(self, resource: str, msgs, ticks: int, nonce: Optional[bytes] = None,
                           expected: Optional[dict] = None, tag: str = ""):
        """Request, then check status, attestation and (storage) authentication.

        ``expected`` maps domain name -> image name for the resource's I/O
        domains; defaults to the images the manifest declares.
        """
        session = yield from self.request(resource, msgs, ticks, tag)
        try:
            yield from self._verify(session, msgs, ticks, nonce, expected)
        except TeeError as err:
            err.session = session
            raise
        self.port.trace("SessionVerified", resource=resource, mailboxes=list(session.mailboxes))
        return session

    def acquire_fresh(self, resource: str, msgs, ticks: int, retries: int = 1, tag: str = ""):
        """request_and_verify, abandoning and re-requesting stale sessions."""
        for attempt in range(retries + 1):
            try:
                return (yield from self.request_and_verify(resource, msgs, ticks, tag=tag))
            except StaleDomain as err:
                yield from self.abandon(err.session)
                if attempt == retries:
                    raise

    def abandon(self, session: Session):
        """Give the mailboxes back without sending a single frame."""
        session.ended = True
        for mb in session.mailboxes:
            try:
                yield MbYield(mb)
            except MailboxError:
                pass
        self.port.trace("SessionAbandoned", resource=session.resource)

    def _verify(self, session: Session, msgs, ticks: int, nonce, expected):
        for mb in session.mailboxes:
            status = yield MbStatus(mb)
            too_few = msgs != INFINITE and status.msgs_left < msgs
            if status.owner != self.port.id or too_few or status.time_left < ticks - STATUS_SLACK:
                self.port.trace("VerifyFailed", mb, reason="status-mismatch", owner=status.owner,
                                msgs_left=status.msgs_left, time_left=status.time_left)
                raise StatusMismatch(f"{mb}: {status}")
            session.left[mb] = status.msgs_left
        targets = self._resource_domains(session)
        if targets:
            nonce = nonce or self.port.nonce()
            pcrs = [self.port.pcr_of(name) for name in targets]
            q = yield from self.quote(nonce, pcrs)
            for name, pcr in zip(targets, pcrs):
                image = (expected or {}).get(name, self.port.manifest.domain(name).image)
                digest = self.port.golden_digest(image)
                boot, used = attestation.boot_pcr(digest), attestation.used_pcr(digest)
                restricted = session.resource == "storage"
                want = {pcr: {boot, used}} if restricted else {pcr: boot}
                verdict = attestation.verify_quote(q, want, nonce, self.port.device_key)
                if not verdict:
                    value = dict(zip(q.selection, q.values)).get(pcr)
                    if verdict.reason == "pcr-mismatch" and value == used and not restricted:
                        self.port.trace("VerifyFailed", reason="stale-domain", domain_name=name)
                        raise StaleDomain(f"{name} was used since its last reset")
                    self.port.trace("VerifyFailed", reason="attest-reject", domain_name=name,
                                    why=verdict.reason)
                    raise AttestReject(f"{name}: {verdict.reason}", verdict.reason)
            session.freshness_checked = True
        session.verified = True
        if session.resource == "storage":
            session.partition = yield from self.authenticate(session)

    def _resource_domains(self, session: Session) -> list:
        names = []
        for mb in session.mailboxes:
            fixed = self.port.manifest.mailbox(mb).fixed_end
            dom = self.port.manifest.domain(fixed)
            if dom.device is not None and dom.name not in names:
                names.append(dom.name)
        return names

    def end_session(self, session: Session):
        """Disable the service(s), then yield every mailbox of the session."""
        if session.ended:
            raise AlreadyEnded(session.resource)
        session.ended = True
        for req in [mb for mb in session.mailboxes if mb.endswith(".req") and "data" not in mb.split(".")[1:-1]]:
            if not req.startswith("ipc."):
                resp = req[:-len("req")] + "resp"
                try:
                    yield from self._send(session, req, Op.DISABLE, b"", closing=True)
                    yield from self._await(session, resp, closing=True)
                except (MailboxError, TeeError) as err:
                    self.port.trace("DisableSkipped", req, error=getattr(err, "code", str(err)))
        for mb in session.mailboxes:
            try:
                yield MbYield(mb)
            except MailboxError as err:
                self.port.trace("YieldSkipped", mb, error=err.code)
        self.port.trace("SessionEnded", resource=session.resource)

    # -- metering ------------------------------------------------------------------

    def _metered(self, session: Session, mb: str, closing: bool) -> None:
        if not session.verified:
            raise Unverified(session.resource)
        if session.ended and not closing:
            raise AlreadyEnded(session.resource)
        left = session.left.get(mb, INFINITE)
        if left != INFINITE and not closing and left <= self.reserve:
            raise QuotaExhausted(f"{mb}: {left} left, reserve {self.reserve}")

    def _consumed(self, session: Session, mb: str) -> None:
        left = session.left.get(mb, INFINITE)
        if left != INFINITE:
            left -= 1
            session.left[mb] = left
        if self.on_quota is not None:
            self.on_quota(QuotaUpdate(mb, left, max(0, session.deadline - self.port.now)))

    def _write(self, session: Session, mb: str, raw: bytes, closing: bool = False):
        self._metered(session, mb, closing)
        while True:
            try:
                yield MbWrite(mb, raw)
                break
            except MailboxError as err:
                if err.code != "queue-full":
                    raise
        self._consumed(session, mb)

    def _read(self, session: Session, mb: str, closing: bool = False, timeout: int = REPLY_TIMEOUT):
        self._metered(session, mb, closing)
        start = self.port.now
        while True:
            try:
                raw = yield MbRead(mb)
                break
            except MailboxError as err:
                if err.code != "queue-empty" or self.port.now - start > timeout:
                    raise
        self._consumed(session, mb)
        return raw

    def _send(self, session: Session, mb: str, op: int, body: bytes, closing: bool = False):
        size = self.port.manifest.mailbox(mb).msg_size
        if self.port.manifest.mailbox(mb).plane == "data":
            raws = frames.fragment(op, body, size)
        else:
            if len(body) > frames.max_payload(size):
                raise ServiceError("payload too large for a control frame")
            raws = [frames.encode(op, body)]
        for raw in raws:
            yield from self._write(session, mb, raw, closing)

    def _await(self, session: Session, mb: str, closing: bool = False, timeout: int = REPLY_TIMEOUT):
        """Read one reply (reassembling on data planes); raises on error frames."""
        data_plane = self.port.manifest.mailbox(mb).plane == "data"
        r = frames.Reassembler()
        while True:
            raw = yield from self._read(session, mb, closing, timeout)
            f = frames.decode(raw)
            if data_plane:
                body = r.feed(f)
                if body is None:
                    continue
            else:
                body = f.payload
            if f.opcode == Op.ERROR:
                code = body.decode("ascii", "replace")
                raise ServiceError(code, code)
            return f.opcode, body

    def call(self, session: Session, device: str, op: int, body: bytes = b"", plane: Optional[str] = None,
             timeout: int = REPLY_TIMEOUT):
        req = session.mailbox(device, "req", plane)
        resp = session.mailbox(device, "resp", plane)
        yield from self._send(session, req, op, body)
        return (yield from self._await(session, resp, timeout=timeout))

    # -- 2. I/O ------------------------------------------------------------------------

    def print(self, session: Session, text: str):
        data = text.encode()
        limit = frames.max_payload(self.port.manifest.mailbox(session.mailbox("serial_out", "req")).msg_size)
        for i in range(0, max(len(data), 1), limit):
            yield from self.call(session, "serial_out", Op.PRINT, data[i:i + limit])

    def readline(self, session: Session, timeout: int = REPLY_TIMEOUT):
        _, body = yield from self.call(session, "serial_in", Op.READLINE, timeout=timeout)
        return body.decode("utf-8", "replace")

    def net_send(self, session: Session, data: bytes):
        yield from self.call(session, "network", Op.NET_SEND, data)

    def net_recv(self, session: Session, timeout: int = REPLY_TIMEOUT):
        """Next frame from the link, or None if nothing is waiting."""
        op, body = yield from self.call(session, "network", Op.NET_RECV, timeout=timeout)
        return None if op == Op.EMPTY else body

    def authenticate(self, session: Session):
        _, body = yield from self.call(session, "storage", Op.AUTHENTICATE, self.credential, plane="ctrl")
        (pid,) = struct.unpack("<H", body)
        return pid

    def storage_read(self, session: Session, first: int, count: int):
        out = b""
        for i in range(0, count, 8):
            n = min(8, count - i)
            yield from self.call(session, "storage", Op.READ_BLOCKS, struct.pack("<IH", first + i, n), plane="ctrl")
            _, body = yield from self._await(session, session.mailbox("storage", "resp", "data"))
            out += body
        return out

    def storage_write(self, session: Session, first: int, data: bytes):
        count = max(1, -(-len(data) // BLOCK_SIZE))
        body = struct.pack("<IH", first, count) + data
        yield from self._send(session, session.mailbox("storage", "req", "data"), Op.WRITE_BLOCKS, body)
        yield from self._await(session, session.mailbox("storage", "resp", "ctrl"))

    def query_status(self, session: Session, device: str, plane: Optional[str] = None):
        _, body = yield from self.call(session, device, Op.QUERY_STATUS, plane=plane)
        return body

    # -- 3. attestation -------------------------------------------------------------------

    def quote(self, nonce: bytes, pcrs):
        yield QSend(self.tpm_queue, attestation.quote_request(nonce, pcrs))
        raw = yield from poll_queue(self.tpm_queue)
        f = frames.decode(raw)
        if f.is_error:
            raise AttestReject(f.error_code, f.error_code)
        return Quote.from_bytes(f.payload)

    def attest(self, nonce: bytes):
        """Quote over this domain's own PCR, for a remote verifier."""
        return (yield from self.quote(nonce, [self.pcr]))

    # -- 4. IPC --------------------------------------------------------------------------

    def ipc_open(self, peer: str, msgs, ticks: int):
        return (yield from self.request_and_verify(f"ipc:{peer}", msgs, ticks))

    def ipc_send(self, session: Session, data: bytes):
        yield from self._write(session, session.mailboxes[0], frames.encode(Op.OK, data))

    def ipc_recv(self, mailbox: str, expected_owner: Optional[int] = None, timeout: int = REPLY_TIMEOUT):
        """Fixed-end receive: checks who holds the sender end, then reads."""
        status = yield MbStatus(mailbox)
        if expected_owner is not None and status.owner != expected_owner:
            raise StatusMismatch(f"{mailbox} owned by {status.owner}")
        start = self.port.now
        while True:
            try:
                raw = yield MbRead(mailbox)
                return frames.decode(raw).payload
            except MailboxError as err:
                if err.code != "queue-empty" or self.port.now - start > timeout:
                    raise

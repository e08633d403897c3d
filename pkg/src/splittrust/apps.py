"""Security-critical programs shipped as TEE images.

Each program reports its outcome with an ``AppResult`` trace event so
scenarios can judge it from the trace alone.
"""

from __future__ import annotations

import struct

from .crypto import mac, mac_verify
from .frames import Op
from .mailbox import INFINITE
from .platform import MbStatus, Port, program
from .tee_runtime import Runtime, ServiceError, TeeError


def _idle_until(port: Port, tick: int):
    while port.now < tick:
        yield None


@program("tee_idle")
def tee_idle(port: Port):
    return
    yield  # pragma: no cover


@program("probe")
def probe(port: Port):
    """Request one device and report whether verification passed."""
    cfg = port.config
    rt = Runtime(port)
    try:
        s = yield from rt.request_and_verify(cfg.get("resource", "serial_out"), cfg.get("msgs", 8),
                                             cfg.get("ticks", 300))
    except TeeError as err:
        port.trace("AppResult", app="probe", outcome=err.code)
        return
    yield from rt.end_session(s)
    port.trace("AppResult", app="probe", outcome="verified")


# ---------------------------------------------------------------------------
# banking


@program("banking")
def banking(port: Port):
    """Show a pre-shared secret, read the PIN, attest to the bank.

    The secret proves to the user that the UI is really held by this program;
    the bank learns the PIN only bound to a quote of this program.
    """
    cfg = port.config
    rt = Runtime(port)
    bank_key = bytes.fromhex(cfg["bank_key"])
    outcome = "ok"
    try:
        ui = yield from rt.acquire_fresh("ui", cfg.get("ui_msgs", 16), cfg.get("ui_ticks", 800))
        yield from rt.print(ui, f"secret: {cfg['secret']}\n")
        yield from rt.print(ui, "PIN? ")
        pin = yield from rt.readline(ui, timeout=cfg.get("pin_timeout", 600))
        yield from rt.end_session(ui)

        net = yield from rt.acquire_fresh("network", cfg.get("net_msgs", 32), cfg.get("net_ticks", 800))
        yield from rt.net_send(net, b"HELLO")
        reply = yield from _net_reply(rt, net)
        if not reply.startswith(b"NONCE"):
            raise ServiceError("bank protocol", "protocol")
        nonce = reply[5:21]
        q = yield from rt.attest(nonce)
        yield from rt.net_send(net, b"QUOTE" + q.to_bytes() + mac(bank_key, nonce + pin.encode()))
        reply = yield from _net_reply(rt, net)
        if reply.startswith(b"OK") and mac_verify(bank_key, b"ok" + nonce, reply[2:]):
            outcome = "ok"
        elif reply.startswith(b"REJECT"):
            outcome = "rejected:" + reply[6:].decode()
        else:
            outcome = "bad-reply"
        yield from rt.end_session(net)
    except TeeError as err:
        outcome = err.code if err.detail is None else f"{err.code}:{err.detail}"
    port.trace("AppResult", app="banking", outcome=outcome)


def _net_reply(rt: Runtime, session, tries: int = 16):
    for _ in range(tries):
        data = yield from rt.net_recv(session)
        if data is not None:
            return data
    raise ServiceError("no reply from peer", "timeout")


# ---------------------------------------------------------------------------
# insulin pump

HISTORY_ENTRY = struct.Struct("<HH")


def insulin_dose(glucose: int, target: int = 110, gain: float = 0.1, max_dose: int = 10) -> int:
    """Toy dosing policy: clamp(gain * (glucose - target), 0, max_dose), floored."""
    return int(min(max_dose, max(0, (glucose - target) * gain)))


def decode_history(block: bytes) -> list[tuple]:
    (count,) = struct.unpack_from("<H", block)
    return [HISTORY_ENTRY.unpack_from(block, 2 + 4 * i) for i in range(count)]


def encode_history(entries) -> bytes:
    return struct.pack("<H", len(entries)) + b"".join(HISTORY_ENTRY.pack(g, d) for g, d in entries)


@program("insulin")
def insulin(port: Port):
    """One dosing period: read history, sensor, dose the pump, persist history."""
    cfg = port.config
    rt = Runtime(port)
    block = cfg["history_block"]
    pump_key = bytes.fromhex(cfg["pump_key"])
    result = {"app": "insulin"}
    try:
        st = yield from rt.request_and_verify("storage", INFINITE, cfg.get("storage_ticks", 1500))
        history = decode_history((yield from rt.storage_read(st, block, 1)))
        sensor = yield from rt.acquire_fresh("sensor", 8, cfg.get("device_ticks", 300))
        _, body = yield from rt.call(sensor, "sensor", Op.SENSOR_READ)
        (glucose,) = struct.unpack("<H", body)
        yield from rt.end_session(sensor)
        dose = insulin_dose(glucose, cfg.get("target", 110), cfg.get("gain", 0.1), cfg.get("max_dose", 10))
        pump = yield from rt.acquire_fresh("pump", 8, cfg.get("device_ticks", 300))
        _, challenge = yield from rt.call(pump, "pump", Op.PUMP_AUTH)
        units = struct.pack("<H", dose)
        yield from rt.call(pump, "pump", Op.PUMP_DOSE, units + mac(pump_key, challenge + units))
        yield from rt.end_session(pump)
        history.append((glucose, dose))
        yield from rt.storage_write(st, block, encode_history(history))
        yield from rt.end_session(st)
        result.update(outcome="ok", glucose=glucose, dose=dose, history_len=len(history))
    except TeeError as err:
        result.update(outcome=err.code, error=err.detail)
    port.trace("AppResult", **result)


# ---------------------------------------------------------------------------
# contention and IPC


@program("storage_hold")
def storage_hold(port: Port):
    """Hold the storage domain for exactly ``ticks`` ticks (no early yield)."""
    cfg = port.config
    rt = Runtime(port)
    yield from _idle_until(port, port.now + cfg.get("delay", 0))
    outcome = "ok"
    session = None
    try:
        session = yield from rt.request("storage", INFINITE, cfg["ticks"], tag="hold")
        port.trace("HoldStart", deadline=session.deadline)
        # full verification may not fit in very short sessions; holding is what matters here
        for mb in session.mailboxes:
            yield from _status(port, mb)
    except TeeError as err:
        outcome = err.code
    if session is not None:
        yield from _idle_until(port, session.deadline)
    port.trace("AppResult", app="storage_hold", outcome=outcome)


def _status(port: Port, mb: str):
    status = yield MbStatus(mb)
    return status


@program("ipc_ping")
def ipc_ping(port: Port):
    cfg = port.config
    rt = Runtime(port)
    try:
        s = yield from rt.ipc_open(cfg.get("peer", "tee2"), 4, cfg.get("ticks", 200))
        yield from rt.ipc_send(s, cfg.get("message", "ping").encode())
        yield from _idle_until(port, port.now + cfg.get("linger", 20))
        yield from rt.end_session(s)
        port.trace("AppResult", app="ipc_ping", outcome="sent")
    except TeeError as err:
        port.trace("AppResult", app="ipc_ping", outcome=err.code)


@program("ipc_pong")
def ipc_pong(port: Port):
    cfg = port.config
    rt = Runtime(port)
    mailbox = f"ipc.{port.name}"
    peer = port.manifest.domain(cfg.get("peer", "tee1")).id
    while True:
        status = yield from _status(port, mailbox)
        if status.owner == peer:
            break
    try:
        data = yield from rt.ipc_recv(mailbox, expected_owner=peer, timeout=cfg.get("timeout", 200))
        port.trace("AppResult", app="ipc_pong", outcome="received", message=data.decode())
    except Exception as err:  # noqa: BLE001
        port.trace("AppResult", app="ipc_pong", outcome=getattr(err, "code", "error"))

"""End-to-end scenarios and their judges.

A scenario file (JSON, shipped under ``data/scenarios``) bundles manifest
overrides, compromised-manager fault injections, timed hooks that feed the
untrusted workload or the serial console, a stop condition and the
expectations the judge checks against the trace.
"""

from __future__ import annotations

import copy
import hashlib
import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from . import frames
from .frames import Op
from .manifest import Manifest, default_manifest
from .platform import Machine, TraceEvent, build

SCENARIO_NAMES = ("boot", "banking", "banking-tampered", "insulin", "contention")

# hostile outcomes that mean the attack worked
BREACH = {"ok", "succeeded", "leaked", "answered-owner"}


class UnknownScenario(KeyError):
    pass


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""
    offset: Optional[int] = None

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        where = f" @{self.offset}" if self.offset is not None and not self.passed else ""
        return f"{mark} {self.name}{where}: {self.detail}"


@dataclass
class ScenarioResult:
    name: str
    passed: bool
    checks: list
    phases: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    trace: list = field(default_factory=list, repr=False)

    @property
    def first_failure(self) -> Optional[Check]:
        return next((c for c in self.checks if not c.passed), None)

    def to_dict(self) -> dict:
        fail = self.first_failure
        return {
            "name": self.name,
            "passed": self.passed,
            "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail, "offset": c.offset}
                       for c in self.checks],
            "first_failure": None if fail is None else {"name": fail.name, "offset": fail.offset},
            "phases": self.phases,
            "metrics": self.metrics,
        }


# ---------------------------------------------------------------------------
# loading


def load_scenario(name: str) -> dict:
    """Scenario spec by shipped name or by path to a JSON file."""
    path = Path(name)
    if path.suffix == ".json" and path.exists():
        spec = json.loads(path.read_text())
    else:
        res = resources.files("splittrust").joinpath(f"data/scenarios/{name}.json")
        if not res.is_file():
            raise UnknownScenario(name)
        spec = json.loads(res.read_text())
    base = spec.get("base")
    if base:
        parent = load_scenario(base)
        merged = copy.deepcopy(parent)
        for key, value in spec.items():
            if key != "base":
                merged[key] = value
        spec = merged
    return spec


def prepare_manifest(spec: dict, manifest: Optional[Manifest] = None) -> Manifest:
    m = (manifest or default_manifest()).with_overrides(spec.get("overrides", {}))
    net = m.devices.get("network", {})
    if "expected_image" in net:
        # the verifier knows the digest of the genuine program, whatever gets loaded later
        digest = m.boot_image(net["expected_image"]).digest.hex()
        pcr = m.domain(net.get("pcr_domain", "tee1")).pcr_index
        m = m.with_overrides({"devices": {"network": {"expected_digest": digest, "pcr_index": pcr}}})
    if spec.get("tamper"):
        m = m.with_overrides(spec["tamper"])
    return m


# ---------------------------------------------------------------------------
# hooks


class Hook:
    """Fires once, ``delay`` ticks after the ``nth`` event matching ``when``."""

    def __init__(self, spec: dict):
        self.spec = spec
        self.when = spec["when"]
        self.nth = spec.get("nth", 1)
        self.delay = spec.get("delay", 0)
        self.pos = 0
        self.seen = 0
        self.fire_at: Optional[int] = None
        self.done = False

    def matches(self, e: TraceEvent) -> bool:
        if e.event != self.when["event"]:
            return False
        if "domain" in self.when and e.domain != self.when["domain"]:
            return False
        return all(e.detail.get(k) == v for k, v in self.when.get("match", {}).items())

    def __call__(self, m: Machine) -> None:
        if self.done:
            return
        if self.fire_at is None:
            for e in m.trace[self.pos:]:
                if self.matches(e):
                    self.seen += 1
                    if self.seen == self.nth:
                        self.fire_at = e.tick + 1 + self.delay
                        break
            self.pos = len(m.trace)
        if self.fire_at is not None and m.now >= self.fire_at:
            self.done = True
            if "push" in self.spec:
                m.workload.push(*copy.deepcopy(self.spec["push"]))
            if "input" in self.spec:
                m.devices[self.spec["input"].get("device", "serial_in")].inject(self.spec["input"]["line"])
            m.emit("HookFired", None, None, hook=self.spec.get("name", self.when["event"]))


class EventCounter:
    def __init__(self, event: str, match: Optional[dict] = None):
        self.event = event
        self.match = match or {}
        self.pos = 0
        self.count = 0

    def __call__(self, m: Machine) -> int:
        for e in m.trace[self.pos:]:
            if e.event == self.event and all(e.detail.get(k) == v for k, v in self.match.items()):
                self.count += 1
        self.pos = len(m.trace)
        return self.count


# ---------------------------------------------------------------------------
# execution


def execute(spec: dict, manifest: Optional[Manifest] = None, faults=(), max_ticks: Optional[int] = None,
            seed: Optional[int] = None) -> Machine:
    m = build(prepare_manifest(spec, manifest), faults=list(spec.get("faults", [])) + list(faults), seed=seed)
    m.hooks = [Hook(h) for h in spec.get("hooks", [])]
    m.power_on()
    limit = max_ticks or spec.get("max_ticks", 5000)
    until = spec.get("until", {"event": "BootComplete", "count": 1})
    counter = EventCounter(until["event"], until.get("match"))
    aborted = EventCounter("BootAbort")
    m.run_until(lambda mm: counter(mm) >= until.get("count", 1) or aborted(mm) > 0, limit)
    settle = spec.get("settle", 0)
    if settle:
        m.step(min(settle, max(0, limit - m.now)))
    return m


def run_scenario(name, manifest: Optional[Manifest] = None, faults=(), max_ticks: Optional[int] = None,
                 seed: Optional[int] = None) -> ScenarioResult:
    spec = load_scenario(name) if isinstance(name, str) else name
    judge = spec.get("judge", spec["name"])
    if judge == "contention":
        return run_contention(spec, manifest, faults, max_ticks, seed)
    m = execute(spec, manifest, faults, max_ticks, seed)
    checks = JUDGES[judge](m, spec.get("expect", {}))
    return ScenarioResult(spec["name"], all(c.passed for c in checks), checks, phases(m.trace), {},
                          list(m.trace))


# ---------------------------------------------------------------------------
# trace helpers


def _find(trace, event: str, **match) -> list[tuple]:
    return [(i, e) for i, e in enumerate(trace)
            if e.event == event and all(e.detail.get(k) == v for k, v in match.items())]


def _app_results(trace, app: str) -> list[tuple]:
    return _find(trace, "AppResult", app=app)


def phases(trace) -> dict:
    """Tick breakdown of the first launched program: launch, I/O, compute."""
    boot = next((e.tick for e in trace if e.event == "BootComplete"), None)
    out = {"boot": boot}
    launch = next((e for e in trace if e.event == "Launch"), None)
    if launch is None:
        return out
    names = {e.detail["domain_name"]: e.domain for e in trace if e.event == "Staged"}
    dom = next((e.detail["target"] for e in trace if e.event == "DomainReset"
                and e.detail.get("image") == launch.detail["image"]), names.get(launch.detail["domain_name"]))
    mine = [e for e in trace if e.domain == dom and e.tick >= launch.tick]
    result = next((e for e in mine if e.event == "AppResult"), None)
    verified = next((e for e in mine if e.event == "SessionVerified"), None)
    if result is None:
        return out
    io = 0
    opened: dict = {}
    for e in mine:
        if e.tick > result.tick:
            break
        if e.event == "SessionVerified":
            opened.setdefault(e.detail["resource"], e.tick)
        elif e.event == "SessionEnded" and e.detail["resource"] in opened:
            io += e.tick - opened.pop(e.detail["resource"])
    first = verified.tick if verified is not None else result.tick
    total = result.tick - launch.tick
    out.update(launch=first - launch.tick, io=io, compute=max(0, total - (first - launch.tick) - io),
               total=total)
    return out


def reference_boot_pcr(payload: bytes) -> bytes:
    """H(0^32 || H(image)) straight from hashlib."""
    return hashlib.sha256(bytes(32) + hashlib.sha256(payload).digest()).digest()


# ---------------------------------------------------------------------------
# judges


def judge_boot(m: Machine, expect: dict) -> list[Check]:
    trace = m.trace
    checks = []
    done = _find(trace, "BootComplete")
    aborted = _find(trace, "BootAbort")
    checks.append(Check("boot-complete", bool(done) and not aborted,
                        f"complete at tick {done[0][1].tick}" if done else "no BootComplete",
                        aborted[0][0] if aborted else None))
    end = done[0][0] if done else len(trace)
    loaded = [(i, e) for i, e in _find(trace, "BootLoaded") if i < end]
    order = [m.manifest.domain(e.domain).name for _, e in loaded]
    want_head = ["storage", "rm"]
    everyone = sorted(d.name for d in m.manifest.domains)
    ok = order[:2] == want_head and sorted(order) == everyone
    checks.append(Check("boot-order", ok, " -> ".join(order), None if ok else end))
    bad = []
    for i, e in loaded:
        name = e.detail["image"]
        if e.detail["pcr"] != reference_boot_pcr(m.manifest.image_payload(name)):
            bad.append((i, m.manifest.domain(e.domain).name))
    checks.append(Check("boot-pcrs", not bad and bool(loaded),
                        f"{len(loaded) - len(bad)}/{len(loaded)} PCRs match the reference hash",
                        bad[0][0] if bad else None))
    return checks


def _check_apps(trace, expect: dict) -> list[Check]:
    checks = []
    for app, want in expect.get("apps", {}).items():
        got = _app_results(trace, app)
        wants = want if isinstance(want, list) else [want]
        outcomes = [e.detail.get("outcome") for _, e in got]
        ok = outcomes == wants
        checks.append(Check(f"app:{app}", ok, f"outcomes {outcomes}",
                            None if ok else (got[0][0] if got else len(trace))))
    return checks


def _check_hostile(trace, expect: dict) -> list[Check]:
    checks = []
    hostile = [(i, e) for i, e in _find(trace, "Workload") if e.detail.get("hostile")]
    for kind in expect.get("hostile_ops", []):
        mine = [(i, e) for i, e in hostile if e.detail["op"] == kind]
        breaches = [(i, e) for i, e in mine if e.detail["outcome"] in BREACH]
        ok = bool(mine) and not breaches
        detail = ", ".join(f"{e.detail.get('mailbox') or e.mailbox or ''}{':' if e.mailbox else ''}"
                           f"{e.detail['outcome']}" for _, e in mine) or "not attempted"
        checks.append(Check(f"untrusted:{kind}", ok, detail,
                            None if ok else (breaches[0][0] if breaches else len(trace))))
    attacks = _find(trace, "Attack")
    for kind in expect.get("rm_attacks", []):
        mine = [(i, e) for i, e in attacks if e.detail["kind"] == kind]
        breaches = [(i, e) for i, e in mine if e.detail["outcome"] in BREACH]
        ok = bool(mine) and not breaches
        detail = ", ".join(f"{e.detail['target']}:{e.detail['outcome']}" for _, e in mine) or "not attempted"
        checks.append(Check(f"manager:{kind}", ok, detail,
                            None if ok else (breaches[0][0] if breaches else len(trace))))
    return checks


def _check_stale(trace, expect: dict) -> list[Check]:
    name = expect.get("stale")
    if not name:
        return []
    failed = _find(trace, "VerifyFailed", reason="stale-domain", domain_name=name)
    if not failed:
        return [Check("stale-reuse", False, f"{name} reuse went unnoticed", len(trace))]
    i, ev = failed[0]
    abandoned = next(((j, e) for j, e in _find(trace, "SessionAbandoned") if j > i and e.domain == ev.domain),
                     None)
    if abandoned is None:
        return [Check("stale-reuse", False, "stale session not abandoned", i)]
    # not one frame may reach the stale service between detection and abandonment
    leaked = [j for j, e in enumerate(trace[i:abandoned[0]], i)
              if e.event == "MbWrite" and e.domain == ev.domain and (e.mailbox or "").startswith(name)]
    ok = not leaked
    return [Check("stale-reuse", ok, f"{name} detected stale and abandoned without use",
                  leaked[0] if leaked else None)]


def _check_texts(m: Machine, expect: dict) -> list[Check]:
    checks = []
    sink = m.devices["serial_out"].text if "serial_out" in m.devices else ""
    if "secret" in expect:
        n = sink.count(expect["secret"])
        checks.append(Check("secret-shown-once", n == 1, f"secret shown {n} time(s)"))
    for bad in expect.get("absent_text", []):
        checks.append(Check(f"no-text:{bad}", bad not in sink, "absent" if bad not in sink else "present"))
    return checks


def _check_bank(m: Machine, expect: dict) -> list[Check]:
    if "bank" not in expect:
        return []
    net = m.devices.get("network")
    outcomes = list(getattr(net.peer, "outcomes", [])) if net else []
    ok = bool(outcomes) and outcomes[-1] == expect["bank"]
    return [Check("bank-verifier", ok, f"verifier outcomes {outcomes}")]


def _check_sessions(trace, expect: dict) -> list[Check]:
    checks = []
    for resource, n in expect.get("sessions_ended", {}).items():
        got = len(_find(trace, "SessionEnded", resource=resource))
        checks.append(Check(f"clean-end:{resource}", got == n, f"{got} clean end(s)"))
    return checks


def _dose(glucose: int, policy: dict) -> int:
    target, gain, cap = policy.get("target", 110), policy.get("gain", 0.1), policy.get("max_dose", 10)
    raw = (glucose - target) * gain
    return int(cap if raw > cap else 0 if raw < 0 else raw)


def _check_insulin(m: Machine, expect: dict) -> list[Check]:
    want = expect.get("history")
    if not want:
        return []
    checks = []
    results = [e for _, e in _app_results(m.trace, "insulin")]
    lengths = [e.detail.get("history_len") for e in results]
    checks.append(Check("history-grows", lengths == list(range(1, want + 1)), f"history lengths {lengths}"))
    cfg = m.manifest.image_config("insulin")
    readings = m.manifest.devices.get("sensor", {}).get("readings", [])
    expected = [(readings[k % len(readings)], _dose(readings[k % len(readings)], cfg)) for k in range(want)]
    pump = m.devices.get("pump")
    doses = list(pump.doses) if pump else []
    checks.append(Check("pump-doses", doses == [d for _, d in expected], f"doses {doses}"))
    block = m.devices["storage"].read(cfg["history_block"], 1)
    from .apps import decode_history

    try:
        stored = [tuple(x) for x in decode_history(block)]
    except Exception:  # noqa: BLE001
        stored = []
    checks.append(Check("history-persisted", stored == expected, f"{len(stored)} entries on storage"))
    return checks


def judge_generic(m: Machine, expect: dict) -> list[Check]:
    trace = m.trace
    checks = []
    checks += _check_apps(trace, expect)
    checks += _check_texts(m, expect)
    checks += _check_bank(m, expect)
    checks += _check_sessions(trace, expect)
    checks += _check_hostile(trace, expect)
    checks += _check_stale(trace, expect)
    checks += _check_insulin(m, expect)
    crashes = _find(trace, "ProgramCrash")
    checks.append(Check("no-crash", not crashes,
                        crashes[0][1].detail["error"] if crashes else "no program crashed",
                        crashes[0][0] if crashes else None))
    return checks


JUDGES = {"boot": judge_boot, "generic": judge_generic}


# ---------------------------------------------------------------------------
# contention


def blocked_gap(trace, tee: int, untrusted: int) -> list[int]:
    """Ticks the untrusted workload spent blocked inside each TEE storage session."""
    sessions = []
    for i, e in _find(trace, "Granted", resource="storage"):
        if e.detail["requester"] != tee:
            continue
        # the session starts at its first delegation; that tick fixed the deadline
        start = next(x.tick for x in trace[:i]
                     if x.event == "MailboxDelegated" and x.detail.get("target") == tee
                     and x.detail.get("deadline") == e.detail["deadline"])
        sessions.append((start, e.detail["deadline"]))
    blocked = []
    opened = None
    for e in trace:
        if e.domain != untrusted or e.detail.get("resource") != "storage":
            continue
        if e.event == "CompatBlocked":
            opened = e.tick
        elif e.event == "CompatUnblocked" and opened is not None:
            blocked.append((opened, e.tick))
            opened = None
    if opened is not None:
        blocked.append((opened, trace[-1].tick))
    gaps = []
    for lo, hi in sessions:
        gaps.append(sum(max(0, min(hi, b) - max(lo, a)) for a, b in blocked))
    return gaps


def contention_spec(spec: dict, k: int) -> dict:
    s = copy.deepcopy(spec)
    ov = s.setdefault("overrides", {})
    ov.setdefault("images", {}).setdefault("storage_hold", {}).setdefault("config", {})["ticks"] = k
    if k == 0:
        ov.setdefault("policy", {})["launches"] = []
        s["until"] = {"event": "Workload", "match": {"op": "stream"}, "count": 1}
    return s


def run_contention(spec: dict, manifest=None, faults=(), max_ticks=None, seed=None) -> ScenarioResult:
    ks = spec.get("expect", {}).get("ks", [10, 50, 200])
    tolerance = spec.get("expect", {}).get("tolerance", 1)
    checks, metrics, trace = [], {"gaps": {}}, []
    for k in ks:
        m = execute(contention_spec(spec, k), manifest, faults, max_ticks, seed)
        tee = m.manifest.domain(spec.get("expect", {}).get("tee", "tee1")).id
        gaps = blocked_gap(m.trace, tee, m.manifest.untrusted.id)
        gap = gaps[0] if gaps else 0
        metrics["gaps"][str(k)] = gap
        metrics.setdefault("stalls", {})[str(k)] = reader_stall(m.trace, tee)
        want_sessions = 0 if k == 0 else 1
        ok = len(gaps) == want_sessions and abs(gap - k) <= tolerance
        reads_after = [e for e in m.trace if e.event == "StreamRead"]
        served = k == 0 or any(e.tick >= _deadline(m.trace, tee) for e in reads_after)
        checks.append(Check(f"gap:K={k}", ok and served,
                            f"blocked {gap} ticks during a {k}-tick session"
                            + ("" if served else "; reader never resumed")))
        trace.append(TraceEvent(0, "ScenarioRun", None, None, {"k": k}))
        trace.extend(m.trace)
    return ScenarioResult(spec["name"], all(c.passed for c in checks), checks, {}, metrics, trace)


def reader_stall(trace, tee: int) -> int:
    """Ticks between the reader's last block before a TEE session and its first one after.

    Includes the manager's grant overhead on both sides, so it exceeds K.
    """
    grants = [e for e in trace if e.event == "Granted" and e.detail["requester"] == tee]
    if not grants:
        return 0
    deadline = grants[0].detail["deadline"]
    reads = [e.tick for e in trace if e.event == "StreamRead"]
    before = [t for t in reads if t <= grants[0].tick]
    after = [t for t in reads if t >= deadline]
    if not before or not after:
        return 0
    return after[0] - before[-1]


def _deadline(trace, tee: int) -> int:
    return max((e.detail["deadline"] for e in trace
                if e.event == "Granted" and e.detail["requester"] == tee), default=0)


# ---------------------------------------------------------------------------
# freshness


FRESHNESS_DEVICES = ("serial_out", "serial_in", "network")


def freshness_trial(seed: int, inject: bool, manifest: Optional[Manifest] = None) -> str:
    """One randomized trial: a probe verifies a device, maybe after a forged pre-session frame.

    Returns the probe's outcome (``verified`` or ``stale-domain`` expected).
    """
    rng = random.Random(seed)
    device = rng.choice(FRESHNESS_DEVICES)
    at = rng.randint(1, 40)
    if rng.random() < 0.5:
        opcode = rng.choice(list(Op))
        raw = frames.encode(opcode, rng.randbytes(rng.randint(0, 40)))
    else:
        raw = rng.randbytes(rng.randint(1, 60))
    spec = {
        "name": "freshness",
        "overrides": {
            "images": {"probe": {"program": "probe", "version": 1, "config": {"resource": device}}},
            "policy": {"launches": [{"domain": "tee1", "image": "probe", "at": at}]},
        },
        "until": {"event": "AppResult", "count": 1},
        "max_ticks": 2000,
    }
    faults = [f"inject-frame:{device}:{raw.hex()}"] if inject else []
    m = execute(spec, manifest, faults)
    got = _app_results(m.trace, "probe")
    return got[0][1].detail["outcome"] if got else "no-result"

"""Bounded exhaustive exploration of the mailbox / reset-guard / arbiter composite.

Breadth-first search over every interleaving of mailbox operations issued by
every domain, up to an action horizon.  Each transition is executed twice:
once through the production :class:`~splittrust.mailbox.Mailbox` (plus the
production reset guard and arbiter), and once through a small abstract model
written independently in this module.  Properties are evaluated on the
production side; any disagreement between the two sides is reported as a
conformance violation ``M``.

The mailbox behaviour does not depend on absolute time, only on the time left
in a session, so states are canonicalised relative to the current tick.  That
keeps the reachable set small enough to enumerate completely.

Property ids: ``P1`` .. ``P13`` (mailbox theorems), ``G`` (reset-guard
soundness), ``A`` (arbiter exclusivity), ``M`` (model conformance).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from . import guards
from .mailbox import (
    DUMMY_STATUS,
    INFINITE,
    RESOURCE_MANAGER,
    FixedRole,
    Mailbox,
    MailboxConfig,
    MailboxError,
    Quota,
)

PROPERTY_IDS = [f"P{i}" for i in range(1, 14)] + ["G", "A", "M"]

PROPERTY_TEXT = {
    "P1": "outsiders cannot change owner or quota",
    "P2": "owner keeps access until yield or quota expiry",
    "P3": "authorized read/write is FIFO-correct",
    "P4": "unauthorized read/write is refused and leaves the queue intact",
    "P5": "owner cannot exceed its delegated message count",
    "P6": "expired quota means the resource manager owns the mailbox",
    "P7": "owner reads its exact status",
    "P8": "fixed end reads the exact status",
    "P9": "reset leaves the resource manager as owner",
    "P10": "ownership leaves the resource manager only by its own delegation",
    "P11": "ownership moves only between the resource manager and one delegate",
    "P12": "non-parties read only the dummy status",
    "P13": "queue wiped on delegation, yield and expiration",
    "G": "no party to a live session is reset",
    "A": "DMA path enabled only while the untrusted domain holds the data plane",
    "M": "production implementation matches the abstract model",
}


class BoundsTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Bounds:
    n_domains: int = 4
    depth: int = 2
    msg_quotas: tuple = (1, 2, INFINITE)
    time_quotas: tuple = (1, 2, 3, 4)
    horizon: int = 8
    msg_size: int = 2
    roles: tuple = (FixedRole.READER, FixedRole.WRITER)
    ceiling: int = 2_000_000

    @classmethod
    def named(cls, name: str) -> "Bounds":
        if name == "default":
            return cls()
        if name == "small":
            return cls(n_domains=3, msg_quotas=(1, INFINITE), time_quotas=(1, 2), horizon=5)
        raise ValueError(f"unknown bounds {name!r}")

    @property
    def fixed_end(self) -> int:
        return 1

    @property
    def delegates(self) -> tuple:
        return tuple(range(2, self.n_domains))

    @property
    def untrusted(self) -> int:
        return self.n_domains - 1

    @property
    def values(self) -> tuple:
        # two in-bounds payloads and one oversized payload
        return (b"\x01", b"\x02" * self.msg_size, b"\x03" * (self.msg_size + 1))

    def estimate(self) -> int:
        owners = 1 + len(self.delegates)
        queues = sum(2 ** k for k in range(self.depth + 1))
        budgets = len(self.msg_quotas) * (max(q for q in self.msg_quotas if q != INFINITE) + 1)
        return owners * budgets * max(self.time_quotas) * queues * self.depth * budgets

    def validate(self) -> None:
        if self.n_domains < 3:
            raise ValueError("need at least RM, a fixed end and one delegate")
        if self.depth < 1 or self.horizon < 0:
            raise ValueError("depth >= 1 and horizon >= 0 required")
        if not self.time_quotas or min(self.time_quotas) < 1:
            raise ValueError("time quotas must be positive")
        if self.estimate() > self.ceiling:
            raise BoundsTooLarge(f"estimated {self.estimate()} states > ceiling {self.ceiling}")

    def to_json(self) -> dict:
        return {
            "n_domains": self.n_domains,
            "depth": self.depth,
            "msg_quotas": [_enc_inf(q) for q in self.msg_quotas],
            "time_quotas": list(self.time_quotas),
            "horizon": self.horizon,
            "msg_size": self.msg_size,
            "roles": [r.value for r in self.roles],
        }

    @classmethod
    def from_json(cls, data: dict) -> "Bounds":
        return cls(
            n_domains=data["n_domains"],
            depth=data["depth"],
            msg_quotas=tuple(_dec_inf(q) for q in data["msg_quotas"]),
            time_quotas=tuple(data["time_quotas"]),
            horizon=data["horizon"],
            msg_size=data["msg_size"],
            roles=tuple(FixedRole(r) for r in data["roles"]),
        )


def _enc_inf(v):
    return "inf" if v == INFINITE else v


def _dec_inf(v):
    return INFINITE if v == "inf" else v


# ---------------------------------------------------------------------------
# Actions
# ---------------------------------------------------------------------------
# ("delegate", caller, target, msgs, ticks) ("yield", caller)
# ("write", caller, value_index)            ("read", caller)
# ("status", caller)                        ("reset", caller, target)
# ("tick",)                                 ("route",)


def enumerate_actions(b: Bounds) -> list[tuple]:
    doms = range(b.n_domains)
    acts: list[tuple] = [("tick",), ("route",)]
    for d in doms:
        acts.append(("yield", d))
        acts.append(("read", d))
        acts.append(("status", d))
        for v in range(len(b.values)):
            acts.append(("write", d, v))
        for t in doms:
            acts.append(("reset", d, t))
        for t in range(1, b.n_domains):
            for m in b.msg_quotas:
                for ticks in b.time_quotas:
                    acts.append(("delegate", d, t, m, ticks))
    return acts


def action_actor(action: tuple) -> Optional[int]:
    return None if action[0] in ("tick", "route") else action[1]


# ---------------------------------------------------------------------------
# Abstract model (independent of mailbox.py)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelState:
    owner: int = RESOURCE_MANAGER
    msgs: object = None  # None while RM holds the default
    time_left: int = 0
    queue: tuple = ()


class Model:
    def __init__(self, b: Bounds, role: FixedRole):
        self.b = b
        self.role = role
        self.fixed = b.fixed_end
        self.wired = set(b.delegates) | {RESOURCE_MANAGER}

    def writer(self, s: ModelState) -> int:
        return s.owner if self.role is FixedRole.READER else self.fixed

    def reader(self, s: ModelState) -> int:
        return self.fixed if self.role is FixedRole.READER else s.owner

    def _consume(self, s: ModelState, actor: int, queue: tuple) -> ModelState:
        if actor != s.owner or s.owner == RESOURCE_MANAGER or s.msgs == INFINITE:
            return ModelState(s.owner, s.msgs, s.time_left, queue)
        left = s.msgs - 1
        if left == 0:
            return ModelState()
        return ModelState(s.owner, left, s.time_left, queue)

    def step(self, s: ModelState, a: tuple) -> tuple[tuple, ModelState]:
        kind = a[0]
        if kind == "tick":
            if s.owner != RESOURCE_MANAGER and s.time_left - 1 <= 0:
                return ("ok",), ModelState()
            if s.owner != RESOURCE_MANAGER:
                return ("ok",), ModelState(s.owner, s.msgs, s.time_left - 1, s.queue)
            return ("ok",), s
        if kind == "route":
            return ("route", "DmaPath" if s.owner == self.b.untrusted else "FifoPath"), s
        actor = a[1]
        if kind == "delegate":
            _, _, target, msgs, ticks = a
            if actor != RESOURCE_MANAGER or s.owner != RESOURCE_MANAGER:
                return ("err", "not-owner"), s
            if target == RESOURCE_MANAGER or target not in self.wired:
                return ("err", "not-wired"), s
            return ("ok",), ModelState(target, msgs, ticks, ())
        if kind == "yield":
            if actor != s.owner or actor == RESOURCE_MANAGER:
                return ("err", "not-owner"), s
            return ("ok",), ModelState()
        if kind == "write":
            value = self.b.values[a[2]]
            if actor != self.writer(s):
                return ("err", "no-access"), s
            if len(value) > self.b.msg_size:
                return ("err", "msg-too-large"), s
            if len(s.queue) >= self.b.depth:
                return ("err", "queue-full"), s
            return ("ok",), self._consume(s, actor, s.queue + (value,))
        if kind == "read":
            if actor != self.reader(s):
                return ("err", "no-access"), s
            if not s.queue:
                return ("err", "queue-empty"), s
            return ("data", s.queue[0]), self._consume(s, actor, s.queue[1:])
        if kind == "status":
            if actor != s.owner and actor != self.fixed:
                return ("status", DUMMY_STATUS.owner, 0, 0, True), s
            if s.owner == RESOURCE_MANAGER:
                return ("status", RESOURCE_MANAGER, INFINITE, 0, False), s
            return ("status", s.owner, s.msgs, s.time_left, False), s
        if kind == "reset":
            target = a[2]
            if actor != RESOURCE_MANAGER:
                return ("reset", "not-rm"), s
            if s.owner != RESOURCE_MANAGER and target in (s.owner, self.fixed):
                return ("reset", "blocked"), s
            if s.owner == RESOURCE_MANAGER and target in (RESOURCE_MANAGER, self.fixed):
                return ("reset", "ok"), ModelState()
            return ("reset", "ok"), s
        raise ValueError(f"unknown action {a!r}")


# ---------------------------------------------------------------------------
# Production composite
# ---------------------------------------------------------------------------


class Composite:
    """Production mailbox wired to the production reset guard and arbiter."""

    name = "production"
    mailbox_cls = Mailbox

    def reset_guard(self, mailboxes, target, now):
        return guards.reset_guard_blocker(mailboxes, target, now)

    def route(self, mb, untrusted):
        return guards.arbiter_route(mb, untrusted)

    def new_mailbox(self, config: MailboxConfig) -> Mailbox:
        return self.mailbox_cls(config)

    def apply(self, mb: Mailbox, now: int, a: tuple, b: Bounds) -> tuple[tuple, int]:
        """Run ``a`` on ``mb`` at ``now``; returns (normalised result, new now)."""
        kind = a[0]
        try:
            if kind == "tick":
                now += 1
                mb.expire_check(now)
                return ("ok",), now
            if kind == "route":
                return ("route", self.route(mb, b.untrusted).value), now
            actor = a[1]
            if kind == "delegate":
                _, _, target, msgs, ticks = a
                mb.delegate(actor, target, Quota(msgs, now + ticks), now)
                return ("ok",), now
            if kind == "yield":
                mb.yield_access(actor, now)
                return ("ok",), now
            if kind == "write":
                mb.write(actor, b.values[a[2]], now)
                return ("ok",), now
            if kind == "read":
                return ("data", mb.read(actor, now)), now
            if kind == "status":
                st = mb.read_status(actor, now)
                return ("status", st.owner, st.msgs_left, st.time_left, st.is_dummy), now
            if kind == "reset":
                target = a[2]
                if actor != RESOURCE_MANAGER:
                    return ("reset", "not-rm"), now
                if self.reset_guard([mb], target, now) is not None:
                    return ("reset", "blocked"), now
                for m in guards.resettable_mailboxes([mb], target):
                    m.hw_reset()
                return ("reset", "ok"), now
        except MailboxError as exc:
            return ("err", exc.code), now
        raise ValueError(f"unknown action {a!r}")


def _canon(mb: Mailbox, now: int) -> tuple:
    owner, msgs, deadline, head, count, slots, lengths = mb.snapshot()
    rel = None if deadline is None else deadline - now
    return (owner, msgs, rel, head, count, slots, lengths)


def _view_from_canon(canon: tuple) -> ModelState:
    owner, msgs, rel, head, count, slots, lengths = canon
    depth = len(slots)
    queue = tuple(
        slots[(head + i) % depth][: lengths[(head + i) % depth]] for i in range(count)
    )
    if owner == RESOURCE_MANAGER:
        return ModelState(queue=queue)
    return ModelState(owner, msgs, rel, queue)


def _model_view(mb: Mailbox, now: int) -> ModelState:
    if mb.owner == RESOURCE_MANAGER:
        return ModelState(queue=tuple(mb.queued()))
    return ModelState(mb.owner, mb.msgs_left, mb.quota.deadline - now, tuple(mb.queued()))


# ---------------------------------------------------------------------------
# Property evaluation
# ---------------------------------------------------------------------------


@dataclass
class Ghost:
    used: int = 0
    budget: object = None

    def key(self):
        return (self.used, self.budget)


def check_initial(mb: Mailbox, now: int) -> list[str]:
    bad = []
    if mb.owner != RESOURCE_MANAGER:
        bad.append("P9")
    if not mb.all_slots_zero():
        bad.append("P13")
    return bad


def check_transition(
    model: Model,
    a: tuple,
    pre_m: ModelState,
    post_m: ModelState,
    model_result: tuple,
    pre_canon: tuple,
    post_mb: Mailbox,
    post_now: int,
    result: tuple,
    ghost: Ghost,
) -> tuple[list[str], Ghost]:
    b = model.b
    bad: list[str] = []
    model_pre = pre_m
    # properties are judged on what the implementation holds, not on the model
    pre_m = _view_from_canon(pre_canon)
    actor = action_actor(a)
    kind = a[0]
    post_v = _model_view(post_mb, post_now)
    pre_owner = pre_canon[0]
    post_owner = post_mb.owner
    ok = result[0] in ("ok", "data")
    writer = model.writer(pre_m)
    reader = model.reader(pre_m)
    owner_changed = pre_owner != post_owner

    # P1: outsiders (anyone but the current holder) cannot move owner or quota
    if actor is not None and actor != pre_m.owner:
        if (post_v.owner, post_v.msgs, post_v.time_left) != (pre_m.owner, pre_m.msgs, pre_m.time_left):
            bad.append("P1")

    # P2: holder keeps access unless it yields or its quota runs out
    if pre_m.owner != RESOURCE_MANAGER:
        expected_loss = (
            (kind == "yield" and actor == pre_m.owner)
            or (kind == "tick" and pre_m.time_left <= 1)
            or (kind in ("read", "write") and actor == pre_m.owner and pre_m.msgs == 1 and ok)
        )
        if not expected_loss and post_owner != pre_m.owner:
            bad.append("P2")

    # P3: authorized data operations behave as a FIFO
    if kind == "write" and actor == writer:
        fits = len(b.values[a[2]]) <= b.msg_size and len(pre_m.queue) < b.depth
        if fits and result != ("ok",):
            bad.append("P3")
    if kind == "read" and actor == reader and pre_m.queue:
        if result != ("data", pre_m.queue[0]):
            bad.append("P3")

    # P4: unauthorized data operations are refused without touching the queue
    if (kind == "write" and actor != writer) or (kind == "read" and actor != reader):
        if result != ("err", "no-access") or _canon(post_mb, post_now)[3:] != pre_canon[3:]:
            bad.append("P4")

    # P5: metered operations in one session never exceed the budget
    new_ghost = Ghost(ghost.used, ghost.budget)
    if kind in ("read", "write") and ok and actor == pre_m.owner and actor != RESOURCE_MANAGER:
        new_ghost.used += 1
        if ghost.budget != INFINITE and ghost.budget is not None and new_ghost.used > ghost.budget:
            bad.append("P5")
    if kind == "delegate" and result == ("ok",):
        new_ghost = Ghost(0, a[3])
    elif owner_changed and post_owner == RESOURCE_MANAGER:
        new_ghost = Ghost()

    # P6: no live owner past its deadline
    if post_owner != RESOURCE_MANAGER and post_mb.quota.deadline <= post_now:
        bad.append("P6")

    # P7 / P8 / P12: status register
    if kind == "status":
        exact = ("status", pre_m.owner, pre_m.msgs, pre_m.time_left, False)
        if pre_m.owner == RESOURCE_MANAGER:
            exact = ("status", RESOURCE_MANAGER, INFINITE, 0, False)
        if actor == pre_m.owner and actor != RESOURCE_MANAGER and result != exact:
            bad.append("P7")
        elif actor == model.fixed and result != exact:
            bad.append("P8")
        elif actor not in (pre_m.owner, model.fixed):
            if result != ("status", DUMMY_STATUS.owner, 0, 0, True):
                bad.append("P12")

    # P9: hardware reset returns ownership to the resource manager
    if kind == "reset" and result == ("reset", "ok") and pre_m.owner == RESOURCE_MANAGER:
        if post_owner != RESOURCE_MANAGER:
            bad.append("P9")

    # P10: leaving RM ownership only through RM's own delegation
    if pre_owner == RESOURCE_MANAGER and post_owner != RESOURCE_MANAGER:
        if not (kind == "delegate" and actor == RESOURCE_MANAGER and result == ("ok",)):
            bad.append("P10")

    # P11: transitions go RM -> delegate -> RM only
    if owner_changed and pre_owner != RESOURCE_MANAGER and post_owner != RESOURCE_MANAGER:
        bad.append("P11")

    # P13: wipe on delegation, yield and expiration
    session_edge = (kind == "delegate" and result == ("ok",)) or owner_changed
    if session_edge and not post_mb.all_slots_zero():
        bad.append("P13")

    # G: reset guard soundness
    if kind == "reset" and result == ("reset", "ok"):
        target = a[2]
        live = pre_m.owner != RESOURCE_MANAGER
        if actor != RESOURCE_MANAGER or (live and target in (pre_m.owner, model.fixed)):
            bad.append("G")

    # A: arbiter exclusivity
    if kind == "route":
        want = "DmaPath" if pre_m.owner == b.untrusted else "FifoPath"
        if result != ("route", want):
            bad.append("A")

    # M: conformance with the abstract model
    if (model_pre != pre_m or result != model_result or post_v != post_m
            or not post_mb.slots_zero_outside_queue()):
        bad.append("M")

    return bad, new_ghost


# ---------------------------------------------------------------------------
# Exploration
# ---------------------------------------------------------------------------


@dataclass
class Counterexample:
    composite: str
    role: FixedRole
    bounds: Bounds
    actions: list
    property_id: str
    initial: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.actions)

    def to_json(self) -> dict:
        return {
            "composite": self.composite,
            "role": self.role.value,
            "bounds": self.bounds.to_json(),
            "property": self.property_id,
            "actions": [[_enc_inf(x) for x in act] for act in self.actions],
            "initial": self.initial,
            "final": self.final,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Counterexample":
        return cls(
            composite=data["composite"],
            role=FixedRole(data["role"]),
            bounds=Bounds.from_json(data["bounds"]),
            actions=[tuple(_dec_inf(x) for x in act) for act in data["actions"]],
            property_id=data["property"],
            initial=data.get("initial", {}),
            final=data.get("final", {}),
        )


@dataclass
class ExploreResult:
    states_explored: int
    transitions: int
    violations: list
    seconds: float
    per_role: dict

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> dict:
        return {
            "states_explored": self.states_explored,
            "transitions": self.transitions,
            "violations": [cx.to_json() for cx in self.violations],
            "seconds": round(self.seconds, 3),
        }


def _describe(mb: Mailbox, now: int) -> dict:
    owner, msgs, deadline, head, count, slots, lengths = mb.snapshot()
    return {
        "now": now,
        "owner": owner,
        "msgs_left": _enc_inf(msgs) if msgs is not None else None,
        "deadline": deadline,
        "queue": [m.hex() for m in mb.queued()],
        "slots": [s.hex() for s in slots],
    }


def _config(b: Bounds, role: FixedRole) -> MailboxConfig:
    return MailboxConfig(
        mailbox_id="mb",
        fixed_end=b.fixed_end,
        fixed_role=role,
        wired_delegates=frozenset((RESOURCE_MANAGER,) + b.delegates),
        depth=b.depth,
        msg_size=b.msg_size,
    )


def _state_key(canon: tuple, model_state: ModelState, ghost: Ghost) -> bytes:
    text = repr((canon, model_state, ghost.key()))
    return hashlib.sha256(text.encode()).digest()


def explore(bounds: Bounds | None = None, composite: Composite | None = None,
            exhaustive: bool = False) -> ExploreResult:
    """Explore every interleaving up to ``bounds.horizon`` actions.

    Unless ``exhaustive`` is set, the search stops after completing the first
    depth level at which a property (not merely conformance) fails, so every
    reported counterexample has minimal length.  A conformance-only failure
    caps the search three levels deeper.
    """
    bounds = bounds or Bounds()
    bounds.validate()
    composite = composite or Composite()
    started = time.perf_counter()
    states = 0
    transitions = 0
    violations: list[Counterexample] = []
    per_role = {}
    actions = enumerate_actions(bounds)
    for role in bounds.roles:
        cfg = _config(bounds, role)
        model = Model(bounds, role)
        found: dict[str, Counterexample] = {}
        mb = composite.new_mailbox(cfg)
        now = 0
        for pid in check_initial(mb, now):
            found.setdefault(pid, Counterexample(composite.name, role, bounds, [], pid,
                                                 _describe(mb, 0), _describe(mb, 0)))
        m0 = ModelState()
        g0 = Ghost()
        key0 = _state_key(_canon(mb, now), m0, g0)
        visited = {key0}
        # frontier entries: (snapshot, now, model_state, ghost, path)
        frontier = [(mb.snapshot(), now, m0, g0, ())]
        role_states = 1
        scratch = composite.new_mailbox(cfg)
        limit = bounds.horizon
        for depth in range(bounds.horizon):
            if depth >= limit:
                break
            nxt = []
            for snap, t, ms, ghost, path in frontier:
                pre_canon = None
                for a in actions:
                    scratch.restore(snap)
                    if pre_canon is None:
                        pre_canon = _canon(scratch, t)
                    result, t2 = composite.apply(scratch, t, a, bounds)
                    model_result, ms2 = model.step(ms, a)
                    transitions += 1
                    bad, ghost2 = check_transition(model, a, ms, ms2, model_result, pre_canon,
                                                   scratch, t2, result, ghost)
                    new_path = path + (a,)
                    for pid in bad:
                        if pid not in found:
                            init = composite.new_mailbox(cfg)
                            found[pid] = Counterexample(composite.name, role, bounds, list(new_path),
                                                        pid, _describe(init, 0), _describe(scratch, t2))
                    key = _state_key(_canon(scratch, t2), ms2, ghost2)
                    if key in visited:
                        continue
                    visited.add(key)
                    role_states += 1
                    nxt.append((scratch.snapshot(), t2, ms2, ghost2, new_path))
            frontier = nxt
            if not frontier:
                break
            if not exhaustive:
                if any(p != "M" for p in found):
                    break
                if "M" in found:
                    limit = min(limit, depth + 4)
        states += role_states
        per_role[role.value] = role_states
        violations.extend(found[p] for p in PROPERTY_IDS if p in found)
    return ExploreResult(states, transitions, violations, time.perf_counter() - started, per_role)


def replay(cx: Counterexample, composite: Composite | None = None) -> str:
    """Drive a composite through ``cx.actions``; 'confirmed' if the property fails."""
    composite = composite or composite_by_name(cx.composite)
    b = cx.bounds
    cfg = _config(b, cx.role)
    model = Model(b, cx.role)
    mb = composite.new_mailbox(cfg)
    now = 0
    if not cx.actions:
        return "confirmed" if cx.property_id in check_initial(mb, now) else "not-reproduced"
    ms = ModelState()
    ghost = Ghost()
    bad: list[str] = []
    for a in cx.actions:
        pre_canon = _canon(mb, now)
        result, now2 = composite.apply(mb, now, a, b)
        model_result, ms2 = model.step(ms, a)
        bad, ghost = check_transition(model, a, ms, ms2, model_result, pre_canon, mb, now2, result, ghost)
        ms, now = ms2, now2
    return "confirmed" if cx.property_id in bad else "not-reproduced"


def composite_by_name(name: str) -> Composite:
    if name == Composite.name:
        return Composite()
    from .mutants import MUTANTS

    return MUTANTS[name]()


def violations_by_property(result: ExploreResult) -> dict[str, Counterexample]:
    return {cx.property_id: cx for cx in result.violations}


def dump_counterexamples(cxs: Iterable[Counterexample]) -> str:
    return json.dumps([cx.to_json() for cx in cxs], indent=2, sort_keys=True)

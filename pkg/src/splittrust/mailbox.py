"""Verifiably delegatable hardware mailbox.

A mailbox is a bounded FIFO between a hard-wired *fixed end* and a
*delegatable end* multiplexed among several wired domains.  The delegatable
end belongs to the resource manager after reset; the resource manager may hand
it to one other domain for a quota-limited session that it cannot revoke.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

RESOURCE_MANAGER = 0
NONE = -1
INFINITE = math.inf


class MailboxError(Exception):
    code = "mailbox-error"

    def __init__(self, message: str = "", mailbox_id: str | None = None):
        super().__init__(message or self.code)
        self.mailbox_id = mailbox_id


class InvalidConfig(MailboxError):
    code = "invalid-config"


class NotOwner(MailboxError):
    code = "not-owner"


class NotWired(MailboxError):
    code = "not-wired"


class BadDeadline(MailboxError):
    code = "bad-deadline"


class NoAccess(MailboxError):
    code = "no-access"


class QueueFull(MailboxError):
    code = "queue-full"


class QueueEmpty(MailboxError):
    code = "queue-empty"


class MessageTooLarge(MailboxError):
    code = "msg-too-large"


class FixedRole(str, Enum):
    READER = "reader"
    WRITER = "writer"


@dataclass(frozen=True)
class MailboxConfig:
    mailbox_id: str
    fixed_end: int
    fixed_role: FixedRole
    wired_delegates: frozenset
    depth: int = 4
    msg_size: int = 64

    def validate(self) -> None:
        if self.depth < 1:
            raise InvalidConfig(f"{self.mailbox_id}: depth must be >= 1", self.mailbox_id)
        if self.msg_size < 1:
            raise InvalidConfig(f"{self.mailbox_id}: msg_size must be >= 1", self.mailbox_id)
        if self.fixed_end in self.wired_delegates:
            raise InvalidConfig(f"{self.mailbox_id}: fixed end is also a delegate", self.mailbox_id)
        if RESOURCE_MANAGER not in self.wired_delegates:
            raise InvalidConfig(f"{self.mailbox_id}: resource manager not wired", self.mailbox_id)


@dataclass(frozen=True)
class Quota:
    """Delegation budget.  ``msgs`` may be INFINITE, ``deadline`` may not."""

    msgs: float
    deadline: int

    def __post_init__(self):
        if not (self.msgs == INFINITE or (int(self.msgs) == self.msgs and self.msgs >= 1)):
            raise ValueError(f"msgs must be a positive count or INFINITE, got {self.msgs!r}")
        if isinstance(self.deadline, float) and not math.isfinite(self.deadline):
            raise ValueError("deadline must be finite")


@dataclass(frozen=True)
class MailboxStatus:
    owner: int
    msgs_left: float
    time_left: int
    is_dummy: bool = False


DUMMY_STATUS = MailboxStatus(owner=NONE, msgs_left=0, time_left=0, is_dummy=True)

# Listener signature: (event_name, mailbox_id, detail_dict)
Listener = Callable[[str, str, dict], None]


@dataclass
class Mailbox:
    config: MailboxConfig
    listener: Optional[Listener] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.config.validate()
        self.owner = RESOURCE_MANAGER
        self.quota: Optional[Quota] = None  # None is the unmetered RM default
        self.msgs_left: float = 0
        self._slots = [bytearray(self.config.msg_size) for _ in range(self.config.depth)]
        self._lengths = [0] * self.config.depth
        self._head = 0
        self._count = 0

    # -- helpers ---------------------------------------------------------

    @property
    def mailbox_id(self) -> str:
        return self.config.mailbox_id

    @property
    def is_default(self) -> bool:
        return self.owner == RESOURCE_MANAGER

    def __len__(self) -> int:
        return self._count

    def writer(self) -> int:
        if self.config.fixed_role is FixedRole.READER:
            return self.owner
        return self.config.fixed_end

    def reader(self) -> int:
        if self.config.fixed_role is FixedRole.READER:
            return self.config.fixed_end
        return self.owner

    def session_active(self, now: int) -> bool:
        return self.owner != RESOURCE_MANAGER and now < self.quota.deadline

    def _emit(self, event: str, **detail) -> None:
        if self.listener is not None:
            self.listener(event, self.config.mailbox_id, detail)

    def _wipe(self) -> None:
        for slot in self._slots:
            slot[:] = bytes(len(slot))
        self._lengths = [0] * self.config.depth
        self._head = 0
        self._count = 0

    def _revert_to_rm(self) -> None:
        self.owner = RESOURCE_MANAGER
        self.quota = None
        self.msgs_left = 0
        self._wipe()

    def _meter(self, caller: int, now: int) -> None:
        # only the delegatable end of a live session is metered
        if caller != self.owner or self.owner == RESOURCE_MANAGER:
            return
        if self.msgs_left == INFINITE:
            return
        self.msgs_left -= 1
        if self.msgs_left <= 0:
            previous = self.owner
            self._revert_to_rm()
            self._emit("expired", previous_owner=previous, reason="msgs", tick=now)

    # -- operations --------------------------------------------------------

    def delegate(self, caller: int, target: int, quota: Quota, now: int) -> None:
        self.expire_check(now)
        if caller != RESOURCE_MANAGER or self.owner != RESOURCE_MANAGER:
            raise NotOwner(f"{caller} cannot delegate {self.mailbox_id}", self.mailbox_id)
        if target == RESOURCE_MANAGER or target not in self.config.wired_delegates:
            raise NotWired(f"{target} not wired to {self.mailbox_id}", self.mailbox_id)
        if quota.deadline <= now:
            raise BadDeadline(f"deadline {quota.deadline} <= now {now}", self.mailbox_id)
        self.owner = target
        self.quota = quota
        self.msgs_left = quota.msgs
        self._wipe()
        self._emit("delegated", target=target, msgs=quota.msgs, deadline=quota.deadline)

    def yield_access(self, caller: int, now: int | None = None) -> None:
        if now is not None:
            self.expire_check(now)
        if caller != self.owner or caller == RESOURCE_MANAGER:
            raise NotOwner(f"{caller} does not hold {self.mailbox_id}", self.mailbox_id)
        self._revert_to_rm()
        self._emit("yielded", previous_owner=caller)

    def write(self, caller: int, msg: bytes, now: int) -> None:
        self.expire_check(now)
        if caller != self.writer():
            raise NoAccess(f"{caller} may not write {self.mailbox_id}", self.mailbox_id)
        if len(msg) > self.config.msg_size:
            raise MessageTooLarge(f"{len(msg)} > {self.config.msg_size}", self.mailbox_id)
        if self._count == self.config.depth:
            raise QueueFull(self.mailbox_id, self.mailbox_id)
        idx = (self._head + self._count) % self.config.depth
        self._slots[idx][: len(msg)] = msg
        self._lengths[idx] = len(msg)
        self._count += 1
        self._meter(caller, now)

    def read(self, caller: int, now: int) -> bytes:
        self.expire_check(now)
        if caller != self.reader():
            raise NoAccess(f"{caller} may not read {self.mailbox_id}", self.mailbox_id)
        if self._count == 0:
            raise QueueEmpty(self.mailbox_id, self.mailbox_id)
        idx = self._head
        msg = bytes(self._slots[idx][: self._lengths[idx]])
        self._slots[idx][:] = bytes(self.config.msg_size)
        self._lengths[idx] = 0
        self._head = (self._head + 1) % self.config.depth
        self._count -= 1
        self._meter(caller, now)
        return msg

    def read_status(self, caller: int, now: int) -> MailboxStatus:
        self.expire_check(now)
        if caller != self.owner and caller != self.config.fixed_end:
            return DUMMY_STATUS
        if self.owner == RESOURCE_MANAGER:
            return MailboxStatus(RESOURCE_MANAGER, INFINITE, 0)
        return MailboxStatus(self.owner, self.msgs_left, max(0, self.quota.deadline - now))

    def expire_check(self, now: int) -> bool:
        if self.owner == RESOURCE_MANAGER or now < self.quota.deadline:
            return False
        previous = self.owner
        self._revert_to_rm()
        self._emit("expired", previous_owner=previous, reason="time", tick=now)
        return True

    def hw_reset(self) -> "Mailbox":
        self._revert_to_rm()
        self._emit("reset")
        return self

    # -- introspection -----------------------------------------------------

    def queued(self) -> list[bytes]:
        out = []
        for i in range(self._count):
            idx = (self._head + i) % self.config.depth
            out.append(bytes(self._slots[idx][: self._lengths[idx]]))
        return out

    def slots_zero_outside_queue(self) -> bool:
        live = {(self._head + i) % self.config.depth for i in range(self._count)}
        return all(
            not any(self._slots[i]) and self._lengths[i] == 0
            for i in range(self.config.depth)
            if i not in live
        )

    def all_slots_zero(self) -> bool:
        return all(not any(s) for s in self._slots) and not any(self._lengths)

    def snapshot(self) -> tuple:
        """Canonical, hashable state (owner, msgs, deadline, head, count, slots, lengths)."""
        deadline = self.quota.deadline if self.quota is not None else None
        return (
            self.owner,
            self.msgs_left if self.quota is not None else None,
            deadline,
            self._head,
            self._count,
            tuple(bytes(s) for s in self._slots),
            tuple(self._lengths),
        )

    def restore(self, snap: tuple) -> None:
        owner, msgs, deadline, head, count, slots, lengths = snap
        self.owner = owner
        if deadline is None:
            self.quota = None
            self.msgs_left = 0
        else:
            # original msgs budget is not observable; the live counter is what matters
            self.quota = Quota(INFINITE, deadline)
            self.msgs_left = msgs
        self._head = head
        self._count = count
        self._slots = [bytearray(s) for s in slots]
        self._lengths = list(lengths)

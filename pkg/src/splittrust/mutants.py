"""Known-bad variants of the strongly trusted hardware, used to show the
harness actually catches the bugs it claims to rule out."""

from __future__ import annotations

from .guards import Route
from .harness import Composite
from .mailbox import DUMMY_STATUS, RESOURCE_MANAGER, Mailbox, MailboxStatus, NotOwner, NotWired, BadDeadline


class UnmeteredMailbox(Mailbox):
    def _meter(self, caller, now):
        return None


class NoWipeOnYieldMailbox(Mailbox):
    def yield_access(self, caller, now=None):
        if now is not None:
            self.expire_check(now)
        if caller != self.owner or caller == RESOURCE_MANAGER:
            raise NotOwner(self.mailbox_id, self.mailbox_id)
        self.owner = RESOURCE_MANAGER
        self.quota = None
        self.msgs_left = 0


class LeakyStatusMailbox(Mailbox):
    def read_status(self, caller, now):
        self.expire_check(now)
        if self.owner == RESOURCE_MANAGER:
            return MailboxStatus(RESOURCE_MANAGER, float("inf"), 0)
        return MailboxStatus(self.owner, self.msgs_left, max(0, self.quota.deadline - now))


class AnyoneDelegatesMailbox(Mailbox):
    def delegate(self, caller, target, quota, now):
        self.expire_check(now)
        if self.owner != RESOURCE_MANAGER:
            raise NotOwner(self.mailbox_id, self.mailbox_id)
        if target == RESOURCE_MANAGER or target not in self.config.wired_delegates:
            raise NotWired(self.mailbox_id, self.mailbox_id)
        if quota.deadline <= now:
            raise BadDeadline(self.mailbox_id, self.mailbox_id)
        self.owner = target
        self.quota = quota
        self.msgs_left = quota.msgs
        self._wipe()


class QuotaUnmetered(Composite):
    name = "quota-unmetered"
    mailbox_cls = UnmeteredMailbox


class WipeSkipped(Composite):
    name = "wipe-skipped"
    mailbox_cls = NoWipeOnYieldMailbox


class DummyLeaksOwner(Composite):
    name = "dummy-leaks-owner"
    mailbox_cls = LeakyStatusMailbox


class NonRmDelegation(Composite):
    name = "non-rm-delegation"
    mailbox_cls = AnyoneDelegatesMailbox


class ResetGuardIgnored(Composite):
    name = "reset-guard-ignored"

    def reset_guard(self, mailboxes, target, now):
        return None


class ArbiterStuckDma(Composite):
    name = "arbiter-stuck-dma"

    def route(self, mb, untrusted):
        return Route.DMA


MUTANTS = {
    cls.name: cls
    for cls in (QuotaUnmetered, WipeSkipped, DummyLeaksOwner, NonRmDelegation,
                ResetGuardIgnored, ArbiterStuckDma)
}

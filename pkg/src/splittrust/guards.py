"""Reset guard and DMA arbiter.

Both are stateless: they are pure functions of mailbox state, so they can
never drift out of sync with the mailboxes they watch.
"""

from __future__ import annotations

from enum import Enum
from typing import Iterable, Optional

from .mailbox import RESOURCE_MANAGER, Mailbox


class Route(str, Enum):
    DMA = "DmaPath"
    FIFO = "FifoPath"


def reset_guard_blocker(mailboxes: Iterable[Mailbox], target: int, now: int) -> Optional[str]:
    """Id of the first mailbox whose live session protects ``target``, else None."""
    for mb in mailboxes:
        if mb.owner == RESOURCE_MANAGER:
            continue
        if now >= mb.quota.deadline:
            continue
        if target == mb.owner or target == mb.config.fixed_end:
            return mb.mailbox_id
    return None


def arbiter_route(data_mailbox: Mailbox, untrusted_id: int) -> Route:
    """DMA is connected only while the untrusted domain holds the data plane."""
    return Route.DMA if data_mailbox.owner == untrusted_id else Route.FIFO


def resettable_mailboxes(mailboxes: Iterable[Mailbox], target: int) -> list[Mailbox]:
    """Default-state mailboxes that ``target`` is a party to; reset along with it."""
    return [
        mb for mb in mailboxes
        if mb.owner == RESOURCE_MANAGER and target in (RESOURCE_MANAGER, mb.config.fixed_end)
    ]

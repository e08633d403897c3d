from splittrust.guards import Route, arbiter_route, reset_guard_blocker, resettable_mailboxes
from splittrust.mailbox import INFINITE, FixedRole, Mailbox, MailboxConfig, Quota

UNTRUSTED, TEE, DEV = 7, 1, 6


def mb(name="m", fixed=DEV):
    return Mailbox(MailboxConfig(name, fixed, FixedRole.READER, frozenset({0, TEE, UNTRUSTED})))


class TestResetGuard:
    def test_default_mailbox_never_blocks(self):
        assert reset_guard_blocker([mb()], DEV, 0) is None

    def test_live_session_protects_both_ends(self):
        m = mb()
        m.delegate(0, TEE, Quota(INFINITE, 10), 0)
        assert reset_guard_blocker([m], TEE, 5) == "m"
        assert reset_guard_blocker([m], DEV, 5) == "m"
        assert reset_guard_blocker([m], UNTRUSTED, 5) is None

    def test_expired_session_does_not_block(self):
        m = mb()
        m.delegate(0, TEE, Quota(INFINITE, 10), 0)
        assert reset_guard_blocker([m], TEE, 10) is None

    def test_resettable(self):
        a, b = mb("a"), mb("b")
        b.delegate(0, TEE, Quota(1, 10), 0)
        assert [x.mailbox_id for x in resettable_mailboxes([a, b], DEV)] == ["a"]


class TestArbiter:
    def test_fifo_by_default(self):
        assert arbiter_route(mb(), UNTRUSTED) is Route.FIFO

    def test_dma_only_for_untrusted(self):
        m = mb()
        m.delegate(0, UNTRUSTED, Quota(INFINITE, 10), 0)
        assert arbiter_route(m, UNTRUSTED) is Route.DMA
        m.yield_access(UNTRUSTED)
        m.delegate(0, TEE, Quota(INFINITE, 10), 0)
        assert arbiter_route(m, UNTRUSTED) is Route.FIFO

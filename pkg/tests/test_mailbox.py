import pytest
from hypothesis import given, settings, strategies as st

from splittrust.mailbox import (
    DUMMY_STATUS,
    INFINITE,
    BadDeadline,
    FixedRole,
    InvalidConfig,
    Mailbox,
    MailboxConfig,
    MessageTooLarge,
    NoAccess,
    NotOwner,
    NotWired,
    QueueEmpty,
    QueueFull,
    Quota,
)

FIXED = 5
ALICE, BOB, EVE = 1, 2, 3


def make(role=FixedRole.READER, depth=2, msg_size=8, events=None):
    cfg = MailboxConfig("mb", FIXED, role, frozenset({0, ALICE, BOB}), depth, msg_size)
    listener = (lambda ev, mb, d: events.append(ev)) if events is not None else None
    return Mailbox(cfg, listener)


class TestConfig:
    def test_rm_must_be_wired(self):
        with pytest.raises(InvalidConfig):
            Mailbox(MailboxConfig("x", FIXED, FixedRole.READER, frozenset({ALICE})))

    def test_fixed_end_not_delegate(self):
        with pytest.raises(InvalidConfig):
            Mailbox(MailboxConfig("x", FIXED, FixedRole.READER, frozenset({0, FIXED})))

    def test_zero_depth(self):
        with pytest.raises(InvalidConfig):
            Mailbox(MailboxConfig("x", FIXED, FixedRole.READER, frozenset({0}), depth=0))

    def test_quota_rejects_zero_msgs(self):
        with pytest.raises(ValueError):
            Quota(0, 10)

    def test_quota_rejects_infinite_deadline(self):
        with pytest.raises(ValueError):
            Quota(1, float("inf"))


class TestDelegation:
    def test_starts_owned_by_rm(self):
        mb = make()
        assert mb.owner == 0 and mb.is_default

    def test_delegate_and_yield(self):
        events = []
        mb = make(events=events)
        mb.delegate(0, ALICE, Quota(INFINITE, 10), 0)
        assert mb.owner == ALICE
        mb.yield_access(ALICE, 1)
        assert mb.owner == 0
        assert events == ["delegated", "yielded"]

    def test_only_rm_delegates(self):
        mb = make()
        with pytest.raises(NotOwner):
            mb.delegate(ALICE, BOB, Quota(1, 10), 0)

    def test_cannot_redelegate_live_session(self):
        mb = make()
        mb.delegate(0, ALICE, Quota(1, 10), 0)
        with pytest.raises(NotOwner):
            mb.delegate(0, BOB, Quota(1, 10), 1)

    def test_unwired_target(self):
        mb = make()
        with pytest.raises(NotWired):
            mb.delegate(0, EVE, Quota(1, 10), 0)

    def test_deadline_in_past(self):
        mb = make()
        with pytest.raises(BadDeadline):
            mb.delegate(0, ALICE, Quota(1, 5), 5)

    def test_rm_cannot_yield(self):
        with pytest.raises(NotOwner):
            make().yield_access(0)

    def test_time_expiry(self):
        mb = make()
        mb.delegate(0, ALICE, Quota(INFINITE, 10), 0)
        assert not mb.expire_check(9)
        assert mb.expire_check(10)
        assert mb.owner == 0

    def test_msg_quota_expiry(self):
        mb = make(role=FixedRole.READER)
        mb.delegate(0, ALICE, Quota(2, 100), 0)
        mb.write(ALICE, b"a", 1)
        assert mb.owner == ALICE
        mb.write(ALICE, b"b", 2)
        assert mb.owner == 0
        assert len(mb) == 0 and mb.all_slots_zero()

    def test_fixed_end_not_metered(self):
        mb = make(role=FixedRole.WRITER, depth=4)
        mb.delegate(0, ALICE, Quota(1, 100), 0)
        for i in range(3):
            mb.write(FIXED, b"x", i)
        assert mb.owner == ALICE and mb.msgs_left == 1


class TestDataPath:
    def test_fifo_order(self):
        mb = make()
        mb.delegate(0, ALICE, Quota(INFINITE, 100), 0)
        mb.write(ALICE, b"one", 1)
        mb.write(ALICE, b"two", 2)
        assert mb.read(FIXED, 3) == b"one"
        assert mb.read(FIXED, 4) == b"two"

    def test_full_and_empty(self):
        mb = make(depth=1)
        mb.delegate(0, ALICE, Quota(INFINITE, 100), 0)
        with pytest.raises(QueueEmpty):
            mb.read(FIXED, 1)
        mb.write(ALICE, b"a", 1)
        with pytest.raises(QueueFull):
            mb.write(ALICE, b"b", 2)

    def test_too_large(self):
        mb = make(msg_size=4)
        with pytest.raises(MessageTooLarge):
            mb.write(0, b"12345", 0)

    def test_wrong_side(self):
        mb = make()
        mb.delegate(0, ALICE, Quota(INFINITE, 100), 0)
        with pytest.raises(NoAccess):
            mb.write(BOB, b"a", 1)
        with pytest.raises(NoAccess):
            mb.write(0, b"a", 1)
        with pytest.raises(NoAccess):
            mb.read(ALICE, 1)

    def test_yield_wipes_queue(self):
        mb = make()
        mb.delegate(0, ALICE, Quota(INFINITE, 100), 0)
        mb.write(ALICE, b"secret", 1)
        mb.yield_access(ALICE, 2)
        assert len(mb) == 0 and mb.all_slots_zero()

    def test_read_zeroes_slot(self):
        mb = make()
        mb.write(0, b"abc", 0)
        mb.read(FIXED, 0)
        assert mb.slots_zero_outside_queue()

    def test_hw_reset(self):
        events = []
        mb = make(events=events)
        mb.delegate(0, ALICE, Quota(INFINITE, 100), 0)
        mb.write(ALICE, b"x", 1)
        mb.hw_reset()
        assert mb.owner == 0 and mb.all_slots_zero()
        assert events[-1] == "reset"


class TestStatus:
    def test_outsider_gets_dummy(self):
        mb = make()
        mb.delegate(0, ALICE, Quota(3, 50), 0)
        assert mb.read_status(BOB, 1) == DUMMY_STATUS
        assert mb.read_status(0, 1) == DUMMY_STATUS

    def test_owner_and_fixed_end_see_real(self):
        mb = make()
        mb.delegate(0, ALICE, Quota(3, 50), 0)
        s = mb.read_status(ALICE, 10)
        assert (s.owner, s.msgs_left, s.time_left) == (ALICE, 3, 40)
        assert mb.read_status(FIXED, 10).owner == ALICE

    def test_default_status(self):
        s = make().read_status(0, 0)
        assert s.owner == 0 and s.msgs_left == INFINITE and not s.is_dummy


# -- randomized operation sequences -----------------------------------------

actors = st.sampled_from([0, ALICE, BOB, EVE, FIXED])
ops = st.one_of(
    st.tuples(st.just("delegate"), actors, st.sampled_from([ALICE, BOB, EVE]),
              st.sampled_from([1, 2, INFINITE]), st.integers(1, 6)),
    st.tuples(st.just("yield"), actors),
    st.tuples(st.just("write"), actors, st.binary(min_size=0, max_size=8)),
    st.tuples(st.just("read"), actors),
    st.tuples(st.just("status"), actors),
    st.tuples(st.just("tick"), st.integers(1, 4)),
)


@settings(max_examples=300, deadline=None)
@given(st.sampled_from(list(FixedRole)), st.lists(ops, max_size=25))
def test_random_sequences_preserve_invariants(role, seq):
    mb = make(role=role)
    now = 0
    for op in seq:
        before_owner = mb.owner
        try:
            if op[0] == "delegate":
                _, caller, target, msgs, dt = op
                mb.delegate(caller, target, Quota(msgs, now + dt), now)
            elif op[0] == "yield":
                mb.yield_access(op[1], now)
            elif op[0] == "write":
                mb.write(op[1], op[2], now)
            elif op[0] == "read":
                mb.read(op[1], now)
            elif op[0] == "status":
                s = mb.read_status(op[1], now)
                if op[1] not in (mb.owner, FIXED):
                    assert s == DUMMY_STATUS
            else:
                now += op[1]
        except Exception as err:
            assert hasattr(err, "code")
        # an owner other than the manager only ever comes from the manager
        if mb.owner != before_owner and mb.owner != 0:
            assert op[0] == "delegate" and op[1] == 0
        # freed slots never hold data
        assert mb.slots_zero_outside_queue()
        # a non-default session is always metered and bounded in time
        if mb.owner != 0:
            assert mb.quota is not None and mb.msgs_left >= 1
        else:
            assert mb.quota is None
        assert 0 <= len(mb) <= mb.config.depth

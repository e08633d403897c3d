import pytest

from splittrust.frames import Op
from splittrust.io_services import Partitions, StorageError
from splittrust.mailbox import INFINITE
from splittrust.manifest import default_manifest
from splittrust.resource_manager import (
    dec_msgs,
    decode_msg,
    derive_resources,
    enc_msgs,
    encode_msg,
    parse_faults,
)
from splittrust.scenarios import _app_results, execute, freshness_trial

CRED_A, CRED_B = b"a" * 32, b"b" * 32


def probe(resource, faults=(), script=None, at=20):
    overrides = {
        "images": {"probe": {"program": "probe", "version": 1, "config": {"resource": resource}}},
        "policy": {"launches": [{"domain": "tee1", "image": "probe", "at": at}]},
    }
    if script:
        overrides["devices"] = {"untrusted": {"script": script}}
    spec = {"name": "probe", "overrides": overrides, "until": {"event": "AppResult", "count": 1},
            "max_ticks": 3000}
    m = execute(spec, faults=faults)
    results = _app_results(m.trace, "probe")
    return (results[0][1].detail["outcome"] if results else None), m


def untrusted(script):
    spec = {"name": "unt", "overrides": {"devices": {"untrusted": {"script": script + [{"op": "spin"}]}}},
            "until": {"event": "Workload", "match": {"op": "spin"}, "count": 1}, "max_ticks": 3000}
    m = execute(spec)
    return [e.detail for e in m.events("Workload")][:-1], m


class TestPartitions:
    def setup_method(self):
        self.p = Partitions(256, 2048)
        self.p.allocate(1, 256, 319)
        self.p.allocate(2, 512, 575)

    def test_overlap(self):
        with pytest.raises(StorageError, match="overlap"):
            self.p.allocate(3, 300, 400)
        with pytest.raises(StorageError, match="overlap"):
            self.p.allocate(3, 0, 10)

    def test_reallocate_same_range(self):
        self.p.allocate(1, 256, 319)

    def test_only_armed_partition_authenticates(self):
        self.p.bind(1, CRED_A)
        self.p.bind(2, CRED_B)
        assert self.p.authenticate(CRED_B) == 2
        with pytest.raises(StorageError):
            self.p.authenticate(CRED_A)

    def test_bounds(self):
        self.p.check(1, 256, 64)
        with pytest.raises(StorageError, match="out-of-partition"):
            self.p.check(1, 319, 2)

    def test_boot_partition_not_bindable(self):
        with pytest.raises(StorageError):
            self.p.bind(0, CRED_A)


class TestManagerHelpers:
    def test_msg_round_trip(self):
        raw = encode_msg(Op.RM_REQUEST, {"resource": "ui", "msgs": enc_msgs(INFINITE)})
        op, body = decode_msg(raw)
        assert op == Op.RM_REQUEST and dec_msgs(body["msgs"]) == INFINITE

    def test_resources(self):
        res = derive_resources(default_manifest())
        assert set(res["ui"].mailboxes) == set(res["serial_in"].mailboxes) | set(res["serial_out"].mailboxes)
        assert res["storage"].kind == "storage" and res["storage"].domains == ()
        assert "ipc:tee1" in res and "ipc:tee2" in res

    def test_parse_faults(self):
        assert parse_faults(["skip-reset:network:2", "hijack:pump.req"]) == [
            ("skip-reset", "network:2"), ("hijack", "pump.req")]


class TestRuntimeVerification:
    @pytest.mark.parametrize("resource", ["serial_out", "serial_in", "network", "ui"])
    def test_clean_device_verifies(self, resource):
        assert probe(resource)[0] == "verified"

    def test_storage_without_binding_denied(self):
        assert probe("storage")[0] == "policy-denied"

    def test_shrunk_quota_detected(self):
        assert probe("serial_out", ["shrink-quota:serial_out"])[0] == "status-mismatch"

    def test_skipped_reset_after_untrusted_use_is_stale(self):
        script = [{"op": "open", "resource": "network"},
                  {"op": "mb_write", "mailbox": "network.req", "frame": "QUERY_STATUS"},
                  {"op": "close"}]
        outcome, m = probe("network", ["skip-reset:network"], script, at=60)
        assert outcome == "stale-domain"

    def test_injected_frame_is_stale(self):
        assert probe("network", ["inject-frame:network"])[0] == "stale-domain"

    def test_hijack_blocked_by_hardware(self):
        outcome, m = probe("serial_out", ["hijack:serial_out.req"])
        assert outcome == "verified"
        attacks = [e.detail for e in m.events("Attack") if e.detail.get("kind") == "hijack"]
        assert attacks and all(a["outcome"] == "no-access" for a in attacks)

    @pytest.mark.parametrize("seed", range(5))
    def test_freshness_trials(self, seed):
        assert freshness_trial(seed, inject=True) == "stale-domain"
        assert freshness_trial(seed, inject=False) == "verified"


class TestCompat:
    def test_storage_round_trip(self):
        results, m = untrusted([{"op": "write", "first": 1024, "data": "68656c6c6f"},
                                {"op": "read", "first": 1024, "count": 1, "hostile": False}])
        assert [r["outcome"] for r in results] == ["ok", "ok"]
        mem = m.domain("untrusted").memory
        assert bytes(mem[0x1000:0x1005]) == b"hello"

    def test_network_via_dma(self):
        results, m = untrusted([{"op": "net_send", "data": "70696e67"},
                                {"op": "net_recv", "addr": 8192, "len": 16}])
        assert [r["length"] for r in results] == [4, 4]
        assert bytes(m.domain("untrusted").memory[8192:8196]) == b"ping"
        assert m.events("DmaTransfer")

    @pytest.mark.parametrize("action, outcome", [
        ({"op": "read_foreign", "first": 300}, "out-of-partition"),
        ({"op": "dma", "addr": 0, "len": 4}, "route-disabled"),
        ({"op": "status", "mailbox": "network.req"}, "dummy"),
        ({"op": "reset", "target": "tee1"}, "not-rm"),
        ({"op": "mb_write", "mailbox": "serial_out.req"}, "no-access"),
        ({"op": "mb_read", "mailbox": "serial_in.resp"}, "no-access"),
        ({"op": "auth", "credential": "00" * 32}, "auth-failed"),
        ({"op": "nonsense"}, "unknown-op"),
    ])
    def test_hostile_ops_fail(self, action, outcome):
        results, _ = untrusted([dict(action, hostile=True)])
        assert results[0]["outcome"] == outcome

    def test_dma_outside_window(self):
        results, _ = untrusted([{"op": "open", "resource": "network"},
                                {"op": "dma", "addr": 70000, "len": 4, "hostile": True}])
        assert results[1]["outcome"] == "window-violation"

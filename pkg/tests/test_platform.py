import hashlib

import pytest

from splittrust import devices
from splittrust.guards import Route
from splittrust.mailbox import INFINITE, Quota
from splittrust.manifest import default_manifest
from splittrust.platform import (
    NotRm,
    RouteDisabled,
    WindowViolation,
    boot,
    dump_trace,
    load_trace,
    trace_bytes,
)


@pytest.fixture(scope="module")
def manifest():
    return default_manifest()


@pytest.fixture
def machine(manifest):
    return boot(manifest)


def loaded_order(m):
    return [e.domain for e in m.trace if e.event == "BootLoaded"]


class TestBoot:
    def test_completes(self, machine):
        assert machine.events("BootComplete")
        assert not machine.events("BootAbort")

    def test_storage_then_rm_first(self, machine, manifest):
        order = loaded_order(machine)
        assert order[:2] == [manifest.io_domain("storage").id, 0]
        assert sorted(order) == sorted(d.id for d in manifest.domains)

    def test_pcrs_match_measurement(self, machine, manifest):
        loaded = {e.domain: e.detail["pcr"] for e in machine.events("BootLoaded")}
        for d in manifest.domains:
            digest = hashlib.sha256(manifest.image_payload(d.image)).digest()
            assert loaded[d.id] == hashlib.sha256(bytes(32) + digest).digest()

    def test_storage_marked_used_after_serving(self, machine, manifest):
        d = manifest.io_domain("storage")
        digest = hashlib.sha256(manifest.image_payload(d.image)).digest()
        boot_value = hashlib.sha256(bytes(32) + digest).digest()
        assert machine.bank.read(d.pcr_index) == hashlib.sha256(boot_value + b"\xf5" * 32).digest()

    def test_mailboxes_default_after_boot(self, machine):
        assert all(mb.is_default for mb in machine.mailboxes.values())

    def test_deterministic(self, manifest):
        assert trace_bytes(boot(manifest).trace) == trace_bytes(boot(manifest).trace)

    def test_trace_file_round_trip(self, machine, tmp_path):
        path = tmp_path / "t.jsonl"
        dump_trace(machine.trace, path)
        assert trace_bytes(load_trace(path)) == trace_bytes(machine.trace)


class TestResetGuard:
    def test_only_rm_commands_pmu(self, machine, manifest):
        with pytest.raises(NotRm):
            machine.request_reset(manifest.untrusted.id, 1)

    def test_live_session_blocks_both_ends(self, machine, manifest):
        net = manifest.io_domain("network").id
        machine.mailboxes["network.req"].delegate(0, 1, Quota(INFINITE, machine.now + 50), machine.now)
        assert machine.request_reset(0, 1).status == "blocked"
        assert machine.request_reset(0, net).status == "blocked"
        assert machine.request_reset(0, 2).ok

    def test_reset_remeasures(self, machine, manifest):
        before = len(machine.events("BootLoaded"))
        assert machine.request_reset(0, 2).ok
        assert len(machine.events("BootLoaded")) == before + 1
        assert machine.events("DomainReset")[-1].detail["target"] == 2


class TestArbiter:
    def test_fifo_path_rejects_dma(self, machine, manifest):
        net = manifest.io_domain("network").id
        assert machine.arbiter_route(net) is Route.FIFO
        with pytest.raises(RouteDisabled):
            machine.dma_transfer(net, "out", 0x100, 4)

    def test_dma_when_untrusted_holds_data_mailbox(self, machine, manifest):
        net = manifest.io_domain("network").id
        unt = manifest.untrusted.id
        machine.mailboxes["network.req"].delegate(0, unt, Quota(INFINITE, machine.now + 50), machine.now)
        machine.domains[unt].memory[0x100:0x104] = b"ping"
        assert machine.dma_transfer(net, "out", 0x100, 4) == 4
        assert machine.device("network").sent[-1] == b"ping"
        assert machine.dma_transfer(net, "in", 0x200, 16) == 4
        assert bytes(machine.domains[unt].memory[0x200:0x204]) == b"ping"
        with pytest.raises(WindowViolation):
            machine.dma_transfer(net, "out", 65530, 16)
        assert machine.events("DmaRejected")[-1].detail["code"] == "window-violation"


class TestDevices:
    def test_bootfs_round_trip(self):
        dev = devices.Storage(blocks=64, boot_blocks=16)
        images = {"a": b"x" * 700, "b": b"y"}
        entries = devices.format_bootfs(dev, images)
        assert [e.name for e in entries] == ["a", "b"]
        assert devices.bootfs_read(dev, "a") == images["a"]
        assert devices.bootfs_lookup(dev, "b").digest == hashlib.sha256(b"y").digest()
        with pytest.raises(devices.NotFound):
            devices.bootfs_lookup(dev, "c")

    def test_unformatted(self):
        with pytest.raises(devices.BadMagic):
            devices.bootfs_entries(devices.Storage(blocks=16, boot_blocks=8))

    def test_storage_bounds(self):
        with pytest.raises(devices.DeviceError):
            devices.Storage(blocks=16, boot_blocks=8).read(15, 2)

    def test_serial_in(self):
        s = devices.SerialIn(["a"])
        s.inject("b")
        assert [s.readline(), s.readline(), s.readline()] == ["a", "b", None]

    def test_pump_needs_fresh_mac(self):
        import hmac
        import struct
        key = b"\x9a" * 32
        pump = devices.InsulinPump(key.hex())
        ch = pump.auth()
        tag = hmac.new(key, ch + struct.pack("<H", 3), hashlib.sha256).digest()
        pump.dose(3, tag)
        assert pump.doses == [3]
        with pytest.raises(devices.PumpAuthError):
            pump.dose(3, tag)  # challenge already consumed

    def test_echo_network(self):
        n = devices.Network("echo")
        n.send(b"hi")
        assert n.recv() == b"hi" and n.recv() is None

    def test_link_down(self):
        with pytest.raises(devices.LinkDown):
            devices.Network("echo", link_down=True).send(b"x")

import json

import pytest

from splittrust.scenarios import (
    BREACH,
    SCENARIO_NAMES,
    UnknownScenario,
    blocked_gap,
    load_scenario,
    phases,
    prepare_manifest,
)
from splittrust.platform import TraceEvent


def events(trace, name, **match):
    return [e for e in trace if e.event == name and all(e.detail.get(k) == v for k, v in match.items())]


class TestLoading:
    def test_all_shipped_load(self):
        for name in SCENARIO_NAMES:
            assert load_scenario(name)["name"]

    def test_unknown(self):
        with pytest.raises(UnknownScenario):
            load_scenario("no-such-thing")

    def test_base_inheritance(self):
        spec = load_scenario("banking-tampered")
        assert spec["hooks"] == load_scenario("banking")["hooks"]
        assert spec["tamper"]

    def test_from_path(self, tmp_path):
        p = tmp_path / "s.json"
        p.write_text(json.dumps({"name": "mine", "base": "boot"}))
        assert load_scenario(str(p))["judge"] == "boot"

    def test_tamper_changes_image(self):
        plain = prepare_manifest(load_scenario("banking"))
        tampered = prepare_manifest(load_scenario("banking-tampered"))
        assert plain.image_payload("banking") != tampered.image_payload("banking")
        assert plain.devices["network"]["expected_digest"] == tampered.devices["network"]["expected_digest"]


class TestBanking:
    def test_passes(self, scenarios):
        r = scenarios["banking"]
        assert r.passed, r.first_failure

    def test_secret_and_pin_flow(self, scenarios):
        trace = scenarios["banking"].trace
        printed = "".join(e.detail.get("text", "") for e in events(trace, "DeviceEffect", device="serial_out"))
        assert printed.count("heron-7731") == 1
        assert "pwned" not in printed

    def test_no_attack_succeeded(self, scenarios):
        trace = scenarios["banking"].trace
        assert not [e for e in events(trace, "Attack") if e.detail.get("outcome") in BREACH]
        hostile = [e for e in events(trace, "Workload") if e.detail.get("hostile")]
        assert hostile and not [e for e in hostile if e.detail["outcome"] in BREACH]

    def test_stale_session_abandoned_then_fresh(self, scenarios):
        trace = scenarios["banking"].trace
        assert events(trace, "VerifyFailed", reason="stale-domain")
        assert events(trace, "SessionAbandoned", resource="network")
        assert events(trace, "SessionVerified", resource="network")

    def test_tampered_rejected(self, scenarios):
        r = scenarios["banking-tampered"]
        assert r.passed, r.first_failure
        assert events(r.trace, "AppResult", app="banking")[0].detail["outcome"] == "rejected:pcr-mismatch"


class TestInsulin:
    def test_passes(self, scenarios):
        r = scenarios["insulin"]
        assert r.passed, r.first_failure

    def test_five_sessions_and_doses(self, scenarios):
        trace = scenarios["insulin"].trace
        assert len(events(trace, "AppResult", app="insulin", outcome="ok")) == 5
        doses = [e.detail["units"] for e in events(trace, "DeviceEffect", device="pump", op="dose")]
        readings = [132, 180, 95, 240, 151]
        # clamp(0.1 * (g - 110), 0, 10), rounded down
        assert doses == [max(0, min(10, (g - 110) // 10)) for g in readings]

    def test_pump_hijack_failed(self, scenarios):
        trace = scenarios["insulin"].trace
        assert not events(trace, "DeviceEffect", device="pump", op="dose-rejected")
        hijacks = events(trace, "Attack", kind="hijack")
        assert hijacks and all(e.detail["outcome"] not in BREACH for e in hijacks)


class TestBoot:
    def test_phases(self, scenarios):
        r = scenarios["boot"]
        assert r.passed
        assert r.phases["boot"] > 0


class TestContention:
    def test_gaps(self, scenarios):
        r = scenarios["contention"]
        assert r.passed, r.first_failure
        for k in (10, 50, 200):
            assert abs(r.metrics["gaps"][str(k)] - k) <= 1

    def test_stalls_exceed_gap(self, scenarios):
        stalls = scenarios["contention"].metrics["stalls"]
        assert stalls["200"] > 200

    def test_blocked_gap_synthetic(self):
        t = [
            TraceEvent(5, "MailboxDelegated", 0, "s", {"target": 1, "deadline": 30}),
            TraceEvent(6, "Granted", 0, None, {"requester": 1, "resource": "storage", "deadline": 30}),
            TraceEvent(10, "CompatBlocked", 7, None, {"resource": "storage"}),
            TraceEvent(33, "CompatUnblocked", 7, None, {"resource": "storage"}),
        ]
        assert blocked_gap(t, 1, 7) == [20]

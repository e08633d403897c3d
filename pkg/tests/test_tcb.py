from splittrust.scenarios import load_scenario, prepare_manifest
from splittrust.tcb import TcbReport, tcb_report

BASE = {"Prog", "mailbox", "reset-guard", "arbiter", "RoT"}


class TestReports:
    def test_banking(self, scenarios):
        r = tcb_report(scenarios["banking"].trace, prepare_manifest(load_scenario("banking")))
        for g in ("C", "I", "As", "Ag"):
            assert r.strong[g] == BASE
        assert r.weak["C"] == {"Proc", "Mem", "I/O", "interconnects"}

    def test_insulin_general_availability(self, scenarios):
        r = tcb_report(scenarios["insulin"].trace, prepare_manifest(load_scenario("insulin")))
        assert {"RM", "SD"} <= r.strong["Ag"]
        assert not {"RM", "SD"} & r.strong["C"]

    def test_boot_only_is_empty(self, scenarios):
        r = tcb_report(scenarios["boot"].trace)
        assert all(not r.strong[g] for g in r.strong)


class TestRender:
    def test_groups_identical_guarantees(self):
        r = TcbReport()
        for g in ("C", "I", "As"):
            r.strong[g] = frozenset({"RoT", "Prog"})
        r.strong["Ag"] = frozenset({"Prog", "RoT", "RM"})
        text = r.render()
        assert text.startswith("Owner T[C,I,As] s:{Prog, RoT} w:{}")
        assert "T[Ag] s:{Prog, RoT, RM}" in text

    def test_to_dict_order(self):
        r = TcbReport()
        r.strong["C"] = frozenset({"RoT", "mailbox", "Prog"})
        assert r.to_dict()["C"]["strong"] == ["Prog", "mailbox", "RoT"]

"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""

import json
import os
import random
import subprocess
import sys
import time
from pathlib import Path

import pytest

from splittrust import crypto, frames, harness
from splittrust.cli import main
from splittrust.frames import Op
from splittrust.mutants import MUTANTS
from splittrust.platform import load_trace, trace_bytes
from splittrust.apps import decode_history
from splittrust.scenarios import BREACH, execute, freshness_trial, load_scenario, prepare_manifest, run_scenario
from splittrust.tcb import tcb_report

ROOT = Path(__file__).resolve().parent.parent
REFERENCE = ROOT / "tools" / "reference_pcrs.py"


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


def events(trace, name, **match):
    return [e for e in trace if e.event == name and all(e.detail.get(k) == v for k, v in match.items())]


def test_1_check_default_bounds(report):
    started = time.perf_counter()
    r = harness.explore(harness.Bounds.named("default"))
    seconds = time.perf_counter() - started
    report(1, r.ok and seconds < 60,
           f"{r.states_explored} states, {len(r.violations)} violations, {seconds:.1f}s")


def test_2_mutants_caught(report):
    bounds = harness.Bounds.named("default")
    summary = []
    ok = True
    for name, cls in MUTANTS.items():
        r = harness.explore(bounds, cls())
        # a property violation, not just divergence from the reference model
        props = [cx for cx in r.violations if cx.property_id != "M"]
        cx = min(props, key=len, default=None)
        if cx is None:
            ok = False
            summary.append(f"{name}:missed")
            continue
        restored = harness.Counterexample.from_json(json.loads(json.dumps(cx.to_json())))
        caught = len(restored) <= 8 and harness.replay(restored) == "confirmed"
        ok = ok and caught
        summary.append(f"{name}:{cx.property_id}/{len(cx)}{'' if caught else ':not-replayed'}")
    report(2, ok and len(MUTANTS) == 6, " ".join(summary))


def test_3_boot_order_and_pcrs(report, tmp_path, capsys):
    trace_path = tmp_path / "boot.jsonl"
    code = main(["run", "boot", "--trace-out", str(trace_path)])
    capsys.readouterr()
    manifest_path = tmp_path / "manifest.json"
    manifest = prepare_manifest(load_scenario("boot"))
    manifest_path.write_text(json.dumps(manifest.to_json()))
    out = subprocess.run([sys.executable, str(REFERENCE), str(manifest_path)],
                         check=True, capture_output=True, text=True).stdout
    reference = json.loads(out)
    loaded = [e for e in load_trace(trace_path) if e.event == "BootLoaded"]
    names = [manifest.domain(e.domain).name for e in loaded]
    order_ok = names[:2] == ["storage", "rm"] and sorted(names) == sorted(reference)
    mismatched = [n for n, e in zip(names, loaded) if e.detail["pcr"] != reference[n]]
    report(3, code == 0 and order_ok and not mismatched,
           f"order {' -> '.join(names)}; {len(reference) - len(mismatched)}/{len(reference)} PCRs match reference")


def test_4_freshness(report):
    stale = sum(freshness_trial(seed, inject=True) == "stale-domain" for seed in range(100))
    false_pos = sum(freshness_trial(seed, inject=False) != "verified" for seed in range(100))
    report(4, stale == 100 and false_pos == 0,
           f"stale-domain {stale}/100 with injection, {false_pos}/100 false positives without")


def test_5_contention(report):
    spec = load_scenario("contention")
    spec["expect"] = dict(spec["expect"], ks=[10, 50, 200], tolerance=1)
    r = run_scenario(spec)
    gaps = {int(k): v for k, v in r.metrics["gaps"].items()}
    ok = all(abs(gaps[k] - k) <= 1 for k in (10, 50, 200))
    report(5, ok and r.passed, f"blocked gap per K: {gaps}")


def test_6_banking_and_insulin(report, capsys, tmp_path):
    paths = {name: tmp_path / f"{name}.jsonl" for name in ("banking", "insulin")}
    codes = {name: main(["run", name, "--trace-out", str(p)]) for name, p in paths.items()}
    capsys.readouterr()
    bank = load_trace(paths["banking"])
    ins = load_trace(paths["insulin"])
    failed = []
    for trace in (bank, ins):
        failed += [e.detail for e in events(trace, "Attack") if e.detail.get("outcome") in BREACH]
        failed += [e.detail for e in events(trace, "Workload")
                   if e.detail.get("hostile") and e.detail["outcome"] in BREACH]
    hostile_ops = {e.detail["op"] for t in (bank, ins) for e in events(t, "Workload") if e.detail.get("hostile")}
    attack_kinds = {e.detail["kind"] for t in (bank, ins) for e in events(t, "Attack")}
    covered = ({"mb_read", "mb_write", "status", "reset"} <= hostile_ops
               and {"status-snoop", "reset-attempt", "hijack", "skip-reset"} <= attack_kinds)
    stale_caught = bool(events(bank, "VerifyFailed", reason="stale-domain"))
    ui_hijack = "pwned" not in "".join(e.detail.get("text", "") for e in events(bank, "DeviceEffect",
                                                                              device="serial_out"))
    pump_ok = not events(ins, "DeviceEffect", device="pump", op="dose-rejected") and any(
        e.detail.get("kind") == "hijack" and e.detail.get("target") == "pump.req" for e in events(ins, "Attack"))
    runs = events(ins, "AppResult", app="insulin", outcome="ok")
    history = [e.detail.get("history_len") for e in runs]
    stored = _stored_history()
    ok = (codes == {"banking": 0, "insulin": 0} and not failed and covered and stale_caught
          and ui_hijack and pump_ok and history == [1, 2, 3, 4, 5]
          and [g for g, _ in stored] == [132, 180, 95, 240, 151])
    report(6, ok, f"exit {codes}; breaches {len(failed)}; attacks {sorted(attack_kinds)}; "
                  f"hostile {sorted(hostile_ops)}; stale caught {stale_caught}; history {history}; stored {len(stored)} entries")


def _stored_history():
    """Decode the insulin history block straight off the emulated disk."""
    spec = load_scenario("insulin")
    m = execute(spec)
    block = spec["overrides"]["images"]["insulin"]["config"]["history_block"]
    raw = m.device("storage").read(block, 1)
    return decode_history(raw)


def test_7_tcb(report, scenarios):
    base = {"Prog", "mailbox", "reset-guard", "arbiter", "RoT"}
    bank = tcb_report(scenarios["banking"].trace, prepare_manifest(load_scenario("banking")))
    ins = tcb_report(scenarios["insulin"].trace, prepare_manifest(load_scenario("insulin")))
    ok = all(bank.strong[g] == base for g in ("C", "I", "As")) and {"RM", "SD"} <= ins.strong["Ag"]
    report(7, ok, f"banking {bank.render()} | insulin Ag strong {sorted(ins.strong['Ag'])}")


def test_8_determinism(report, scenarios):
    names = ("boot", "banking", "banking-tampered", "insulin", "contention")
    same = {n: trace_bytes(run_scenario(n).trace) == trace_bytes(scenarios[n].trace) for n in names}
    check_a = harness.dump_counterexamples(harness.explore(harness.Bounds.named("small"),
                                                           MUTANTS["wipe-skipped"]()).violations)
    check_b = harness.dump_counterexamples(harness.explore(harness.Bounds.named("small"),
                                                           MUTANTS["wipe-skipped"]()).violations)
    report(8, all(same.values()) and check_a == check_b, f"identical traces: {same}")


def test_9_codec_and_ae(report):
    rng = random.Random(2024)
    sizes = range(0, frames.max_payload(512) + 1)
    roundtrip = 0
    for n in sizes:
        payload = rng.randbytes(n)
        raw = frames.encode(Op.NET_SEND, payload)
        f = frames.decode(raw)
        roundtrip += len(raw) <= 512 and f.opcode == Op.NET_SEND and f.payload == payload
    key = rng.randbytes(32)
    rejected = 0
    for _ in range(1000):
        nonce = rng.randbytes(16)
        sealed = bytearray(crypto.ae_seal(key, nonce, rng.randbytes(rng.randint(1, 200))))
        i = rng.randrange(len(sealed))
        sealed[i] ^= rng.randint(1, 255)
        try:
            crypto.ae_open(key, nonce, bytes(sealed))
        except crypto.AuthFailure:
            rejected += 1
    report(9, roundtrip == len(sizes) == 509 and rejected == 1000,
           f"round-trip {roundtrip}/{len(sizes)} payload sizes; ae_open rejected {rejected}/1000 mutations")

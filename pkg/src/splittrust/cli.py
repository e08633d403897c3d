"""Command-line entry point.

Exit codes: 0 pass, 1 scenario/check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .manifest import InvalidManifest, load_manifest
from .platform import dump_trace, load_trace
from .scenarios import SCENARIO_NAMES, UnknownScenario, load_scenario, prepare_manifest, run_scenario
from .tcb import tcb_report

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--manifest", help="base manifest JSON (default: the shipped one)")
    p.add_argument("--trace-out", help="write the JSONL trace here")
    p.add_argument("--max-ticks", type=int, help="stop the emulator after this many ticks")
    p.add_argument("--seed", type=int, help="seed for randomized inputs; the core is deterministic")
    p.add_argument("--inject", action="append", default=[], metavar="FAULT",
                   help="compromised-manager fault, e.g. skip-reset:network or hijack:pump.req")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="splittrust", description="Split-trust machine emulator")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("boot", parents=[common], help="cold boot and report order and PCRs")
    run = sub.add_parser("run", parents=[common], help="run a scenario")
    run.add_argument("scenario", help=f"one of {', '.join(SCENARIO_NAMES)} or a scenario JSON path")
    run.add_argument("--json", action="store_true", help="print the result as JSON")
    check = sub.add_parser("check", parents=[common], help="bounded exploration of the mailbox composite")
    check.add_argument("--bounds", default="default", help="default, small, or a JSON object of Bounds fields")
    check.add_argument("--mutants", action="store_true", help="also run the mutation suite")
    check.add_argument("--exhaustive", action="store_true", help="do not stop at the first violating depth")
    check.add_argument("--cex-out", help="write counterexamples (JSON) here")
    tcb = sub.add_parser("tcb", parents=[common], help="TCB report from a trace")
    tcb.add_argument("trace", help="JSONL trace file")
    tcb.add_argument("--scenario", help="scenario whose manifest produced the trace")
    return parser


def _manifest(args):
    return load_manifest(args.manifest) if args.manifest else None


def _bounds(text: str) -> harness.Bounds:
    try:
        return harness.Bounds.named(text)
    except ValueError:
        pass
    try:
        fields = json.loads(text)
    except json.JSONDecodeError:
        raise UsageError(f"unknown bounds {text!r}") from None
    try:
        return harness.Bounds.from_json(fields)
    except (TypeError, ValueError, KeyError) as err:
        raise UsageError(f"bad bounds: {err}") from None


def _run(args, name: str) -> int:
    try:
        spec = load_scenario(name)
    except UnknownScenario:
        raise UsageError(f"unknown scenario {name!r}") from None
    result = run_scenario(spec, _manifest(args), args.inject, args.max_ticks, args.seed)
    if args.trace_out:
        dump_trace(result.trace, args.trace_out)
    if getattr(args, "json", False):
        print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    else:
        if args.command == "boot":
            _print_boot(result)
        for c in result.checks:
            print(c.line())
        if result.phases:
            print("phases: " + ", ".join(f"{k}={v}" for k, v in result.phases.items()))
        if result.metrics:
            print("metrics: " + json.dumps(result.metrics, sort_keys=True))
        print(f"scenario {result.name}: {'PASS' if result.passed else 'FAIL'}")
    return EXIT_OK if result.passed else EXIT_FAIL


def _print_boot(result) -> None:
    for e in result.trace:
        if e.event == "BootLoaded":
            print(f"tick {e.tick:5d}  domain {e.domain}  {e.detail['image']:<12} pcr {e.detail['pcr'].hex()}")
        if e.event == "BootComplete":
            break


def _check(args) -> int:
    bounds = _bounds(args.bounds)
    try:
        result = harness.explore(bounds, exhaustive=args.exhaustive)
    except harness.BoundsTooLarge as err:
        raise UsageError(str(err)) from None
    print(f"states explored: {result.states_explored}  transitions: {result.transitions}  "
          f"violations: {len(result.violations)}  ({result.seconds:.1f}s)")
    for cx in result.violations:
        print(f"  {cx.property_id}: {harness.PROPERTY_TEXT.get(cx.property_id, '')} (length {len(cx)})")
    ok = result.ok
    found = list(result.violations)
    if args.mutants:
        from .mutants import MUTANTS

        for name, cls in MUTANTS.items():
            r = harness.explore(bounds, cls())
            # a property violation counts; divergence from the model alone does not
            shortest = min((cx for cx in r.violations if cx.property_id != "M"), key=len, default=None)
            replayed = shortest is not None and harness.replay(shortest) == "confirmed"
            caught = replayed and len(shortest) <= 8
            ok = ok and caught
            found.extend(r.violations)
            props = sorted({cx.property_id for cx in r.violations})
            detail = f"{props} shortest {len(shortest)}" if shortest else "no violation"
            print(f"mutant {name:<22} {'CAUGHT' if caught else 'MISSED'} {detail}")
    if args.cex_out:
        with open(args.cex_out, "w") as fh:
            fh.write(harness.dump_counterexamples(found))
    return EXIT_OK if ok else EXIT_FAIL


def _tcb(args) -> int:
    try:
        trace = load_trace(args.trace)
    except OSError as err:
        raise UsageError(str(err)) from None
    manifest = _manifest(args)
    if args.scenario:
        try:
            manifest = prepare_manifest(load_scenario(args.scenario), manifest)
        except UnknownScenario:
            raise UsageError(f"unknown scenario {args.scenario!r}") from None
    report = tcb_report(trace, manifest)
    print(report.render())
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        if args.command == "boot":
            return _run(args, "boot")
        if args.command == "run":
            return _run(args, args.scenario)
        if args.command == "check":
            return _check(args)
        if args.command == "tcb":
            return _tcb(args)
    except UsageError as err:
        print(f"splittrust: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidManifest, OSError) as err:
        print(f"splittrust: {err}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Trusted-computing-base report derived from a scenario trace.

Components are only listed when the trace shows the security-critical
programs actually depended on them:

* ``Prog`` and ``RoT`` once a TEE program was measured and run after boot.
* ``mailbox`` and ``reset-guard`` once such a program held a session.
* ``arbiter`` once it held a mailbox that an arbiter watches (DMA-capable device).
* ``Proc``/``Mem`` (weak) for the program's own domain, ``I/O`` (weak) for
  device sessions and ``interconnects`` (weak) for any mailbox session.
* Under general availability, ``RM`` and ``SD`` join the strong set when one
  program kept data on storage across two or more sessions.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .manifest import DomainKind, Manifest, default_manifest

COMPONENTS = ("Prog", "mailbox", "reset-guard", "arbiter", "RoT", "RM", "SD",
              "Proc", "Mem", "I/O", "interconnects")
GUARANTEES = ("C", "I", "As", "Ag")


def _ordered(items) -> list:
    return sorted(items, key=COMPONENTS.index)


@dataclass
class TcbReport:
    strong: dict = field(default_factory=lambda: {g: frozenset() for g in GUARANTEES})
    weak: dict = field(default_factory=lambda: {g: frozenset() for g in GUARANTEES})

    def to_dict(self) -> dict:
        return {g: {"strong": _ordered(self.strong[g]), "weak": _ordered(self.weak[g])} for g in GUARANTEES}

    def render(self) -> str:
        """Compact notation; guarantees with identical sets share one term."""
        groups: list = []
        for g in GUARANTEES:
            key = (self.strong[g], self.weak[g])
            for entry in groups:
                if entry[1] == key:
                    entry[0].append(g)
                    break
            else:
                groups.append(([g], key))
        terms = []
        for tags, (s, w) in groups:
            terms.append(f"T[{','.join(tags)}] s:{{{', '.join(_ordered(s))}}} w:{{{', '.join(_ordered(w))}}}")
        return "Owner " + " U ".join(terms)


def tcb_report(trace, manifest: Optional[Manifest] = None) -> TcbReport:
    m = manifest or default_manifest()
    tees = {d.id for d in m.domains_of(DomainKind.TEE)}
    io = {d.id for d in m.domains_of(DomainKind.IO)}
    watched = {a.mailbox for a in m.arbiters}
    fixed_end = {mb.id: mb.fixed_end for mb in m.mailboxes}

    ran = False
    measured = False
    sessions = False
    arbiter = False
    device = False
    storage_sessions: Counter = Counter()
    # image staging during boot delegates mailboxes too; only count what follows it
    booting = any(e.event == "PowerOn" for e in trace)
    run = 0
    for e in trace:
        d = e.detail
        if e.event == "PowerOn":
            booting = True
            run += 1
        if booting:
            booting = e.event != "BootComplete"
            continue
        if e.event == "BootLoaded" and e.domain in tees and e.detail.get("image") != m.domain(e.domain).image:
            measured = True
        elif e.event == "Quote" and e.domain in tees:
            measured = True
        elif e.event == "AppResult" and e.domain in tees:
            ran = True
        elif e.event == "Granted" and d.get("requester") in tees:
            sessions = ran = True
            if d.get("resource") == "storage":
                storage_sessions[run, d.get("program")] += 1
        elif e.event == "MailboxDelegated" and d.get("target") in tees:
            sessions = ran = True
            if e.mailbox in watched:
                arbiter = True
            if fixed_end.get(e.mailbox) in io:
                device = True

    strong = set()
    weak = set()
    if ran:
        strong.add("Prog")
        weak |= {"Proc", "Mem"}
    if ran or measured:
        strong.add("RoT")
    if sessions:
        strong |= {"mailbox", "reset-guard"}
        weak.add("interconnects")
    if arbiter:
        strong.add("arbiter")
    if device:
        weak.add("I/O")
    general = set(strong)
    if any(n >= 2 for n in storage_sessions.values()):
        general |= {"RM", "SD"}
    report = TcbReport()
    for g in ("C", "I", "As"):
        report.strong[g] = frozenset(strong)
        report.weak[g] = frozenset(weak)
    report.strong["Ag"] = frozenset(general)
    report.weak["Ag"] = frozenset(weak)
    return report

"""Machine manifest: loading, schema validation and semantic checks."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import jsonschema

from .attestation import BootImage
from .mailbox import RESOURCE_MANAGER, FixedRole, InvalidConfig, MailboxConfig


class InvalidManifest(ValueError):
    code = "invalid-manifest"


class DomainKind(str, Enum):
    RESOURCE_MANAGER = "ResourceManager"
    TEE = "Tee"
    IO = "Io"
    UNTRUSTED = "Untrusted"


@dataclass(frozen=True)
class DomainSpec:
    id: int
    name: str
    kind: DomainKind
    image: str
    memory: int
    pcr_index: int
    base: int = 0
    device: Optional[str] = None


@dataclass(frozen=True)
class MailboxSpec:
    id: str
    fixed_end: int
    fixed_role: FixedRole
    wired: frozenset
    depth: int = 4
    msg_size: int = 64
    plane: str = "ctrl"
    direction: str = "req"

    def to_config(self) -> MailboxConfig:
        return MailboxConfig(self.id, self.fixed_end, self.fixed_role, self.wired,
                             self.depth, self.msg_size)


@dataclass(frozen=True)
class QueueSpec:
    id: str
    a: int
    b: Union[int, str]  # "tpm" for the TPM mediator endpoint
    depth: int = 4
    msg_size: int = 512


@dataclass(frozen=True)
class ArbiterSpec:
    io_domain: int
    mailbox: str
    window: tuple


@dataclass(frozen=True)
class StorageBinding:
    partition: int
    first: int
    last: int
    credential: bytes


@dataclass(frozen=True)
class Launch:
    domain: str
    image: str
    at: int = 0
    period: int = 1
    count: int = 1


@dataclass
class Policy:
    max_msgs: int = 65536
    max_ticks: int = 10000
    reserve_msgs: int = 2
    launches: list = field(default_factory=list)
    storage_bindings: dict = field(default_factory=dict)


@dataclass
class Manifest:
    name: str
    domains: list
    mailboxes: list
    queues: list
    arbiters: list
    images: dict
    boot_order: list
    policy: Policy
    devices: dict
    device_key: bytes
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    # -- lookups -------------------------------------------------------------

    def domain(self, key: Union[int, str]) -> DomainSpec:
        for d in self.domains:
            if d.id == key or d.name == key:
                return d
        raise KeyError(key)

    def domains_of(self, kind: DomainKind) -> list:
        return [d for d in self.domains if d.kind is kind]

    def io_domain(self, device: str) -> Optional[DomainSpec]:
        for d in self.domains:
            if d.kind is DomainKind.IO and d.device == device:
                return d
        return None

    @property
    def untrusted(self) -> DomainSpec:
        return self.domains_of(DomainKind.UNTRUSTED)[0]

    def mailbox(self, mailbox_id: str) -> MailboxSpec:
        for m in self.mailboxes:
            if m.id == mailbox_id:
                return m
        raise KeyError(mailbox_id)

    def mailboxes_of(self, domain_id: int) -> list:
        """Mailboxes whose fixed end is ``domain_id``, in manifest order."""
        return [m for m in self.mailboxes if m.fixed_end == domain_id]

    def image_payload(self, name: str) -> bytes:
        entry = self.images[name]
        return json.dumps(entry, sort_keys=True, separators=(",", ":")).encode()

    def boot_image(self, name: str) -> BootImage:
        return BootImage(name, self.image_payload(name))

    def image_config(self, name: str) -> dict:
        return dict(self.images[name].get("config", {}))

    def to_json(self) -> dict:
        return copy.deepcopy(self.raw)

    def with_overrides(self, overrides: dict) -> "Manifest":
        return parse_manifest(merge(self.raw, overrides))


# ---------------------------------------------------------------------------


def _schema() -> dict:
    text = resources.files("splittrust").joinpath("data/manifest.schema.json").read_text()
    return json.loads(text)


_LIST_KEYS = {"domains": "id", "mailboxes": "id", "queues": "id"}


def merge(base: dict, overrides: dict) -> dict:
    """Deep-merge ``overrides`` into a copy of ``base``.

    Lists of domains, mailboxes and queues are merged by ``id``: matching
    entries are merged field by field, new ones appended.  Other lists are
    replaced.
    """
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if key in _LIST_KEYS and isinstance(value, list):
            ident = _LIST_KEYS[key]
            items = out.setdefault(key, [])
            index = {item[ident]: i for i, item in enumerate(items)}
            for entry in value:
                if entry[ident] in index:
                    pos = index[entry[ident]]
                    items[pos] = merge(items[pos], entry)
                else:
                    items.append(copy.deepcopy(entry))
        elif isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_manifest(data: dict) -> Manifest:
    try:
        jsonschema.validate(data, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InvalidManifest(f"{where}: {exc.message}") from None

    domains = [
        DomainSpec(
            id=d["id"], name=d["name"], kind=DomainKind(d["kind"]), image=d["image"],
            memory=d["memory"], pcr_index=d.get("pcr_index", d["id"]), base=d.get("base", 0),
            device=d.get("device"),
        )
        for d in data["domains"]
    ]
    mailboxes = [
        MailboxSpec(
            id=m["id"], fixed_end=m["fixed_end"], fixed_role=FixedRole(m["fixed_role"]),
            wired=frozenset(m["wired"]), depth=m.get("depth", 4), msg_size=m.get("msg_size", 64),
            plane=m.get("plane", "ctrl"), direction=m.get("direction", "req"),
        )
        for m in data["mailboxes"]
    ]
    queues = [QueueSpec(q["id"], q["a"], q["b"], q.get("depth", 4), q.get("msg_size", 512))
              for q in data["queues"]]
    arbiters = [ArbiterSpec(a["io_domain"], a["mailbox"], tuple(a["window"])) for a in data["arbiters"]]
    pol = data.get("policy", {})
    policy = Policy(
        max_msgs=pol.get("max_msgs", 65536),
        max_ticks=pol.get("max_ticks", 10000),
        reserve_msgs=pol.get("reserve_msgs", 2),
        launches=[Launch(**entry) for entry in pol.get("launches", [])],
        storage_bindings={
            prog: StorageBinding(b["partition"], b["first"], b["last"], bytes.fromhex(b["credential"]))
            for prog, b in pol.get("storage_bindings", {}).items()
        },
    )
    man = Manifest(
        name=data.get("name", "unnamed"),
        domains=domains,
        mailboxes=mailboxes,
        queues=queues,
        arbiters=arbiters,
        images=copy.deepcopy(data["images"]),
        boot_order=list(data.get("boot_order") or [d.name for d in domains]),
        policy=policy,
        devices=copy.deepcopy(data.get("devices", {})),
        device_key=bytes.fromhex(data.get("device_key", "00" * 32)),
        seed=data.get("seed", 0),
        raw=copy.deepcopy(data),
    )
    validate(man)
    return man


def validate(man: Manifest) -> None:
    """Semantic checks; raises InvalidManifest naming the first violation."""
    ids = [d.id for d in man.domains]
    if len(set(ids)) != len(ids):
        raise InvalidManifest("duplicate domain id")
    names = [d.name for d in man.domains]
    if len(set(names)) != len(names):
        raise InvalidManifest("duplicate domain name")
    rms = man.domains_of(DomainKind.RESOURCE_MANAGER)
    if len(rms) != 1:
        raise InvalidManifest(f"expected exactly one ResourceManager domain, got {len(rms)}")
    if rms[0].id != RESOURCE_MANAGER:
        raise InvalidManifest(f"ResourceManager must have id {RESOURCE_MANAGER}")
    if len(man.domains_of(DomainKind.UNTRUSTED)) != 1:
        raise InvalidManifest("expected exactly one Untrusted domain")
    pcrs = [d.pcr_index for d in man.domains]
    if len(set(pcrs)) != len(pcrs):
        raise InvalidManifest("duplicate pcr_index")
    devices = [d.device for d in man.domains if d.kind is DomainKind.IO]
    if None in devices or len(set(devices)) != len(devices):
        raise InvalidManifest("every Io domain needs a distinct device")
    if man.io_domain("storage") is None:
        raise InvalidManifest("no storage domain to boot from")
    for d in man.domains:
        if d.image not in man.images:
            raise InvalidManifest(f"domain {d.name}: unknown image {d.image!r}")
    for name in man.images:
        if len(name.encode()) > 16:
            raise InvalidManifest(f"image name {name!r} longer than 16 bytes")
    known = set(ids)
    seen = set()
    for m in man.mailboxes:
        if m.id in seen:
            raise InvalidManifest(f"duplicate mailbox id {m.id}")
        seen.add(m.id)
        undeclared = ({m.fixed_end} | set(m.wired)) - known
        if undeclared:
            raise InvalidManifest(f"mailbox {m.id} wired to undeclared domain {sorted(undeclared)[0]}")
        try:
            m.to_config().validate()
        except InvalidConfig as exc:
            raise InvalidManifest(str(exc)) from None
    qids = set()
    for q in man.queues:
        if q.id in qids:
            raise InvalidManifest(f"duplicate queue id {q.id}")
        qids.add(q.id)
        ends = {q.a} | ({q.b} if q.b != "tpm" else set())
        if ends - known:
            raise InvalidManifest(f"queue {q.id} references undeclared domain {sorted(ends - known)[0]}")
    for a in man.arbiters:
        if a.io_domain not in known or man.domain(a.io_domain).kind is not DomainKind.IO:
            raise InvalidManifest(f"arbiter io_domain {a.io_domain} is not an Io domain")
        if a.mailbox not in seen:
            raise InvalidManifest(f"arbiter mailbox {a.mailbox} undeclared")
        lo, hi = a.window
        unt = man.untrusted
        if not (lo < hi and unt.base <= lo and hi <= unt.base + unt.memory):
            raise InvalidManifest("arbiter window must lie inside untrusted memory")
    if sorted(man.boot_order) != sorted(names):
        raise InvalidManifest("boot_order must list every domain exactly once")
    if man.boot_order[0] != man.io_domain("storage").name or man.boot_order[1] != rms[0].name:
        raise InvalidManifest("boot_order must start with the storage domain, then the resource manager")
    storage_id = man.io_domain("storage").id
    staging = [mb for mb in man.mailboxes
               if mb.fixed_end == storage_id and mb.plane == "data" and mb.direction == "resp"]
    for name in man.boot_order[2:]:
        dom = man.domain(name)
        if not any(dom.id in mb.wired for mb in staging):
            raise InvalidManifest(f"domain {name} cannot be staged: not wired to the storage data plane")
    if len(man.device_key) != 32:
        raise InvalidManifest("device_key must be 32 bytes")
    for launch in man.policy.launches:
        if launch.domain not in names or launch.image not in man.images:
            raise InvalidManifest(f"launch references unknown domain or image: {launch}")
    spans = sorted((b.first, b.last, p) for p, b in man.policy.storage_bindings.items())
    for (f1, l1, p1), (f2, _, p2) in zip(spans, spans[1:]):
        if f2 <= l1:
            raise InvalidManifest(f"storage bindings {p1} and {p2} overlap")


def load_manifest(path: Union[str, Path, None] = None) -> Manifest:
    if path is None:
        return default_manifest()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidManifest(f"not JSON: {exc}") from None
    return parse_manifest(data)


def default_manifest_json() -> dict:
    text = resources.files("splittrust").joinpath("data/default_manifest.json").read_text()
    return json.loads(text)


def default_manifest() -> Manifest:
    return parse_manifest(default_manifest_json())

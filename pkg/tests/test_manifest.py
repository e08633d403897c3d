import json

import pytest

from splittrust.manifest import (
    DomainKind,
    InvalidManifest,
    default_manifest,
    default_manifest_json,
    load_manifest,
    merge,
    parse_manifest,
)


def mutated(fn):
    data = default_manifest_json()
    fn(data)
    return data


class TestDefault:
    def test_loads(self):
        m = default_manifest()
        assert m.domain(0).kind is DomainKind.RESOURCE_MANAGER
        assert m.untrusted.name == "untrusted"
        assert m.boot_order[:2] == [m.io_domain("storage").name, "rm"]

    def test_image_payload_is_canonical_json(self):
        m = default_manifest()
        name = m.domains[0].image
        assert m.image_payload(name) == json.dumps(m.images[name], sort_keys=True, separators=(",", ":")).encode()

    def test_load_from_path(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps(default_manifest_json()))
        assert load_manifest(p).name == default_manifest().name

    def test_not_json(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text("{nope")
        with pytest.raises(InvalidManifest):
            load_manifest(p)


class TestValidation:
    def test_duplicate_domain_id(self):
        def f(d):
            d["domains"][2]["id"] = d["domains"][1]["id"]
        with pytest.raises(InvalidManifest):
            parse_manifest(mutated(f))

    def test_undeclared_wiring(self):
        def f(d):
            d["mailboxes"][0]["wired"].append(99)
        with pytest.raises(InvalidManifest, match="undeclared"):
            parse_manifest(mutated(f))

    def test_boot_order_starts_with_storage(self):
        def f(d):
            d["boot_order"][0], d["boot_order"][1] = d["boot_order"][1], d["boot_order"][0]
        with pytest.raises(InvalidManifest, match="boot_order"):
            parse_manifest(mutated(f))

    def test_unknown_image(self):
        def f(d):
            d["domains"][1]["image"] = "missing"
        with pytest.raises(InvalidManifest):
            parse_manifest(mutated(f))

    def test_arbiter_window_inside_untrusted(self):
        def f(d):
            d["arbiters"][0]["window"] = [0, 10 ** 9]
        with pytest.raises(InvalidManifest, match="window"):
            parse_manifest(mutated(f))

    def test_short_device_key(self):
        def f(d):
            d["device_key"] = "00"
        with pytest.raises(InvalidManifest):
            parse_manifest(mutated(f))


class TestMerge:
    def test_list_entries_merge_by_id(self):
        base = {"domains": [{"id": 1, "name": "a", "memory": 4}]}
        out = merge(base, {"domains": [{"id": 1, "memory": 8}, {"id": 2, "name": "b"}]})
        assert out["domains"] == [{"id": 1, "name": "a", "memory": 8}, {"id": 2, "name": "b"}]
        assert base["domains"][0]["memory"] == 4

    def test_dicts_merge_scalars_replace(self):
        assert merge({"a": {"x": 1, "y": 2}, "b": [1]}, {"a": {"y": 3}, "b": [2]}) == {"a": {"x": 1, "y": 3}, "b": [2]}

    def test_with_overrides(self):
        m = default_manifest().with_overrides({"images": {"tee_idle": {"version": 9}}})
        assert m.images["tee_idle"]["version"] == 9
        assert m.image_payload("tee_idle") != default_manifest().image_payload("tee_idle")

"""Reference post-boot PCR values for a manifest, computed with hashlib only.

A boot image is the canonical JSON of its ``images`` entry (sorted keys, no
whitespace).  After measured boot a domain's register holds
SHA-256(32 zero bytes || SHA-256(image)).

    python3 tools/reference_pcrs.py [manifest.json]

prints a JSON object mapping domain name -> hex PCR value.
"""

import hashlib
import json
import sys
from pathlib import Path

DEFAULT = Path(__file__).resolve().parent.parent / "src" / "splittrust" / "data" / "default_manifest.json"


def reference(manifest: dict) -> dict:
    out = {}
    for dom in manifest["domains"]:
        image = json.dumps(manifest["images"][dom["image"]], sort_keys=True, separators=(",", ":")).encode()
        out[dom["name"]] = hashlib.sha256(b"\x00" * 32 + hashlib.sha256(image).digest()).hexdigest()
    return out


if __name__ == "__main__":
    path = Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT
    print(json.dumps(reference(json.loads(path.read_text())), indent=1, sort_keys=True))

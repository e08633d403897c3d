import hashlib
import struct

import pytest

from splittrust import attestation as att
from splittrust import frames
from splittrust.frames import Op

KEY = b"\xd7" * 32
ZERO = bytes(32)


def sha(b):
    return hashlib.sha256(b).digest()


class TestPcrBank:
    def test_power_on_zero(self):
        bank = att.PcrBank(4)
        assert all(bank.read(i) == ZERO for i in range(4))

    def test_extend_chain(self):
        bank = att.PcrBank(2)
        bank.extend(1, b"a" * 32)
        bank.extend(1, b"b" * 32)
        assert bank.read(1) == sha(sha(ZERO + b"a" * 32) + b"b" * 32)

    def test_bad_index(self):
        with pytest.raises(att.BadIndex):
            att.PcrBank(2).read(2)

    def test_boot_and_used_values(self):
        d = sha(b"image")
        assert att.boot_pcr(d) == sha(ZERO + d)
        assert att.used_pcr(d) == sha(sha(ZERO + d) + b"\xf5" * 32)

    def test_bootload_measures(self):
        class Dom:
            pcr_index = 0
            memory = bytearray(b"junk")
        bank = att.PcrBank(1)
        bank.extend(0, b"z" * 32)
        dom = Dom()
        att.bootload(dom, att.BootImage("img", b"payload"), bank)
        assert bank.read(0) == sha(ZERO + sha(b"payload"))
        assert dom.memory == bytearray(4) and dom.state == "running"

    def test_bootload_missing_image(self):
        with pytest.raises(att.ImageMissing):
            att.bootload(type("Dom", (), {"id": 3})(), None, att.PcrBank(1))

    def test_image_name_limit(self):
        with pytest.raises(ValueError):
            att.BootImage("x" * 17, b"")


class TestQuote:
    def setup_method(self):
        self.bank = att.PcrBank(3)
        self.bank.extend(2, sha(b"prog"))
        self.nonce = bytes(range(16))

    def test_accepts_expected(self):
        q = att.quote(self.bank, self.nonce, [2], KEY)
        assert att.verify_quote(q, {2: att.boot_pcr(sha(b"prog"))}, self.nonce, KEY)

    def test_accepts_any_of_several(self):
        q = att.quote(self.bank, self.nonce, [2], KEY)
        assert att.verify_quote(q, {2: [b"x" * 32, self.bank.read(2)]}, self.nonce, KEY)

    def test_reasons(self):
        q = att.quote(self.bank, self.nonce, [2], KEY)
        assert att.verify_quote(q, {2: ZERO}, self.nonce, KEY).reason == "pcr-mismatch"
        assert att.verify_quote(q, {}, bytes(16), KEY).reason == "nonce"
        assert att.verify_quote(q, {}, self.nonce, b"\x00" * 32).reason == "mac"

    def test_serialization(self):
        q = att.quote(self.bank, self.nonce, [0, 2], KEY)
        assert att.Quote.from_bytes(q.to_bytes()) == q

    def test_empty_selection(self):
        with pytest.raises(att.EmptySelection):
            att.quote(self.bank, self.nonce, [], KEY)

    def test_bit_flips_rejected(self):
        import random
        rng = random.Random(7)
        raw = att.quote(self.bank, self.nonce, [1, 2], KEY).to_bytes()
        for _ in range(1000):
            buf = bytearray(raw)
            i = rng.randrange(len(buf))
            buf[i] ^= 1 << rng.randrange(8)
            try:
                q = att.Quote.from_bytes(bytes(buf))
            except (ValueError, struct.error):
                continue  # unparseable counts as rejected
            assert not att.verify_quote(q, {}, q.nonce, KEY)


class TestMediator:
    def setup_method(self):
        self.bank = att.PcrBank(3)
        self.tpm = att.TpmMediator(self.bank, KEY, {5: 1, 6: 2})

    def test_extend_own(self):
        resp, detail = self.tpm.handle(5, att.extend_request(1, b"m" * 32))
        f = frames.decode(resp)
        assert f.opcode == Op.OK and f.payload == sha(ZERO + b"m" * 32)
        assert detail["op"] == "extend"

    def test_extend_foreign_refused(self):
        resp, detail = self.tpm.handle(5, att.extend_request(2, b"m" * 32))
        assert frames.decode(resp).error_code == "forbidden-extend"
        assert self.bank.read(2) == ZERO

    def test_quote_any(self):
        resp, _ = self.tpm.handle(5, att.quote_request(bytes(16), [2]))
        q = att.Quote.from_bytes(frames.decode(resp).payload)
        assert q.selection == (2,)
        assert att.verify_quote(q, {2: ZERO}, bytes(16), KEY)

    def test_malformed(self):
        resp, _ = self.tpm.handle(5, b"\x01")
        assert frames.decode(resp).error_code == "malformed-frame"

    def test_read(self):
        resp, _ = self.tpm.handle(6, frames.encode(Op.TPM_READ, struct.pack("<H", 0)))
        assert frames.decode(resp).payload == ZERO

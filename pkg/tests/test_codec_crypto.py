import hashlib
import hmac

import pytest
from hypothesis import given, strategies as st

from splittrust import crypto, frames
from splittrust.frames import FrameError, Op

KEY = bytes(range(32))
NONCE = bytes(16)


class TestFrames:
    def test_header_layout(self):
        assert frames.encode(0x0102, b"ab") == b"\x02\x01\x02\x00ab"

    @given(st.integers(0, 0xFFFF), st.binary(max_size=508))
    def test_round_trip(self, opcode, payload):
        f = frames.decode(frames.encode(opcode, payload))
        assert (f.opcode, f.payload) == (opcode, payload)

    def test_length_mismatch(self):
        raw = frames.encode(Op.PRINT, b"hello")
        with pytest.raises(FrameError):
            frames.decode(raw[:-1])
        with pytest.raises(FrameError):
            frames.decode(raw + b"x")

    def test_short_header(self):
        with pytest.raises(FrameError):
            frames.decode(b"\x01\x00")

    def test_error_frame(self):
        f = frames.decode(frames.error("no-access"))
        assert f.is_error and f.error_code == "no-access"

    def test_max_payload(self):
        assert frames.max_payload(512) == 508

    def test_600_bytes_need_two_fragments(self):
        parts = frames.fragment(Op.NET_SEND, bytes(600), 512)
        assert len(parts) == 2
        assert all(len(p) <= 512 for p in parts)

    @given(st.binary(max_size=3000), st.sampled_from([16, 64, 512]))
    def test_fragment_round_trip(self, body, size):
        parts = frames.fragment(Op.WRITE_BLOCKS, body, size)
        assert all(len(p) <= size for p in parts)
        assert frames.unfragment(parts) == (Op.WRITE_BLOCKS, body)

    def test_out_of_order_fragment(self):
        parts = frames.fragment(Op.PRINT, bytes(100), 16)
        r = frames.Reassembler()
        r.feed(frames.decode(parts[0]))
        with pytest.raises(FrameError):
            r.feed(frames.decode(parts[2]))

    def test_missing_final(self):
        parts = frames.fragment(Op.PRINT, bytes(100), 16)
        with pytest.raises(FrameError):
            frames.unfragment(parts[:-1])


class TestCrypto:
    def test_hash_is_sha256(self):
        assert crypto.hash_bytes(b"abc") == hashlib.sha256(b"abc").digest()

    def test_mac_is_hmac_sha256(self):
        assert crypto.mac(KEY, b"m") == hmac.new(KEY, b"m", hashlib.sha256).digest()
        assert crypto.mac_verify(KEY, b"m", crypto.mac(KEY, b"m"))
        assert not crypto.mac_verify(KEY, b"n", crypto.mac(KEY, b"m"))

    def test_bad_key_size(self):
        with pytest.raises(ValueError):
            crypto.mac(b"short", b"m")

    @given(st.binary(max_size=600))
    def test_seal_open(self, pt):
        sealed = crypto.ae_seal(KEY, NONCE, pt)
        assert len(sealed) == len(pt) + crypto.TAG_SIZE
        assert crypto.ae_open(KEY, NONCE, sealed) == pt

    def test_ciphertext_hides_plaintext(self):
        pt = b"A" * 64
        assert pt not in crypto.ae_seal(KEY, NONCE, pt)

    def test_wrong_key_or_nonce(self):
        sealed = crypto.ae_seal(KEY, NONCE, b"data")
        with pytest.raises(crypto.AuthFailure):
            crypto.ae_open(bytes(32), NONCE, sealed)
        with pytest.raises(crypto.AuthFailure):
            crypto.ae_open(KEY, b"\x01" * 16, sealed)

    def test_truncated(self):
        with pytest.raises(crypto.AuthFailure):
            crypto.ae_open(KEY, NONCE, b"x" * 10)

    def test_deterministic(self):
        assert crypto.ae_seal(KEY, NONCE, b"x") == crypto.ae_seal(KEY, NONCE, b"x")

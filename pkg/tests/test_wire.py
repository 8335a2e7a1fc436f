"""Frame codec round-trips and malformed-input rejection."""

import io

import numpy as np
import pytest

from dsgp import wire
from dsgp.bound import PartialSums, StepAccum


def roundtrip(tag, payload=b""):
    buf = io.BytesIO()
    wire.write_frame(buf, tag, payload)
    buf.seek(0)
    return wire.read_frame(buf)


class TestFraming:
    def test_roundtrip_with_payload(self):
        tag, payload = roundtrip(wire.TAG_SET_GLOBALS, b"\x01\x02\x03")
        assert tag == wire.TAG_SET_GLOBALS
        assert payload == b"\x01\x02\x03"

    def test_roundtrip_empty_payload(self):
        tag, payload = roundtrip(wire.TAG_COMPUTE_TERMS)
        assert tag == wire.TAG_COMPUTE_TERMS
        assert payload == b""

    def test_length_prefix_counts_payload_only(self):
        buf = io.BytesIO()
        wire.write_frame(buf, wire.TAG_SHUTDOWN, b"abcd")
        raw = buf.getvalue()
        assert raw[:4] == (4).to_bytes(4, "little")
        assert raw[4] == wire.TAG_SHUTDOWN
        assert len(raw) == 4 + 1 + 4

    def test_eof_on_header_raises(self):
        with pytest.raises(wire.ProtocolError):
            wire.read_frame(io.BytesIO(b"\x03\x00"))

    def test_eof_on_payload_raises(self):
        buf = io.BytesIO()
        wire.write_frame(buf, wire.TAG_SET_DATA, b"full payload")
        truncated = io.BytesIO(buf.getvalue()[:-3])
        with pytest.raises(wire.ProtocolError):
            wire.read_frame(truncated)

    def test_back_to_back_frames(self):
        buf = io.BytesIO()
        wire.write_frame(buf, wire.TAG_HELLO, b"a")
        wire.write_frame(buf, wire.TAG_SHUTDOWN)
        buf.seek(0)
        assert wire.read_frame(buf) == (wire.TAG_HELLO, b"a")
        assert wire.read_frame(buf) == (wire.TAG_SHUTDOWN, b"")


class TestHello:
    def test_roundtrip(self):
        version, index = wire.unpack_hello(wire.pack_hello(7))
        assert version == wire.PROTOCOL_VERSION
        assert index == 7

    def test_bad_length(self):
        with pytest.raises(wire.ProtocolError):
            wire.unpack_hello(b"\x00" * 5)


class TestTermsResult:
    def _parts(self, m=3, d=2, seed=0):
        rng = np.random.default_rng(seed)
        D = rng.standard_normal((m, m))
        return PartialSums(
            A=1.5,
            B=2.25,
            C=rng.standard_normal((m, d)),
            D=D + D.T,
            KL=0.75,
            count=11,
        )

    def test_roundtrip_exact(self):
        parts = self._parts()
        back = wire.unpack_terms_result(wire.pack_terms_result(parts), 3, 2)
        assert back.A == parts.A
        assert back.B == parts.B
        assert back.KL == parts.KL
        assert back.count == parts.count
        assert np.array_equal(back.C, parts.C)
        assert np.array_equal(back.D, parts.D)

    def test_wrong_length_raises(self):
        payload = wire.pack_terms_result(self._parts())
        with pytest.raises(wire.ProtocolError):
            wire.unpack_terms_result(payload, 4, 2)
        with pytest.raises(wire.ProtocolError):
            wire.unpack_terms_result(payload + b"\x00", 3, 2)


class TestAccum:
    def test_roundtrip_exact(self):
        rng = np.random.default_rng(3)
        m, d, beta = 4, 3, 2.5
        P = rng.standard_normal((m, m))
        accum = StepAccum(
            P=P + P.T,
            E=rng.standard_normal((m, d)),
            Kinv=np.eye(m) * 1.25,
            beta=beta,
            d=d,
        )
        back = wire.unpack_accum(wire.pack_accum(accum), m, d, beta)
        assert np.array_equal(back.P, accum.P)
        assert np.array_equal(back.E, accum.E)
        assert np.array_equal(back.Kinv, accum.Kinv)
        assert back.beta == beta
        assert back.d == d

    def test_wrong_length_raises(self):
        with pytest.raises(wire.ProtocolError):
            wire.unpack_accum(b"\x00" * 17, 2, 2, 1.0)


class TestLocalMessages:
    def test_step_roundtrip(self):
        assert wire.unpack_local_step(wire.pack_local_step(9)) == 9

    def test_step_bad_length(self):
        with pytest.raises(wire.ProtocolError):
            wire.unpack_local_step(b"\x00" * 3)

    def test_result_roundtrip_exact(self):
        rng = np.random.default_rng(5)
        mu = rng.standard_normal((6, 2))
        logS = rng.standard_normal((6, 2))
        back_mu, back_logS = wire.unpack_local_result(
            wire.pack_local_result(mu, logS), 6, 2
        )
        assert np.array_equal(back_mu, mu)
        assert np.array_equal(back_logS, logS)

    def test_result_wrong_length(self):
        payload = wire.pack_local_result(np.zeros((3, 2)), np.zeros((3, 2)))
        with pytest.raises(wire.ProtocolError):
            wire.unpack_local_result(payload, 4, 2)

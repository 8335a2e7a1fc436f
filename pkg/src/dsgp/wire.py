"""Framing and message codecs for the out-of-process worker pool.

Every message on the byte stream is

    [payload length: u32 LE] [tag: u8] [payload bytes]

with the length covering the payload only.  All numeric payload fields are
little-endian; matrices travel as contiguous row-major IEEE-754 doubles.
Message tags:

    0x01 HELLO          worker -> coordinator: protocol version u16, partition index u32
    0x02 SET_DATA       coordinator -> worker: partition rows as a DGPD block
    0x03 SET_GLOBALS    coordinator -> worker: flattened shared parameters, doubles
    0x04 COMPUTE_TERMS  coordinator -> worker: empty
    0x05 TERMS_RESULT   worker -> coordinator: A, B, KL doubles; count u64; C; D
    0x06 SET_ACCUM      coordinator -> worker: accumulator matrices, doubles
    0x07 LOCAL_STEP     coordinator -> worker: sub-step count u32
    0x08 LOCAL_RESULT   worker -> coordinator: updated means, log-variances
    0x7F SHUTDOWN       coordinator -> worker: empty

A worker receiving an unknown tag exits with nonzero status.
"""

import struct

import numpy as np

__all__ = [
    "PROTOCOL_VERSION",
    "TAG_HELLO",
    "TAG_SET_DATA",
    "TAG_SET_GLOBALS",
    "TAG_COMPUTE_TERMS",
    "TAG_TERMS_RESULT",
    "TAG_SET_ACCUM",
    "TAG_LOCAL_STEP",
    "TAG_LOCAL_RESULT",
    "TAG_SHUTDOWN",
    "ProtocolError",
    "write_frame",
    "read_frame",
    "pack_doubles",
    "unpack_doubles",
    "pack_hello",
    "unpack_hello",
    "pack_terms_result",
    "unpack_terms_result",
    "pack_accum",
    "unpack_accum",
    "pack_local_step",
    "unpack_local_step",
    "pack_local_result",
    "unpack_local_result",
]

PROTOCOL_VERSION = 1

TAG_HELLO = 0x01
TAG_SET_DATA = 0x02
TAG_SET_GLOBALS = 0x03
TAG_COMPUTE_TERMS = 0x04
TAG_TERMS_RESULT = 0x05
TAG_SET_ACCUM = 0x06
TAG_LOCAL_STEP = 0x07
TAG_LOCAL_RESULT = 0x08
TAG_SHUTDOWN = 0x7F


class ProtocolError(RuntimeError):
    pass


def write_frame(stream, tag, payload=b""):
    stream.write(struct.pack("<I", len(payload)) + bytes([tag]) + payload)
    stream.flush()


def _read_exact(stream, size):
    chunks = []
    remaining = size
    while remaining:
        chunk = stream.read(remaining)
        if not chunk:
            raise ProtocolError("stream closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream):
    head = _read_exact(stream, 5)
    (length,) = struct.unpack("<I", head[:4])
    tag = head[4]
    payload = _read_exact(stream, length) if length else b""
    return tag, payload


def pack_doubles(*arrays):
    return b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays
    )


def unpack_doubles(payload, count, offset=0):
    return (
        np.frombuffer(payload, dtype="<f8", count=count, offset=offset).copy(),
        offset + 8 * count,
    )


def pack_hello(index, version=PROTOCOL_VERSION):
    return struct.pack("<HI", version, index)


def unpack_hello(payload):
    if len(payload) != 6:
        raise ProtocolError(f"HELLO payload has {len(payload)} bytes, expected 6")
    return struct.unpack("<HI", payload)


def pack_terms_result(parts):
    head = struct.pack("<dddQ", parts.A, parts.B, parts.KL, parts.count)
    return head + pack_doubles(parts.C, parts.D)


def unpack_terms_result(payload, m, d):
    from .bound import PartialSums

    expected = 32 + 8 * (m * d + m * m)
    if len(payload) != expected:
        raise ProtocolError(
            f"TERMS_RESULT payload has {len(payload)} bytes, expected {expected}"
        )
    A, B, KL, count = struct.unpack_from("<dddQ", payload, 0)
    C, off = unpack_doubles(payload, m * d, 32)
    D, _ = unpack_doubles(payload, m * m, off)
    return PartialSums(
        A=A, B=B, C=C.reshape(m, d), D=D.reshape(m, m), KL=KL, count=count
    )


def pack_accum(accum):
    return pack_doubles(accum.P, accum.E, accum.Kinv)


def unpack_accum(payload, m, d, beta):
    from .bound import StepAccum

    expected = 8 * (m * m + m * d + m * m)
    if len(payload) != expected:
        raise ProtocolError(
            f"SET_ACCUM payload has {len(payload)} bytes, expected {expected}"
        )
    P, off = unpack_doubles(payload, m * m, 0)
    E, off = unpack_doubles(payload, m * d, off)
    Kinv, _ = unpack_doubles(payload, m * m, off)
    return StepAccum(
        P=P.reshape(m, m), E=E.reshape(m, d), Kinv=Kinv.reshape(m, m), beta=beta, d=d
    )


def pack_local_step(count):
    return struct.pack("<I", count)


def unpack_local_step(payload):
    if len(payload) != 4:
        raise ProtocolError("LOCAL_STEP payload must be 4 bytes")
    return struct.unpack("<I", payload)[0]


def pack_local_result(means, log_variances):
    return pack_doubles(means, log_variances)


def unpack_local_result(payload, n_rows, q):
    expected = 8 * 2 * n_rows * q
    if len(payload) != expected:
        raise ProtocolError(
            f"LOCAL_RESULT payload has {len(payload)} bytes, expected {expected}"
        )
    mu, off = unpack_doubles(payload, n_rows * q, 0)
    logS, _ = unpack_doubles(payload, n_rows * q, off)
    return mu.reshape(n_rows, q), logS.reshape(n_rows, q)

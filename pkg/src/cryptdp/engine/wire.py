"""Message framing and canonical payload encoding.

A frame is a 4-byte big-endian length, a 1-byte message tag and a payload.
The length counts the tag byte plus the payload. Payloads are canonical
JSON (sorted keys, no whitespace) with every big integer written as a
base-10 string, so the same message yields the same bytes on every transport.
"""
from __future__ import annotations

import enum
import hashlib
import json
import struct

from gmpy2 import mpz

from ..errors import DecodeError, ProtocolError
from ..labhe import LabCiphertext
from ..lhe import Ciphertext

HEADER = struct.Struct(">IB")
MAX_FRAME = 1 << 31


class MessageType(enum.IntEnum):
    GEN_LAB_MULT_REQ = 0x01
    GEN_LAB_MULT_RESP = 0x02
    LAPLACE_DECRYPT_REQ = 0x03
    LAPLACE_DECRYPT_RESP = 0x04
    HIST_ENCODE_REQ = 0x05
    HIST_ENCODE_RESP = 0x06
    TWOPC_INVOKE = 0x07
    TWOPC_RESULT = 0x08
    LEDGER_QUERY = 0x09
    REFUSAL = 0x0A


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_frame(msg_type, payload):
    body = canonical_json(payload)
    return HEADER.pack(len(body) + 1, int(msg_type)) + body


def decode_frame(frame):
    """Split a complete frame into ``(MessageType, payload dict)``."""
    if len(frame) < HEADER.size:
        raise DecodeError("frame shorter than its header")
    length, tag = HEADER.unpack_from(frame)
    if length != len(frame) - 4:
        raise DecodeError(f"frame length field {length} does not match {len(frame) - 4} bytes")
    try:
        msg_type = MessageType(tag)
    except ValueError:
        raise DecodeError(f"unknown message tag 0x{tag:02x}") from None
    try:
        payload = json.loads(frame[HEADER.size:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"payload is not canonical JSON: {exc}") from None
    return msg_type, payload


def read_frame(stream_read):
    """Read one frame using ``stream_read(n) -> bytes`` (returns b"" on EOF)."""
    head = _read_exact(stream_read, 4)
    if head is None:
        return None
    (length,) = struct.unpack(">I", head)
    if length < 1 or length > MAX_FRAME:
        raise DecodeError(f"implausible frame length {length}")
    rest = _read_exact(stream_read, length)
    if rest is None:
        raise ProtocolError("connection closed mid-frame")
    return head + rest


def _read_exact(stream_read, n):
    chunks = []
    got = 0
    while got < n:
        chunk = stream_read(n - got)
        if not chunk:
            if got == 0:
                return None
            raise ProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def digest(frame):
    return hashlib.sha256(frame).hexdigest()


# Field codecs. Arrays keep a fixed field order.

def enc_int(x):
    return str(int(x))


def dec_int(s):
    if not isinstance(s, str):
        raise DecodeError("big integers travel as decimal strings")
    return mpz(s)


def enc_ct(c):
    return enc_int(c.value)


def dec_ct(s, pk):
    return Ciphertext(dec_int(s), pk)


def enc_sealed(item):
    """A sealed value ``(e, pairs)`` as ``[e, [[d1, d2], ...]]``."""
    e, pairs = item
    return [enc_ct(e), [[enc_ct(d1), enc_ct(d2)] for d1, d2 in pairs]]


def dec_sealed(x, pk):
    e, pairs = x
    return dec_ct(e, pk), tuple((dec_ct(d1, pk), dec_ct(d2, pk)) for d1, d2 in pairs)


def enc_lab(c):
    """A labeled ciphertext as ``[a, d, label]``."""
    return [enc_int(c.a), enc_ct(c.d), c.label]


def dec_lab(x, pk):
    a, d, label = x
    return LabCiphertext(dec_int(a) % pk.n, dec_ct(d, pk), str(label))

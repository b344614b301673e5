"""Ordered log of AS/CSP traffic with leakage tags, and the leakage audit."""
from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field

from ..errors import ProtocolError
from .wire import MessageType

CIPHERTEXT = "ciphertext"
MASKED = "masked-plaintext"
DP_OUTPUT = "dp-output"
CONTROL = "control"
LEAKAGE_TAGS = (CIPHERTEXT, MASKED, DP_OUTPUT, CONTROL)
CSP_VISIBLE_OK = (MASKED, DP_OUTPUT)

AS_TO_CSP = "AS->CSP"
CSP_TO_AS = "CSP->AS"

_TWOPC_TAGS = {
    # function id: (what the CSP decrypts on invocation, what the AS learns)
    "count-nonzero-unmask": (MASKED, MASKED),
    "argmax-topk-unmask": (MASKED, DP_OUTPUT),
    "oblivious-sort": (CIPHERTEXT, CIPHERTEXT),
}

_TAGS = {
    MessageType.GEN_LAB_MULT_REQ: MASKED,
    MessageType.GEN_LAB_MULT_RESP: CIPHERTEXT,
    MessageType.LAPLACE_DECRYPT_REQ: DP_OUTPUT,
    MessageType.LAPLACE_DECRYPT_RESP: DP_OUTPUT,
    MessageType.HIST_ENCODE_REQ: MASKED,
    MessageType.HIST_ENCODE_RESP: CIPHERTEXT,
    MessageType.LEDGER_QUERY: CONTROL,
    MessageType.REFUSAL: CONTROL,
}


def leakage_tag(msg_type, function=None):
    """What the receiving party can read from a message of this type.

    For requests this is the class of plaintext the CSP obtains when it
    processes the message; for responses it is what the AS obtains.
    """
    msg_type = MessageType(msg_type)
    if msg_type in (MessageType.TWOPC_INVOKE, MessageType.TWOPC_RESULT) and function not in _TWOPC_TAGS:
        raise ProtocolError(f"unknown two-party function {function!r}")
    if msg_type is MessageType.TWOPC_INVOKE:
        return _TWOPC_TAGS[function][0]
    if msg_type is MessageType.TWOPC_RESULT:
        return _TWOPC_TAGS[function][1]
    return _TAGS[msg_type]


@dataclass(frozen=True)
class TranscriptEntry:
    seq: int
    direction: str
    msg_type: MessageType
    digest: str | None
    leakage: str
    size: int
    function: str | None = None
    sizes: tuple = ()


@dataclass(frozen=True)
class ViewRecord:
    """One batch of plaintexts the CSP decrypted, with the reason it was allowed to."""

    request_seq: int
    msg_type: MessageType
    function: str | None
    tag: str
    count: int


@dataclass
class Transcript:
    entries: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, direction, msg_type, frame_digest, size, function=None, sizes=()):
        with self._lock:
            leak = leakage_tag(msg_type, function)
            if msg_type in (MessageType.TWOPC_INVOKE, MessageType.TWOPC_RESULT):
                frame_digest = None  # only the function id and sizes are logged
            entry = TranscriptEntry(len(self.entries), direction, MessageType(msg_type), frame_digest, leak, size, function, tuple(sizes))
            self.entries.append(entry)
            return entry

    def __len__(self):
        return len(self.entries)

    def since(self, mark):
        return self.entries[mark:]

    def counts(self, start=0, direction=AS_TO_CSP):
        """Number of messages per type (and per 2PC function) from ``start`` on."""
        c = Counter()
        for e in self.entries[start:]:
            if e.direction == direction:
                c[e.msg_type.name if e.function is None else f"{e.msg_type.name}:{e.function}"] += 1
        return c

    def requests(self, start=0):
        return [e for e in self.entries[start:] if e.direction == AS_TO_CSP]


def is_budgeted(entry):
    """Measurements: the only requests the CSP answers with released values."""
    return entry.msg_type is MessageType.LAPLACE_DECRYPT_REQ or (
        entry.msg_type is MessageType.TWOPC_INVOKE and entry.function == "argmax-topk-unmask"
    )


def audit(transcript, views=()):
    """Check the leakage contract; returns a list of human-readable violations.

    Every message must carry a known tag, and every batch of plaintexts the
    CSP decrypted must be tagged masked-plaintext or dp-output and must match
    the tag of the request that caused it.
    """
    problems = []
    requests = transcript.requests()
    for e in transcript.entries:
        if e.leakage not in LEAKAGE_TAGS:
            problems.append(f"message {e.seq} has unknown leakage tag {e.leakage!r}")
    for v in views:
        if v.tag not in CSP_VISIBLE_OK:
            problems.append(f"CSP decrypted {v.count} value(s) tagged {v.tag!r} for {v.msg_type.name}")
            continue
        if v.request_seq >= len(requests):
            problems.append(f"CSP view refers to request {v.request_seq} missing from the transcript")
            continue
        req = requests[v.request_seq]
        if req.msg_type is not v.msg_type or req.leakage != v.tag or req.function != v.function:
            problems.append(f"CSP view {v} does not match request {req.seq} ({req.msg_type.name}, {req.leakage})")
    return problems

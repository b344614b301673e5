import io
import json
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from cryptdp import operators as ops
from cryptdp import plaintext, programs
from cryptdp.encoding import ingest_rows
from cryptdp.engine import wire
from cryptdp.engine.ledger import PrivacyLedger
from cryptdp.engine.program import (
    Program,
    ProgramClass,
    Query,
    Step,
    classify_program,
    compute_sensitivity,
    execute,
    validate_plan,
)
from cryptdp.engine.transcript import MASKED, ViewRecord, audit, is_budgeted, leakage_tag
from cryptdp.engine.twopc import (
    IdealTwoParty,
    TwoPCRequest,
    argmax_topk_unmask,
    count_nonzero_unmask,
)
from cryptdp.engine.wire import MessageType
from cryptdp.errors import BudgetExhausted, DecodeError, PlanError, ProtocolError

from conftest import expand_small, make_rows

# Wire -------------------------------------------------------------------------

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-2**40, 2**40) | st.text(max_size=20),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=8), inner, max_size=4),
    max_leaves=15,
)


@given(st.sampled_from(list(MessageType)), st.dictionaries(st.text(max_size=8), json_values, max_size=5))
@settings(max_examples=300, deadline=None)
def test_frame_round_trip(msg_type, payload):
    frame = wire.encode_frame(msg_type, payload)
    assert wire.decode_frame(frame) == (msg_type, payload)
    assert wire.read_frame(io.BytesIO(frame + frame).read) == frame
    assert wire.encode_frame(msg_type, json.loads(json.dumps(payload))) == frame


def test_frame_header_layout():
    frame = wire.encode_frame(MessageType.LEDGER_QUERY, {})
    assert frame[:4] == (len(frame) - 4).to_bytes(4, "big")
    assert frame[4] == 0x09 and frame[5:] == b"{}"


def test_frame_errors():
    frame = wire.encode_frame(MessageType.REFUSAL, {"a": 1})
    with pytest.raises(DecodeError):
        wire.decode_frame(frame[:-1])
    with pytest.raises(DecodeError):
        wire.decode_frame(frame[:4] + b"\x7f" + frame[5:])
    with pytest.raises(DecodeError):
        wire.decode_frame((3).to_bytes(4, "big") + b"\x09{x")
    with pytest.raises(ProtocolError):
        wire.read_frame(io.BytesIO(frame[:7]).read)
    assert wire.read_frame(io.BytesIO(b"").read) is None


@given(st.integers(0, 2**600))
def test_int_codec(x):
    assert wire.dec_int(wire.enc_int(x)) == x


# Ledger -----------------------------------------------------------------------

def test_ledger_exact_arithmetic_and_boundary():
    led = PrivacyLedger(1)
    for _ in range(10):
        assert led.request("p", "", 1, 0.1)
    assert led.spent == 1 and led.remaining == 0
    assert not led.request("p", "", 1, Fraction(1, 10**9))
    assert [e.kind for e in led.entries][-1] == "refusal"
    assert led.spent == 1


def test_ledger_persistence(tmp_path):
    path = tmp_path / "ledger.jsonl"
    led = PrivacyLedger(2, path)
    led.request("a", "first", 1, 0.5)
    led.request("b", "second", 2, 2)
    again = PrivacyLedger(2, path)
    assert again.spent == Fraction(1, 2) and len(again.entries) == 2
    assert not again.request("c", "", 1, 1.6)
    with pytest.raises(ValueError):
        PrivacyLedger(Fraction(1, 4), path)
    with pytest.raises(ValueError):
        led.request("d", "", 1, 0)


@given(st.lists(st.fractions(min_value=Fraction(1, 100), max_value=2), max_size=40),
       st.fractions(min_value=0, max_value=5))
@settings(max_examples=300, deadline=None)
def test_ledger_never_exceeds_budget(requests, budget):
    led = PrivacyLedger(budget)
    for eps in requests:
        before = led.spent
        ok = led.request("p", "", 1, eps)
        assert ok == (before + eps <= budget)
        assert led.spent <= budget


# Transcript and audit -----------------------------------------------------------

def test_leakage_tags():
    assert leakage_tag(MessageType.GEN_LAB_MULT_REQ) == MASKED
    assert leakage_tag(MessageType.TWOPC_RESULT, "argmax-topk-unmask") == "dp-output"
    assert leakage_tag(MessageType.TWOPC_INVOKE, "oblivious-sort") == "ciphertext"


def test_audit_flags_bad_views(keypair, schema, deployment):
    dep = deployment()
    table = ingest_rows(make_rows(schema, 4, 1), schema, keypair.pk, dep.server.keys, random.Random(1))
    ops.laplace(dep.server, ops.count(dep.server, table), 1, 1)
    assert audit(dep.transcript, dep.csp.views) == []
    bad = [ViewRecord(0, MessageType.LAPLACE_DECRYPT_REQ, None, "ciphertext", 1)]
    assert audit(dep.transcript, bad)
    mismatched = [ViewRecord(0, MessageType.LAPLACE_DECRYPT_REQ, None, MASKED, 1)]
    assert audit(dep.transcript, mismatched)
    assert audit(dep.transcript, [ViewRecord(5, MessageType.LAPLACE_DECRYPT_REQ, None, MASKED, 1)])


# Two-party functions -------------------------------------------------------------

def test_ideal_functions():
    n = 1009
    masks = [5, 100, 7]
    masked = [(0 + 5) % n, (3 + 100) % n, (0 + 7) % n]
    assert count_nonzero_unmask({"masks": masks}, {"masked": masked, "r": 4, "modulus": n}) == 5
    masked = [(9 + 5) % n, (n - 2 + 100) % n, (9 + 7) % n]
    assert argmax_topk_unmask({"masks": masks}, {"masked": masked, "k": 2, "modulus": n}) == [0, 2]
    with pytest.raises(ProtocolError):
        IdealTwoParty().invoke(TwoPCRequest("nope", {}, {}))
    with pytest.raises(ProtocolError):
        IdealTwoParty().invoke(TwoPCRequest("argmax-topk-unmask", {}, {}, output_to="CSP"))


def test_oblivious_sort_rerandomizes_and_is_stable(keypair, schema, deployment):
    from cryptdp.encoding import decrypt_table

    dep = deployment()
    rows = make_rows(schema, 8, 2)
    table = ingest_rows(rows, schema, keypair.pk, dep.server.keys, random.Random(2))
    ordered = dep.server.oblivious_sort(table, "Race")
    plain, _ = decrypt_table(keypair.sk, ordered)
    race = [row[3].index(1) for row in plain]
    assert race == sorted(race)
    expect = sorted(range(8), key=lambda i: (schema["Race"].index_of(rows[i][3]), i))
    assert [row[0].index(1) for row in plain] == [schema["Age"].index_of(rows[i][0]) for i in expect]
    old = {m[0].d.value for col in table.columns.values() for row in col for m in row}
    new = {m[0].d.value for col in ordered.columns.values() for row in col for m in row}
    assert not old & new
    assert audit(dep.transcript, dep.csp.views) == []


# Parties ----------------------------------------------------------------------------

def test_budget_refusal_before_decryption(keypair, schema, deployment):
    dep = deployment(budget=1)
    table = ingest_rows(make_rows(schema, 4, 3), schema, keypair.pk, dep.server.keys, random.Random(3))
    c = ops.count(dep.server, table)
    ops.laplace(dep.server, c, 0.75, 1)
    views = len(dep.csp.views)
    with pytest.raises(BudgetExhausted) as err:
        ops.laplace(dep.server, c, 0.5, 1)
    assert err.value.remaining == Fraction(1, 4)
    assert len(dep.csp.views) == views
    assert dep.transcript.entries[-1].msg_type is MessageType.REFUSAL
    assert [e.kind for e in dep.ledger.entries] == ["spend", "refusal"]


def test_csp_answers_malformed_requests_with_refusal(deployment):
    dep = deployment()
    reply = dep.csp.handle(wire.encode_frame(MessageType.LAPLACE_DECRYPT_REQ, {"values": "junk"}))
    kind, payload = wire.decode_frame(reply)
    assert kind is MessageType.REFUSAL and payload["reason"] == "error"
    kind, _ = wire.decode_frame(dep.csp.handle(wire.encode_frame(MessageType.GEN_LAB_MULT_RESP, {})))
    assert kind is MessageType.REFUSAL
    with pytest.raises(ProtocolError):
        dep.server._call(MessageType.TWOPC_INVOKE, {"function": "nope"}, MessageType.TWOPC_RESULT, "nope")


def test_ledger_query(deployment):
    dep = deployment(budget=3)
    reply = dep.server.ledger_query()
    assert reply["ledger"]["budget"] == "3" and reply["ledger"]["entries"] == []


# Programs: analysis ---------------------------------------------------------------------

def test_validate_plan_errors(schema):
    def plan(*steps):
        return [Step(op, args) for op, args in steps]

    with pytest.raises(PlanError):
        validate_plan([])
    with pytest.raises(PlanError):
        validate_plan(plan(("count", {})))
    with pytest.raises(PlanError):
        validate_plan(plan(("laplace", {})))
    with pytest.raises(PlanError):
        validate_plan(plan(("count", {}), ("noisy_max", {"k": 1})))
    with pytest.raises(PlanError):
        validate_plan(plan(("count_distinct", {}), ("laplace", {})))
    with pytest.raises(PlanError):
        validate_plan(plan(("group_by_count", {"attr": "Height"}), ("laplace", {})), schema)
    with pytest.raises(PlanError):
        validate_plan(plan(("project", {"attrs": ["Age"]}), ("group_by_count", {"attr": "Race"}), ("laplace", {})), schema)
    with pytest.raises(PlanError):
        validate_plan(plan(("frobnicate", {}), ("laplace", {})))
    with pytest.raises(PlanError):
        validate_plan(plan(("group_by_count", {"attr": "Age"}), ("noisy_max", {"k": 0})), schema)


def test_program_json_round_trip(schema):
    for tid in programs.TEMPLATE_IDS:
        p = expand_small(tid, schema)
        assert Program.loads(p.dumps()) == p


@pytest.mark.parametrize("tid", programs.TEMPLATE_IDS)
def test_static_and_runtime_sensitivity_agree(tid, keypair, schema, deployment):
    dep = deployment()
    rows = make_rows(schema, 10, 4)
    table = ingest_rows(rows, schema, keypair.pk, dep.server.keys, random.Random(4))
    program = expand_small(tid, schema)
    result = execute(program, table, dep.server, csp=dep.csp)
    assert result.sensitivity == compute_sensitivity(program.plan) == programs.EXPECTED_SENSITIVITY[tid]
    assert result.value == plaintext.run_program(program, plaintext.PlainTable.from_rows(schema, rows))
    assert all(e.program_id == tid for e in dep.ledger.entries)


def test_classes(schema):
    expected = [ProgramClass.CLASS_I] * 3 + [ProgramClass.CLASS_II] * 2 + [ProgramClass.CLASS_III] * 2
    got = [classify_program(expand_small(t, schema).plan, schema) for t in programs.TEMPLATE_IDS]
    assert got == expected


def test_tcp_transport_matches_inproc(keypair, schema, deployment):
    rows = make_rows(schema, 8, 5)
    counts, values = [], []
    for transport in ("inproc", "tcp"):
        dep = deployment(seed=9, transport=transport)
        table = ingest_rows(rows, schema, keypair.pk, dep.server.keys, random.Random(5))
        for tid in ("P4", "P6", "P7"):
            res = execute(expand_small(tid, schema), table, dep.server)
            values.append((transport, tid, res.value))
        counts.append(dep.transcript.counts())
        assert audit(dep.transcript, dep.csp.views) == []
    assert counts[0] == counts[1]
    assert [v for t, _, v in values if t == "inproc"] == [v for t, _, v in values if t == "tcp"]


def test_budgeted_request_classification():
    from cryptdp.engine.transcript import TranscriptEntry

    def entry(t, f=None):
        return TranscriptEntry(0, "AS->CSP", t, None, "x", 0, f)

    assert is_budgeted(entry(MessageType.LAPLACE_DECRYPT_REQ))
    assert is_budgeted(entry(MessageType.TWOPC_INVOKE, "argmax-topk-unmask"))
    assert not is_budgeted(entry(MessageType.TWOPC_INVOKE, "count-nonzero-unmask"))
    assert not is_budgeted(entry(MessageType.GEN_LAB_MULT_REQ))

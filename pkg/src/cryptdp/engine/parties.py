"""The two servers: the Analytics Server (AS) and the Crypto Service Provider (CSP).

The AS holds only encrypted data and drives every protocol. The CSP holds
the secret key, the privacy ledger and a pool of fresh ciphertexts; it
answers one framed request at a time and keeps no AS payload afterwards.
"""
from __future__ import annotations

import contextlib
import os
import time
from fractions import Fraction

import numpy as np
from gmpy2 import mpz

from ..dp import NoiseSpec, sample_discrete_laplace, signed_decode
from ..encoding import EncTable
from ..errors import BudgetExhausted, CryptDPError, DecodeError, PlanError, ProtocolError
from ..labhe import Relabeler, decrypt_sealed, gen_lab_mult_batch, lab_add, lab_decrypt, local_gen
from ..lhe import default_rng
from ..optimize import OfflinePool
from .ledger import as_fraction
from .transcript import DP_OUTPUT, MASKED, ViewRecord
from .twopc import IdealTwoParty, TwoPCRequest
from .wire import (
    MessageType,
    dec_int,
    dec_lab,
    dec_sealed,
    decode_frame,
    enc_int,
    enc_lab,
    enc_sealed,
    encode_frame,
)

UNSAFE_ENV = "CRYPTDP_ALLOW_UNSAFE_NOISE_OFF"


def _noise_rng(noise_rng):
    return noise_rng if noise_rng is not None else np.random.default_rng()


class CryptoServiceProvider:
    """Key holder and budget enforcer.

    Args:
        keypair: Paillier key pair.
        ledger: :class:`~cryptdp.engine.ledger.PrivacyLedger` to enforce.
        rng: Randomness for encryption and masks.
        noise_rng: ``numpy.random.Generator`` for the CSP's noise draws.
        pool: Offline pool of fresh labeled 0/1 encryptions; one with
            on-demand refill is created when omitted.
        unsafe_disable_noise: Skip the CSP's noise draw. Destroys privacy;
            exists only so tests can compare against exact answers.
        record_plaintexts: Keep every decrypted value in :attr:`plaintexts`
            (test instrumentation for mask-uniformity checks).
    """

    def __init__(self, keypair, ledger, rng=None, noise_rng=None, pool=None,
                 unsafe_disable_noise=False, record_plaintexts=False, session="csp"):
        self.keypair = keypair
        self.ledger = ledger
        self.rng = default_rng(rng)
        self.noise_rng = _noise_rng(noise_rng)
        self.relabeler = Relabeler(keypair.sk, self.rng, session)
        self.pool = pool if pool is not None else OfflinePool(self.relabeler.fresh)
        self.unsafe_disable_noise = bool(unsafe_disable_noise)
        self.backend = IdealTwoParty()
        self.views = []
        self.record_plaintexts = record_plaintexts
        self.plaintexts = []
        self.busy_seconds = 0.0
        self._requests = 0

    @property
    def pk(self):
        return self.keypair.pk

    def handle(self, frame):
        """Process one request frame and return the response frame."""
        start = time.perf_counter()
        try:
            msg_type, payload = decode_frame(frame)
            seq = self._requests
            self._requests += 1
            handler = self._HANDLERS.get(msg_type)
            if handler is None:
                raise ProtocolError(f"CSP does not accept {msg_type.name}")
            reply_type, reply = handler(self, seq, payload)
        except CryptDPError as exc:
            # Malformed or unsupported requests are answered, never fatal to the CSP.
            reply_type, reply = MessageType.REFUSAL, {"reason": "error", "message": str(exc)}
        finally:
            self.busy_seconds += time.perf_counter() - start
        return encode_frame(reply_type, reply)

    # helpers

    def _view(self, seq, msg_type, tag, values, function=None):
        self.views.append(ViewRecord(seq, msg_type, function, tag, len(values)))
        if self.record_plaintexts:
            self.plaintexts.extend((tag, int(v)) for v in values)

    def _open(self, sealed_items):
        sk = self.keypair.sk
        return [decrypt_sealed(sk, e, pairs) for e, pairs in sealed_items]

    def _sealed(self, payload):
        pk = self.pk
        try:
            return [dec_sealed(x, pk) for x in payload["values"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise DecodeError(f"malformed sealed values: {exc}") from None

    def _noise(self, scale, size):
        if self.unsafe_disable_noise:
            return [0] * size
        return sample_discrete_laplace(scale, self.noise_rng, size).tolist()

    def _charge(self, payload):
        try:
            eps = Fraction(payload["epsilon"])
            sensitivity = int(payload["sensitivity"])
        except (KeyError, TypeError, ValueError, ZeroDivisionError) as exc:
            raise DecodeError(f"malformed measurement request: {exc}") from None
        ok = self.ledger.request(payload.get("program_id", "adhoc"), payload.get("description", ""),
                                 sensitivity, eps)
        return ok, eps

    def _refusal(self, eps):
        return MessageType.REFUSAL, {
            "reason": "budget",
            "requested": str(eps),
            "remaining": str(self.ledger.remaining),
        }

    # handlers

    def _on_gen_lab_mult(self, seq, payload):
        pk = self.pk
        items = [dec_sealed(x, pk) for x in payload["items"]]
        values = self._open(items)
        self._view(seq, MessageType.GEN_LAB_MULT_REQ, MASKED, values)
        out = [self.relabeler.relabel_value(v) for v in values]
        return MessageType.GEN_LAB_MULT_RESP, {"items": [enc_lab(c) for c in out]}

    def _on_laplace(self, seq, payload):
        sealed = self._sealed(payload)
        ok, eps = self._charge(payload)
        if not ok:
            return self._refusal(eps)
        values = self._open(sealed)
        self._view(seq, MessageType.LAPLACE_DECRYPT_REQ, DP_OUTPUT, values)
        n = self.pk.n
        scale = NoiseSpec.for_query(eps, int(payload["sensitivity"])).scale
        noise = self._noise(scale, len(values))
        released = [signed_decode(v, n) + eta for v, eta in zip(values, noise)]
        return MessageType.LAPLACE_DECRYPT_RESP, {"values": [str(v) for v in released]}

    def _on_hist_encode(self, seq, payload):
        width = int(payload["modulus"])
        if width < 1:
            raise DecodeError("modulus must be positive")
        values = self._open(self._sealed(payload))
        self._view(seq, MessageType.HIST_ENCODE_REQ, MASKED, values)
        vectors = []
        for v in values:
            hot = int(v % width)
            vectors.append([enc_lab(self.pool.draw(1 if j == hot else 0)) for j in range(width)])
        return MessageType.HIST_ENCODE_RESP, {"vectors": vectors}

    def _on_twopc(self, seq, payload):
        function = payload.get("function")
        handler = self._TWOPC.get(function)
        if handler is None:
            raise ProtocolError(f"unknown two-party function {function!r}")
        return handler(self, seq, payload)

    def _twopc_count_nonzero(self, seq, payload):
        n = self.pk.n
        masked = self._open(self._sealed(payload))
        self._view(seq, MessageType.TWOPC_INVOKE, MASKED, masked, "count-nonzero-unmask")
        r = mpz(self.rng.randrange(int(n)))
        masks = [dec_int(m) for m in payload["as_inputs"]["masks"]]
        out = self.backend.invoke(TwoPCRequest(
            "count-nonzero-unmask", {"masks": masks}, {"masked": masked, "r": r, "modulus": n}))
        enc_r = self.relabeler.fresh(r)
        return MessageType.TWOPC_RESULT, {"output": enc_int(out), "enc_r": enc_lab(enc_r)}

    def _twopc_topk(self, seq, payload):
        sealed = self._sealed(payload)
        ok, eps = self._charge(payload)
        if not ok:
            return self._refusal(eps)
        n = self.pk.n
        masked = self._open(sealed)
        self._view(seq, MessageType.TWOPC_INVOKE, MASKED, masked, "argmax-topk-unmask")
        k = int(payload["k"])
        scale = NoiseSpec.for_query(eps, int(payload["sensitivity"]), k=k).scale
        noisy = [(x + eta) % n for x, eta in zip(masked, self._noise(scale, len(masked)))]
        masks = [dec_int(m) for m in payload["as_inputs"]["masks"]]
        indices = self.backend.invoke(TwoPCRequest(
            "argmax-topk-unmask", {"masks": masks}, {"masked": noisy, "k": k, "modulus": n}))
        return MessageType.TWOPC_RESULT, {"indices": indices}

    def _twopc_sort(self, seq, payload):
        pk, sk = self.pk, self.keypair.sk
        rows = [[[dec_lab(c, pk) for c in cell] for cell in row] for row in payload["as_inputs"]["rows"]]
        key = int(payload["as_inputs"]["key"])

        def find_one(cells):
            for j, c in enumerate(cells):
                if lab_decrypt(sk, c) == 1:
                    return j
            raise ProtocolError("sort key column is not one-hot")

        def rerandomize(c):
            return lab_add(c, self.pool.draw(0))

        out = self.backend.invoke(TwoPCRequest(
            "oblivious-sort", {"rows": rows, "key": key}, {"find_one": find_one, "rerandomize": rerandomize}))
        return MessageType.TWOPC_RESULT, {"rows": [[[enc_lab(c) for c in cell] for cell in row] for row in out]}

    def _on_ledger_query(self, seq, payload):
        return MessageType.LEDGER_QUERY, {
            "ledger": self.ledger.to_json(),
            "csp_busy_seconds": repr(self.busy_seconds),
        }

    _HANDLERS = {
        MessageType.GEN_LAB_MULT_REQ: _on_gen_lab_mult,
        MessageType.LAPLACE_DECRYPT_REQ: _on_laplace,
        MessageType.HIST_ENCODE_REQ: _on_hist_encode,
        MessageType.TWOPC_INVOKE: _on_twopc,
        MessageType.LEDGER_QUERY: _on_ledger_query,
    }
    _TWOPC = {
        "count-nonzero-unmask": _twopc_count_nonzero,
        "argmax-topk-unmask": _twopc_topk,
        "oblivious-sort": _twopc_sort,
    }


class AnalyticsServer:
    """AS-side session: public key, channel to the CSP, and randomness.

    Args:
        pk: Paillier public key.
        channel: :class:`~cryptdp.engine.transport.Channel` to the CSP.
        rng: Randomness for masks and encryption.
        noise_rng: ``numpy.random.Generator`` for the AS's noise draws.
        unsafe_disable_noise: Skip the AS's noise draw (tests only).
    """

    def __init__(self, pk, channel, rng=None, noise_rng=None, unsafe_disable_noise=False, keys=None):
        self.pk = pk
        self.channel = channel
        self.rng = default_rng(rng)
        self.noise_rng = _noise_rng(noise_rng)
        self.unsafe_disable_noise = bool(unsafe_disable_noise)
        self.keys = keys if keys is not None else local_gen(pk, self.rng, publish=False)
        self.program_id = "adhoc"
        self.description = ""

    @property
    def transcript(self):
        return self.channel.transcript

    @contextlib.contextmanager
    def program(self, program_id, description=""):
        """Attribute ledger entries made inside the block to ``program_id``."""
        saved = self.program_id, self.description
        self.program_id, self.description = str(program_id), str(description)
        try:
            yield self
        finally:
            self.program_id, self.description = saved

    def draw_noise(self, scale, size):
        if self.unsafe_disable_noise:
            return [0] * size
        return sample_discrete_laplace(scale, self.noise_rng, size).tolist()

    def _call(self, msg_type, payload, expect, function=None, sizes=()):
        reply_type, reply = self.channel.request(msg_type, payload, function, sizes)
        if reply_type is MessageType.REFUSAL:
            if reply.get("reason") != "budget":
                raise ProtocolError(f"CSP rejected {MessageType(msg_type).name}: {reply.get('message', '')}")
            raise BudgetExhausted(as_fraction(reply["requested"]), as_fraction(reply["remaining"]))
        if reply_type is not expect:
            raise ProtocolError(f"expected {expect.name}, got {reply_type.name}")
        return reply

    def _measure_fields(self, epsilon, sensitivity):
        return {
            "program_id": self.program_id,
            "description": self.description,
            "epsilon": str(as_fraction(epsilon)),
            "sensitivity": int(sensitivity),
        }

    # protocol calls used by the operators

    def relabel(self, products):
        """Fresh labeled ciphertexts for a batch of factor lists."""
        return gen_lab_mult_batch(self.pk, products, self._relabel_round, self.rng)

    def _relabel_round(self, items):
        reply = self._call(MessageType.GEN_LAB_MULT_REQ, {"items": [enc_sealed(x) for x in items]},
                           MessageType.GEN_LAB_MULT_RESP)
        return [dec_lab(x, self.pk) for x in reply["items"]]

    def decrypt_noisy(self, sealed, epsilon, sensitivity):
        payload = self._measure_fields(epsilon, sensitivity)
        payload["values"] = [enc_sealed(x) for x in sealed]
        reply = self._call(MessageType.LAPLACE_DECRYPT_REQ, payload, MessageType.LAPLACE_DECRYPT_RESP)
        return [int(v) for v in reply["values"]]

    def noisy_max(self, sealed, masks, k, epsilon, sensitivity):
        payload = self._measure_fields(epsilon, sensitivity)
        payload.update({
            "function": "argmax-topk-unmask",
            "k": int(k),
            "values": [enc_sealed(x) for x in sealed],
            "as_inputs": {"masks": [enc_int(m) for m in masks]},
        })
        reply = self._call(MessageType.TWOPC_INVOKE, payload, MessageType.TWOPC_RESULT,
                           "argmax-topk-unmask", (len(sealed), int(k)))
        return frozenset(int(i) for i in reply["indices"])

    def hist_encode(self, sealed, width):
        reply = self._call(MessageType.HIST_ENCODE_REQ,
                           {"modulus": int(width), "values": [enc_sealed(x) for x in sealed]},
                           MessageType.HIST_ENCODE_RESP)
        return [[dec_lab(c, self.pk) for c in vec] for vec in reply["vectors"]]

    def count_nonzero(self, sealed, masks):
        payload = {
            "function": "count-nonzero-unmask",
            "values": [enc_sealed(x) for x in sealed],
            "as_inputs": {"masks": [enc_int(m) for m in masks]},
        }
        reply = self._call(MessageType.TWOPC_INVOKE, payload, MessageType.TWOPC_RESULT,
                           "count-nonzero-unmask", (len(sealed),))
        return dec_int(reply["output"]), dec_lab(reply["enc_r"], self.pk)

    def oblivious_sort(self, table, attr):
        """Sorted, re-randomized copy of ``table`` by the value of ``attr``."""
        if attr not in table.schema:
            raise PlanError(f"unknown attribute {attr!r}")
        names = table.schema.names
        if any(len(m) != 1 for col in table.columns.values() for row in col for m in row) or \
                any(len(m) != 1 for m in table.indicator):
            raise PlanError("oblivious sort expects a table of single-factor cells")
        rows = [
            [[enc_lab(m[0]) for m in table.columns[a][i]] for a in names] + [[enc_lab(table.indicator[i][0])]]
            for i in range(table.n_rows)
        ]
        payload = {"function": "oblivious-sort", "as_inputs": {"rows": rows, "key": names.index(attr)}}
        width = sum(table.schema.size(a) for a in names) + 1
        reply = self._call(MessageType.TWOPC_INVOKE, payload, MessageType.TWOPC_RESULT,
                           "oblivious-sort", (table.n_rows, width))
        pk = self.pk
        out_rows = [[[dec_lab(c, pk) for c in cell] for cell in row] for row in reply["rows"]]
        columns = {a: [[(c,) for c in row[j]] for row in out_rows] for j, a in enumerate(names)}
        indicator = [(row[-1][0],) for row in out_rows]
        return EncTable(table.schema, columns, indicator, table.pristine, table.provenance)

    def ledger_query(self):
        reply = self._call(MessageType.LEDGER_QUERY, {}, MessageType.LEDGER_QUERY)
        return reply


def noise_off_allowed():
    """The zero-noise hook must be requested explicitly through the environment."""
    return os.environ.get(UNSAFE_ENV) == "1"

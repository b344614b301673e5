"""Ideal-functionality stand-in for the garbled-circuit computations.

Each function receives the AS's private inputs and the CSP's private inputs,
computes its declared output for the AS, and keeps nothing afterwards. No
cryptography happens here: the point is to honour the same input, output
and transcript contract a real two-party protocol would.
"""
from __future__ import annotations

from dataclasses import dataclass

from ..dp import signed_decode
from ..errors import ProtocolError


@dataclass(frozen=True)
class TwoPCRequest:
    function: str
    as_inputs: dict
    csp_inputs: dict
    output_to: str = "AS"


def count_nonzero_unmask(as_inputs, csp_inputs):
    """``#{i : masked[i] - mask[i] != 0} + r`` modulo N."""
    n = csp_inputs["modulus"]
    masks, masked = as_inputs["masks"], csp_inputs["masked"]
    if len(masks) != len(masked):
        raise ProtocolError("mask and value vectors differ in length")
    nonzero = sum(1 for m, x in zip(masks, masked) if (x - m) % n)
    return (nonzero + csp_inputs["r"]) % n


def argmax_topk_unmask(as_inputs, csp_inputs):
    """Indices of the k largest unmasked values, ties to the lower index, as a sorted list."""
    n = csp_inputs["modulus"]
    k = int(csp_inputs["k"])
    masks, masked = as_inputs["masks"], csp_inputs["masked"]
    if len(masks) != len(masked) or not 1 <= k <= len(masked):
        raise ProtocolError("malformed top-k invocation")
    values = [signed_decode((x - m) % n, n) for m, x in zip(masks, masked)]
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return sorted(order[:k])


def oblivious_sort(as_inputs, csp_inputs):
    """Sort rows by a one-hot key column and re-randomize every cell.

    The sort is stable with respect to the input order. Each output cell is
    the input cell plus a fresh labeled encryption of zero, so no output
    ciphertext can be matched to an input ciphertext.
    """
    rows, key = as_inputs["rows"], as_inputs["key"]
    find_one, rerandomize = csp_inputs["find_one"], csp_inputs["rerandomize"]
    keyed = sorted(range(len(rows)), key=lambda i: (find_one(rows[i][key]), i))
    return [[[rerandomize(c) for c in cell] for cell in rows[i]] for i in keyed]


FUNCTIONS = {
    "count-nonzero-unmask": count_nonzero_unmask,
    "argmax-topk-unmask": argmax_topk_unmask,
    "oblivious-sort": oblivious_sort,
}


class IdealTwoParty:
    """Evaluates a :class:`TwoPCRequest`; stateless between calls."""

    def invoke(self, request):
        try:
            fn = FUNCTIONS[request.function]
        except KeyError:
            raise ProtocolError(f"unknown two-party function {request.function!r}") from None
        if request.output_to != "AS":
            raise ProtocolError("outputs are only ever routed to the AS")
        return fn(request.as_inputs, request.csp_inputs)


def twopc_invoke(request, backend=None):
    return (backend or IdealTwoParty()).invoke(request)

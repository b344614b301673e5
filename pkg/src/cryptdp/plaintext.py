"""Plaintext reference pipeline.

Runs the same operator chains on unencrypted rows. With no noise source it
is the exact oracle the encrypted engine is compared against; with one it is
the central-DP baseline, drawing a single noise value per released
coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dp import NoiseSpec, isotonic_cdf, sample_discrete_laplace
from .encoding import Attribute, Schema, cross_domain
from .engine.program import compute_sensitivity, validate_plan
from .errors import PlanError
from .operators import COUNT_ATTRIBUTE, Predicate


@dataclass
class PlainTable:
    """Rows as ``{attribute: domain index}`` plus the membership bits ``B``."""

    schema: Schema
    rows: list
    mask: list = field(default=None)

    def __post_init__(self):
        if self.mask is None:
            self.mask = [1] * len(self.rows)

    @classmethod
    def from_rows(cls, schema, raw_rows):
        """Build from raw value rows in schema order."""
        rows = [
            {a.name: a.index_of(v) for a, v in zip(schema.attributes, raw)}
            for raw in raw_rows
        ]
        return cls(schema, rows)

    @property
    def n_rows(self):
        return len(self.rows)


def project(table, attrs):
    keep = [a for a in table.schema.names if a in attrs]
    if not keep:
        raise PlanError("projection onto an empty attribute set")
    return PlainTable(table.schema.subset(keep), [{a: r[a] for a in keep} for r in table.rows], list(table.mask))


def filter_rows(table, predicate):
    predicate.validate(table.schema)
    mask = [b if predicate.holds(r) else 0 for r, b in zip(table.rows, table.mask)]
    return PlainTable(table.schema, table.rows, mask)


def cross_product(table, left, right, out=None):
    la, ra = table.schema[left], table.schema[right]
    out = out or f"{left}*{right}"
    attrs = []
    for a in table.schema.attributes:
        if a.name == left:
            attrs.append(Attribute(out, cross_domain(la, ra)))
        elif a.name != right:
            attrs.append(a)
    rows = []
    for r in table.rows:
        new = {k: v for k, v in r.items() if k not in (left, right)}
        new[out] = r[left] * ra.size + r[right]
        rows.append(new)
    return PlainTable(Schema(tuple(attrs)), rows, list(table.mask))


def count(table):
    return sum(table.mask)


def group_by_count(table, attr):
    hist = [0] * table.schema.size(attr)
    for r, b in zip(table.rows, table.mask):
        hist[r[attr]] += b
    return hist


def group_by_count_encoded(table, attr):
    hist = group_by_count(table, attr)
    a = table.schema[attr]
    name = COUNT_ATTRIBUTE if attr != COUNT_ATTRIBUTE else f"{attr}_count"
    schema = Schema((a, Attribute(name, tuple(range(table.n_rows + 1)))))
    return PlainTable(schema, [{attr: v, name: c} for v, c in enumerate(hist)])


def count_distinct(hist):
    return sum(1 for c in hist if c != 0)


def top_k(values, k):
    """Indices of the ``k`` largest values; ties go to the lower index."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    return frozenset(order[:k])


def evaluate(table, steps):
    """Apply the transformation steps and return the measured quantity.

    Returns:
        ``(kind, value)`` with kind ``"scalar"`` or ``"histogram"``.
    """
    current = table
    kind = "table"
    for s in steps:
        a = s.args
        if s.op == "project":
            current = project(current, a["attrs"])
        elif s.op == "filter":
            current = filter_rows(current, Predicate.from_values(current.schema, a["where"]))
        elif s.op == "cross_product":
            current = cross_product(current, a["left"], a["right"], a.get("out"))
        elif s.op == "count":
            current, kind = count(current), "scalar"
        elif s.op == "group_by_count":
            current, kind = group_by_count(current, a["attr"]), "histogram"
        elif s.op == "group_by_count_encoded":
            current = group_by_count_encoded(current, a["attr"])
        elif s.op == "count_distinct":
            current, kind = count_distinct(current), "scalar"
        else:
            break
    return kind, current


def run_query(table, query, noise_rng=None):
    """Release one query. Without ``noise_rng`` the answer is exact."""
    steps = validate_plan(query.steps, table.schema)
    kind, value = evaluate(table, steps[:-1])
    delta = compute_sensitivity(steps)
    last = steps[-1]
    values = [value] if kind == "scalar" else list(value)
    if last.op == "laplace":
        if noise_rng is not None:
            b = NoiseSpec.for_query(query.epsilon, delta).scale
            values = (np.asarray(values) + sample_discrete_laplace(b, noise_rng, len(values))).tolist()
        values = [int(v) for v in values]
        return values[0] if kind == "scalar" else values
    k = int(last.args.get("k", 1))
    if noise_rng is not None:
        b = NoiseSpec.for_query(query.epsilon, delta, k=k).scale
        values = (np.asarray(values) + sample_discrete_laplace(b, noise_rng, len(values))).tolist()
    return top_k(values, k)


def run_program(program, table, noise_rng=None):
    """Plaintext counterpart of :func:`cryptdp.engine.program.execute`."""
    raw = [run_query(table, q, noise_rng) for q in program.queries]
    if program.post == "cdf-isotonic":
        return isotonic_cdf(raw, table.n_rows).tolist()
    return raw[0] if len(raw) == 1 else raw

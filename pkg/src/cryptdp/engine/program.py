"""Program representation, static analysis and execution.

A program is a list of queries. Each query is a chain of transformations
ending in one measurement, and each measurement carries its own epsilon. An
optional post-processing step runs on the released values and spends nothing.
"""
from __future__ import annotations

import enum
import json
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

from ..dp import isotonic_cdf
from ..encoding import Attribute, cross_domain
from ..errors import PlanError
from .. import operators as ops
from ..operators import STABILITY, Predicate

TRANSFORMS = ("project", "filter", "cross_product", "count", "group_by_count",
              "group_by_count_encoded", "count_distinct")
MEASUREMENTS = ("laplace", "noisy_max")
POST = (None, "cdf-isotonic")


class ProgramClass(enum.Enum):
    CLASS_I = "ClassI"
    CLASS_II = "ClassII"
    CLASS_III = "ClassIII"


@dataclass(frozen=True)
class Step:
    op: str
    args: dict = field(default_factory=dict)

    def to_json(self):
        return {"op": self.op, **self.args}

    @classmethod
    def from_json(cls, data):
        data = dict(data)
        return cls(data.pop("op"), data)


@dataclass(frozen=True)
class Query:
    steps: tuple
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(
            s if isinstance(s, Step) else Step.from_json(s) for s in self.steps))


@dataclass(frozen=True)
class Program:
    id: str
    description: str
    queries: tuple
    post: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))

    @property
    def epsilon(self):
        return float(sum(Fraction(q.epsilon).limit_denominator(10**12) for q in self.queries))

    @property
    def plan(self):
        """Steps of the first query (all queries of a template share their shape)."""
        return self.queries[0].steps

    def to_json(self):
        return {
            "id": self.id,
            "description": self.description,
            "post": self.post,
            "queries": [{"epsilon": q.epsilon, "steps": [s.to_json() for s in q.steps]} for q in self.queries],
        }

    def dumps(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, data):
        return cls(
            data["id"],
            data.get("description", ""),
            tuple(Query(tuple(Step.from_json(s) for s in q["steps"]), q["epsilon"]) for q in data["queries"]),
            data.get("post"),
        )

    @classmethod
    def loads(cls, text):
        return cls.from_json(json.loads(text))


# Static analysis ------------------------------------------------------------

def _steps(plan):
    if isinstance(plan, Program):
        return plan.plan
    if isinstance(plan, Query):
        return plan.steps
    return tuple(s if isinstance(s, Step) else Step.from_json(s) for s in plan)


def validate_plan(plan, schema=None):
    """Check operator order and, when ``schema`` is given, attribute references.

    Raises:
        PlanError: if the chain is malformed.
    """
    steps = _steps(plan)
    if not steps:
        raise PlanError("empty plan")
    kinds = [s.op for s in steps]
    for op in kinds:
        if op not in TRANSFORMS and op not in MEASUREMENTS:
            raise PlanError(f"unknown operator {op!r}")
    if kinds[-1] not in MEASUREMENTS or any(k in MEASUREMENTS for k in kinds[:-1]):
        raise PlanError("a plan needs exactly one measurement, as its last step")
    state = "table"
    names = set(schema.names) if schema is not None else None
    for s in steps[:-1]:
        if state == "table":
            if s.op in ("count", "group_by_count"):
                _check_attr(names, s.args.get("attr"), s.op == "group_by_count")
                state = "vector" if s.op == "group_by_count" else "scalar"
            elif s.op == "count_distinct":
                raise PlanError("count_distinct needs a histogram")
            elif s.op == "group_by_count_encoded":
                _check_attr(names, s.args.get("attr"), True)
                if names is not None:
                    names = {s.args["attr"], ops.COUNT_ATTRIBUTE}
            elif s.op == "project":
                attrs = s.args.get("attrs") or []
                if not attrs:
                    raise PlanError("projection onto an empty attribute set")
                for a in attrs:
                    _check_attr(names, a, True)
                if names is not None:
                    names = set(attrs)
            elif s.op == "filter":
                for a in s.args.get("where", {}):
                    _check_attr(names, a, True)
            elif s.op == "cross_product":
                left, right = s.args.get("left"), s.args.get("right")
                _check_attr(names, left, True)
                _check_attr(names, right, True)
                if left == right:
                    raise PlanError("cross product needs two distinct attributes")
                if names is not None:
                    names = (names - {left, right}) | {s.args.get("out") or f"{left}*{right}"}
        elif state == "vector":
            if s.op != "count_distinct":
                raise PlanError(f"{s.op} cannot follow a histogram")
            state = "scalar"
        else:
            raise PlanError(f"{s.op} cannot follow a scalar")
    if state == "table":
        raise PlanError("measurement must be applied to a count or histogram")
    last = steps[-1]
    if last.op == "noisy_max":
        if state != "vector":
            raise PlanError("noisy_max needs a histogram")
        if int(last.args.get("k", 1)) < 1:
            raise PlanError("k must be positive")
    return steps


def _check_attr(names, attr, required):
    if required and not attr:
        raise PlanError("operator needs an attribute")
    if names is not None and attr is not None and attr not in names:
        raise PlanError(f"unknown attribute {attr!r}")


def compute_sensitivity(plan):
    """Product of the stabilities of the transformations in ``plan``.

    A top-k selection directly on a grouping uses per-coordinate
    sensitivity, so that last grouping contributes a factor of one.
    """
    steps = _steps(plan)
    transforms = [s.op for s in steps if s.op not in MEASUREMENTS]
    for op in transforms:
        if op not in STABILITY:
            raise PlanError(f"unknown operator {op!r}")
    factors = [STABILITY[op] for op in transforms]
    if steps and steps[-1].op == "noisy_max" and transforms and transforms[-1] == "group_by_count":
        factors[-1] = 1
    out = 1
    for f in factors:
        out *= f
    return out


def degree_profile(plan, schema):
    """Simulate factor counts through the plan.

    Returns:
        ``(relabel_rounds, third_class)``: the number of multiplication
        round trips the executor will make, and whether the plan uses a
        one-hot histogram or a two-party count.
    """
    steps = _steps(plan)
    attrs = {a.name: (1, a) for a in schema.attributes}
    b_deg = 0
    rounds = 0
    third = False
    for s in steps:
        a = s.args
        if s.op == "cross_product":
            left, right = a["left"], a["right"]
            (dl, al), (dr, ar) = attrs.pop(left), attrs.pop(right)
            out = a.get("out") or f"{left}*{right}"
            attrs[out] = (dl + dr, Attribute(out, cross_domain(al, ar)))
        elif s.op == "project":
            attrs = {k: v for k, v in attrs.items() if k in a["attrs"]}
        elif s.op == "filter":
            terms = []
            for name, spec in a.get("where", {}).items():
                deg, attr = attrs[name]
                selected, full = _selection(spec, attr)
                if full:
                    continue
                if selected > 1 and deg > 1:
                    rounds_needed = _rounds(deg)
                    terms.append((1, rounds_needed))
                else:
                    terms.append((deg if selected == 1 else 1, 0))
            if not terms:
                continue
            rounds += max(r for _, r in terms)
            total = b_deg + sum(d for d, _ in terms)
            if total > 2:
                rounds += _rounds(total)
                b_deg = 1
            else:
                b_deg = total
        elif s.op in ("group_by_count", "group_by_count_encoded"):
            deg, attr = attrs[a["attr"]]
            if b_deg + deg > 2:
                rounds += _rounds(b_deg + deg)
            if s.op == "group_by_count_encoded":
                third = True
                attrs = {attr.name: (1, attr), ops.COUNT_ATTRIBUTE: (1, None)}
                b_deg = 0
        elif s.op == "count_distinct":
            third = True
    return rounds, third


def _rounds(n):
    return math.ceil(math.log2(n)) if n > 1 else 0


def _selection(spec, attr):
    """``(number of selected positions, covers whole domain)`` for a filter term.

    ``attr`` is ``None`` for the count column of an encoded histogram, whose
    width depends on the data; only open-ended ranges count as full there.
    """
    if isinstance(spec, dict):
        lo, hi = spec["between"]
        if attr is None:
            full = lo in (None, 0) and hi is None
            return (2 if not full else 0), full
        lo_i, hi_i = ops.range_indices(attr, lo, hi)
        n = max(0, hi_i - lo_i + 1)
    else:
        if attr is None:
            return len(set(spec)), False
        n = len({attr.index_of(v) for v in spec})
    return n, attr is not None and n >= attr.size


def classify_program(plan, schema):
    """Interaction class: III uses a one-hot histogram or a two-party count,
    II needs multiplication rounds, I needs only the final measurement."""
    rounds, third = degree_profile(plan, schema)
    if third:
        return ProgramClass.CLASS_III
    if rounds:
        return ProgramClass.CLASS_II
    return ProgramClass.CLASS_I


# Execution ------------------------------------------------------------------

@dataclass
class ExecutionResult:
    program_id: str
    value: object
    raw: list
    sensitivity: int
    transcript_start: int
    transcript_end: int
    seconds: float
    csp_seconds: float = 0.0


def run_query(server, table, query, cache=None):
    """Evaluate one query and return ``(released value, sensitivity)``."""
    steps = validate_plan(query.steps, table.schema)
    current = table
    for s in steps[:-1]:
        a = s.args
        if s.op == "project":
            current = ops.project(current, a["attrs"])
        elif s.op == "filter":
            current = ops.filter_rows(server, current, Predicate.from_values(current.schema, a["where"]))
        elif s.op == "cross_product":
            current = ops.cross_product(current, a["left"], a["right"], a.get("out"), cache)
        elif s.op == "count":
            current = ops.count(server, current)
        elif s.op == "group_by_count":
            current = ops.group_by_count(server, current, a["attr"])
        elif s.op == "group_by_count_encoded":
            current = ops.group_by_count_encoded(server, current, a["attr"])
        elif s.op == "count_distinct":
            current = ops.count_distinct(server, current)
    last = steps[-1]
    delta = compute_sensitivity(steps)
    if ops.sensitivity_of(current.provenance, last.op) != delta:
        raise PlanError("runtime stability record disagrees with the static analysis")
    if last.op == "laplace":
        values = ops.laplace(server, current, query.epsilon, delta)
        return (values[0] if current.kind == "scalar" else values), delta
    return ops.noisy_max(server, current, int(last.args.get("k", 1)), query.epsilon, delta), delta


def execute(program, table, server, cache=None, csp=None):
    """Run every query of ``program`` against ``table``.

    Each measurement is one ledger entry at the CSP under ``program.id``.
    ``cdf-isotonic`` post-processing fits a nondecreasing curve bounded by
    the row count to the released values.

    Args:
        program: The :class:`Program`.
        table: Encrypted input table.
        server: :class:`~cryptdp.engine.parties.AnalyticsServer`.
        cache: Optional :class:`~cryptdp.optimize.PrecomputeCache`.
        csp: In-process CSP, only used to report its busy time.
    """
    start_mark = len(server.transcript)
    busy0 = csp.busy_seconds if csp is not None else 0.0
    t0 = time.perf_counter()
    raw = []
    delta = None
    with server.program(program.id, program.description):
        for q in program.queries:
            value, delta = run_query(server, table, q, cache)
            raw.append(value)
    if program.post == "cdf-isotonic":
        value = isotonic_cdf(raw, table.n_rows).tolist()
    elif len(raw) == 1:
        value = raw[0]
    else:
        value = raw
    return ExecutionResult(
        program.id, value, raw, delta, start_mark, len(server.transcript),
        time.perf_counter() - t0,
        (csp.busy_seconds - busy0) if csp is not None else 0.0,
    )

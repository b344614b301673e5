"""Library of the seven reference programs and a random program generator.

The templates assume an Adult-like schema with ``Age``, ``Gender``,
``NativeCountry`` and ``Race``. Values are looked up in the schema, so a
schema with different domains still expands as long as the named values
exist.
"""
from __future__ import annotations

from fractions import Fraction

from .engine.program import Program, Query, Step, validate_plan
from .errors import PlanError
from .lhe import make_rng

TEMPLATE_IDS = ("P1", "P2", "P3", "P4", "P5", "P6", "P7")

# Table-2 style subscripts: the sensitivity each template's measurement uses.
EXPECTED_SENSITIVITY = {"P1": 1, "P2": 1, "P3": 2, "P4": 2, "P5": 1, "P6": 2, "P7": 2}

DESCRIPTIONS = {
    "P1": "c.d.f. of Age from per-prefix range counts",
    "P2": "the five most frequent Age values",
    "P3": "marginal over Race and Gender",
    "P4": "marginal over Age and Gender for rows with NativeCountry=Mexico",
    "P5": "count of rows with Age=30, Gender=Male, NativeCountry=Mexico",
    "P6": "number of distinct Age values among rows with Gender=Male",
    "P7": "number of Age values with at least 200 rows",
}


def _require(schema, *names):
    missing = [n for n in names if n not in schema]
    if missing:
        raise PlanError(f"schema lacks attributes {missing}")


def _q(epsilon, *steps):
    return Query(tuple(Step(op, args) for op, args in steps), epsilon)


def expand(template_id, schema, epsilon, **params):
    """Instantiate a template as a :class:`Program`.

    Args:
        template_id: ``"P1"`` .. ``"P7"`` (case-insensitive).
        schema: Schema of the input table.
        epsilon: Total privacy parameter of the program.
        **params: Template options. ``P1``: ``splits`` (per-range weights,
            default uniform) and ``ranges`` (number of prefixes, default
            the Age domain size). ``P2``: ``k`` (default 5). ``P5``:
            ``age``, ``gender``, ``country``. ``P4``: ``country``. ``P6``:
            ``gender``. ``P7``: ``threshold`` (default 200).

    Raises:
        PlanError: unknown template, missing attribute or bad parameter.
    """
    tid = str(template_id).upper()
    if tid not in TEMPLATE_IDS:
        raise PlanError(f"unknown program template {template_id!r}")
    if epsilon <= 0:
        raise PlanError("epsilon must be positive")
    desc = DESCRIPTIONS[tid]
    if tid == "P1":
        _require(schema, "Age")
        age = schema["Age"]
        ranges = int(params.get("ranges", age.size))
        if not 1 <= ranges <= age.size:
            raise PlanError(f"ranges must lie in [1, {age.size}]")
        weights = params.get("splits") or [1] * ranges
        if len(weights) != ranges or any(w <= 0 for w in weights):
            raise PlanError("splits must hold one positive weight per range")
        total = sum(Fraction(w) for w in weights)
        eps = Fraction(epsilon).limit_denominator(10**12)
        queries = tuple(
            _q(float(eps * Fraction(w) / total),
               ("project", {"attrs": ["Age"]}),
               ("filter", {"where": {"Age": {"between": [age.domain[0], age.domain[i]]}}}),
               ("count", {}),
               ("laplace", {}))
            for i, w in zip(range(ranges), weights)
        )
        return Program(tid, desc, queries, "cdf-isotonic")
    if tid == "P2":
        _require(schema, "Age")
        k = int(params.get("k", 5))
        return Program(tid, desc, (_q(epsilon, ("group_by_count", {"attr": "Age"}), ("noisy_max", {"k": k})),))
    if tid == "P3":
        _require(schema, "Race", "Gender")
        out = "Race*Gender"
        return Program(tid, desc, (_q(
            epsilon,
            ("cross_product", {"left": "Race", "right": "Gender", "out": out}),
            ("project", {"attrs": [out]}),
            ("group_by_count", {"attr": out}),
            ("laplace", {}),
        ),))
    if tid == "P4":
        _require(schema, "Age", "Gender", "NativeCountry")
        out = "Age*Gender"
        return Program(tid, desc, (_q(
            epsilon,
            ("cross_product", {"left": "Age", "right": "Gender", "out": out}),
            ("project", {"attrs": [out, "NativeCountry"]}),
            ("filter", {"where": {"NativeCountry": [params.get("country", "Mexico")]}}),
            ("group_by_count", {"attr": out}),
            ("laplace", {}),
        ),))
    if tid == "P5":
        _require(schema, "Age", "Gender", "NativeCountry")
        where = {
            "Age": [params.get("age", 30)],
            "Gender": [params.get("gender", "Male")],
            "NativeCountry": [params.get("country", "Mexico")],
        }
        return Program(tid, desc, (_q(
            epsilon,
            ("project", {"attrs": ["Age", "Gender", "NativeCountry"]}),
            ("filter", {"where": where}),
            ("count", {}),
            ("laplace", {}),
        ),))
    if tid == "P6":
        _require(schema, "Age", "Gender")
        return Program(tid, desc, (_q(
            epsilon,
            ("project", {"attrs": ["Age", "Gender"]}),
            ("filter", {"where": {"Gender": [params.get("gender", "Male")]}}),
            ("group_by_count", {"attr": "Age"}),
            ("count_distinct", {}),
            ("laplace", {}),
        ),))
    _require(schema, "Age")
    threshold = int(params.get("threshold", 200))
    if threshold < 0:
        raise PlanError("threshold must be non-negative")
    return Program(tid, desc, (_q(
        epsilon,
        ("project", {"attrs": ["Age"]}),
        ("group_by_count_encoded", {"attr": "Age"}),
        ("filter", {"where": {"count": {"between": [threshold, None]}}}),
        ("count", {}),
        ("laplace", {}),
    ),))


def expand_all(schema, epsilon, **params):
    return {tid: expand(tid, schema, epsilon, **params.get(tid, {})) for tid in TEMPLATE_IDS}


# Random programs ------------------------------------------------------------

def _random_where(rng, attrs, names):
    where = {}
    for name in rng.sample(names, rng.randint(1, min(2, len(names)))):
        domain = attrs[name]
        if rng.random() < 0.5:
            lo = rng.randrange(len(domain))
            hi = rng.randrange(lo, len(domain))
            where[name] = {"between": [domain[lo], domain[hi]]}
        else:
            where[name] = rng.sample(list(domain), rng.randint(1, len(domain)))
    return where


def generate_random_program(rng, schema, depth, epsilon=1.0, max_count=None):
    """Draw a random well-formed single-query program.

    The first ``depth - 1`` steps are table transformations picked among
    those whose preconditions hold; the chain then ends in a count or a
    histogram (optionally followed by a distinct count) and one
    measurement. ``depth=1`` always gives ``count`` + ``laplace``.

    Args:
        rng: Seed or ``random.Random``.
        schema: Input schema.
        depth: Length of the chain before its final aggregation, plus one (≥ 1).
        epsilon: Epsilon of the single query.
        max_count: Upper end for thresholds on an encoded histogram's count
            column (defaults to 8).
    """
    if depth < 1:
        raise PlanError("depth must be at least 1")
    rng = make_rng(rng) if not hasattr(rng, "random") else rng
    attrs = {a.name: tuple(a.domain) for a in schema.attributes}
    order = list(schema.names)
    steps = []
    encoded = False
    max_count = 8 if max_count is None else int(max_count)
    for _ in range(depth - 1):
        choices = ["filter", "project"]
        if len(order) >= 2 and not encoded and sum(1 for s in steps if s.op == "cross_product") < 1:
            choices.append("cross_product")
        if not encoded:
            choices.append("group_by_count_encoded")
        op = rng.choice(choices)
        if op == "filter":
            # Count-column values depend on the data, so only open ranges are drawn there.
            names = [n for n in order if n != "count"]
            if "count" in order and (not names or rng.random() < 0.6):
                where = {"count": {"between": [rng.randint(0, max_count), None]}}
            else:
                where = _random_where(rng, attrs, names)
            steps.append(Step("filter", {"where": where}))
        elif op == "project":
            keep = rng.sample(order, rng.randint(1, len(order)))
            order = [n for n in order if n in keep]
            steps.append(Step("project", {"attrs": keep}))
        elif op == "cross_product":
            left, right = rng.sample(order, 2)
            out = f"{left}*{right}"
            attrs[out] = tuple((x, y) for x in attrs[left] for y in attrs[right])
            pos = order.index(left)
            order = [n for n in order if n not in (left, right)]
            order.insert(min(pos, len(order)), out)
            steps.append(Step("cross_product", {"left": left, "right": right, "out": out}))
        else:
            attr = rng.choice(order)
            steps.append(Step("group_by_count_encoded", {"attr": attr}))
            order = [attr, "count"]
            attrs = {attr: attrs[attr], "count": tuple(range(max_count + 1))}
            encoded = True
    roll = rng.random() if depth > 1 else 0.0
    if roll < 0.4:
        steps.append(Step("count", {}))
        steps.append(Step("laplace", {}))
    else:
        group_attr = rng.choice([n for n in order if n != "count"] or order)
        steps.append(Step("group_by_count", {"attr": group_attr}))
        if roll < 0.7:
            steps.append(Step("count_distinct", {}))
            steps.append(Step("laplace", {}))
        elif roll < 0.85:
            steps.append(Step("laplace", {}))
        else:
            size = len(attrs[group_attr]) if group_attr != "count" else 1
            steps.append(Step("noisy_max", {"k": rng.randint(1, max(1, min(3, size)))}))
    program = Program(f"R{rng.getrandbits(32):08x}", "random program", (Query(tuple(steps), epsilon),))
    validate_plan(program.plan, schema)
    return program

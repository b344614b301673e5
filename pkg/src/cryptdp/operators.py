"""The query operators: seven transformations and two measurements.

Transformations that stay at degree two or less run locally at the AS.
Longer products go through the interactive multiplication protocol.
Measurements always involve the CSP, which checks the budget before
decrypting anything.

``server`` arguments are the AS-side session (see
:class:`cryptdp.engine.parties.AnalyticsServer`). The operators only need
its public key, randomness, and protocol calls.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from gmpy2 import mpz

from .dp import NoiseSpec, signed_encode
from .encoding import Attribute, EncTable, Schema, cross_domain
from .errors import IngestionError, PlanError
from .labhe import LabCiphertext, MultCiphertext, lab_sub, lab_sum, lab_trivial

STABILITY = {
    "cross_product": 1,
    "project": 1,
    "filter": 1,
    "count": 1,
    "count_distinct": 1,
    "group_by_count": 2,
    "group_by_count_encoded": 2,
}

# Statistical hiding parameter for masks that must stay reducible modulo a small number.
STAT_MASK_BITS = 80
COUNT_ATTRIBUTE = "count"


@dataclass(frozen=True)
class StabilityInfo:
    operator: str
    stability: int

    @classmethod
    def of(cls, operator):
        try:
            return cls(operator, STABILITY[operator])
        except KeyError:
            raise PlanError(f"unknown transformation {operator!r}") from None


@dataclass(frozen=True)
class Predicate:
    """Conjunction of ``attribute in {value indices}`` terms."""

    terms: tuple

    def __post_init__(self):
        object.__setattr__(
            self, "terms", tuple((attr, frozenset(int(i) for i in idx)) for attr, idx in self.terms)
        )

    @classmethod
    def from_values(cls, schema, conditions):
        """Build a predicate from domain values.

        Args:
            schema: Schema the attributes belong to.
            conditions: ``{attr: spec}`` where ``spec`` is a list of values or
                ``{"between": [lo, hi]}`` (inclusive, domain order; ``None``
                stands for the corresponding end of the domain).
        """
        terms = []
        for attr, spec in conditions.items():
            a = schema[attr]
            if isinstance(spec, dict):
                lo_i, hi_i = range_indices(a, *spec["between"])
                idx = range(lo_i, hi_i + 1)
            else:
                idx = [a.index_of(v) for v in spec]
            terms.append((attr, idx))
        return cls(tuple(terms))

    def validate(self, schema):
        for attr, idx in self.terms:
            size = schema.size(attr)
            if any(i < 0 or i >= size for i in idx):
                raise PlanError(f"predicate index out of range for attribute {attr!r}")

    def holds(self, value_indices):
        return all(value_indices[attr] in idx for attr, idx in self.terms)


def range_indices(attr, lo, hi):
    """Inclusive domain-index bounds of ``lo <= value <= hi``.

    ``None`` stands for the end of the domain. On an integer domain a bound
    outside the domain is clamped, so ``[200, None]`` on counts ``0..50``
    selects nothing instead of failing.
    """
    return _bound(attr, lo, 0), _bound(attr, hi, attr.size - 1)


def _bound(attr, value, default):
    if value is None:
        return default
    try:
        return attr.index_of(value)
    except IngestionError:
        if not (isinstance(value, int) and all(isinstance(v, int) for v in attr.domain)):
            raise
    if default == 0:
        return sum(1 for v in attr.domain if v < value)
    return sum(1 for v in attr.domain if v <= value) - 1


@dataclass(eq=False)
class EncVector:
    """Encrypted counts: a histogram over ``keys`` or a single scalar."""

    elements: list
    kind: str = "histogram"
    keys: tuple = ()
    row_bound: int = 0
    provenance: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.elements)


def _as_mult(x):
    return MultCiphertext.lift(x) if isinstance(x, LabCiphertext) else x


def _materialize(server, monomials):
    """Reduce monomials to at most degree-2 values, relabeling long ones in one batch."""
    out = [None] * len(monomials)
    long_idx = []
    for i, m in enumerate(monomials):
        if len(m) == 1:
            out[i] = m[0]
        elif len(m) == 2:
            out[i] = MultCiphertext.product(m[0], m[1])
        else:
            long_idx.append(i)
    if long_idx:
        for i, r in zip(long_idx, server.relabel([monomials[i] for i in long_idx])):
            out[i] = r
    return out


def _relabel(server, monomials):
    """Reduce monomials to single labeled ciphertexts."""
    long_idx = [i for i, m in enumerate(monomials) if len(m) > 1]
    out = [m[0] if len(m) == 1 else None for m in monomials]
    if long_idx:
        for i, r in zip(long_idx, server.relabel([monomials[i] for i in long_idx])):
            out[i] = r
    return out


def _need(table, attr):
    if attr not in table.schema:
        raise PlanError(f"attribute {attr!r} not present; have {list(table.schema.names)}")


def cross_product(table, left, right, out=None, cache=None):
    """Replace ``left`` and ``right`` by one attribute over their joint domain.

    Position ``l`` of the new one-hot is the product of ``left[l // s2]`` and
    ``right[l % s2]``. The product is kept as a two-factor monomial, so the
    step itself needs no interaction; a warm ``cache`` supplies an already
    relabeled column instead.
    """
    _need(table, left)
    _need(table, right)
    if left == right:
        raise PlanError("cross product needs two distinct attributes")
    la, ra = table.schema[left], table.schema[right]
    out = out or f"{left}*{right}"
    if out in table.schema and out not in (left, right):
        raise PlanError(f"attribute {out!r} already exists")
    column = cache.lookup(table, (left, right)) if cache is not None else None
    if column is None:
        lcol, rcol = table.columns[left], table.columns[right]
        column = [[lm + rm for lm in lrow for rm in rrow] for lrow, rrow in zip(lcol, rcol)]
    attrs = []
    for a in table.schema.attributes:
        if a.name == left:
            attrs.append(Attribute(out, cross_domain(la, ra)))
        elif a.name != right:
            attrs.append(a)
    columns = {k: v for k, v in table.columns.items() if k not in (left, right)}
    columns[out] = column
    return table.derive(
        schema=Schema(tuple(attrs)),
        columns=columns,
        provenance=table.provenance + (("cross_product", 1),),
    )


def project(table, attrs):
    """Keep only ``attrs`` (in schema order); ``B`` is untouched."""
    attrs = list(attrs)
    if not attrs:
        raise PlanError("projection onto an empty attribute set")
    for a in attrs:
        _need(table, a)
    keep = [a for a in table.schema.names if a in attrs]
    return table.derive(
        schema=table.schema.subset(keep),
        columns={a: table.columns[a] for a in keep},
        provenance=table.provenance + (("project", 1),),
    )


def filter_rows(server, table, predicate):
    """Zero out ``B`` for rows that fail ``predicate``.

    The per-term indicator is the sum of the selected one-hot positions. A
    term that covers its whole domain is identically one and is dropped.
    The indicator factors are appended to ``B``'s factors; products of more
    than two factors are relabeled through the multiplication protocol, all
    rows in one batch.
    """
    predicate.validate(table.schema)
    pk = server.pk
    terms = [(a, sorted(idx)) for a, idx in predicate.terms if len(idx) < table.schema.size(a)]
    provenance = table.provenance + (("filter", 1),)
    if not terms:
        return table.derive(provenance=provenance)
    n = table.n_rows

    # Multi-position terms over product columns need their cells relabeled first.
    pending = []
    for attr, idx in terms:
        if len(idx) > 1:
            col = table.columns[attr]
            pending.extend(col[i][j] for i in range(n) for j in idx if len(col[i][j]) > 1)
    relabeled = dict(zip(map(id, pending), _relabel(server, pending))) if pending else {}

    factors = [list(table.indicator[i]) if not table.pristine else [] for i in range(n)]
    zero = lab_trivial(pk, 0)
    for attr, idx in terms:
        col = table.columns[attr]
        for i in range(n):
            if not idx:
                factors[i].append(zero)
            elif len(idx) == 1:
                factors[i].extend(col[i][idx[0]])
            else:
                cells = [relabeled.get(id(col[i][j])) or col[i][j][0] for j in idx]
                factors[i].append(lab_sum(cells, pk))
    long_rows = [i for i in range(n) if len(factors[i]) > 2]
    indicator = [tuple(f) for f in factors]
    if long_rows:
        for i, c in zip(long_rows, server.relabel([factors[i] for i in long_rows])):
            indicator[i] = (c,)
    return table.derive(indicator=indicator, pristine=False, provenance=provenance)


def count(server, table):
    """Encrypted number of rows whose ``B`` bit is one."""
    pk = server.pk
    values = _materialize(server, table.indicator)
    total = MultCiphertext.total(values, pk) if values else MultCiphertext.lift(lab_trivial(pk, 0))
    return EncVector([total], "scalar", ("count",), table.n_rows, table.provenance + (("count", 1),))


def group_by_count(server, table, attr, _operator="group_by_count"):
    """Encrypted histogram of ``attr`` over rows with ``B`` = 1."""
    _need(table, attr)
    pk = server.pk
    size = table.schema.size(attr)
    col = table.columns[attr]
    n = table.n_rows
    monomials = []
    for v in range(size):
        for i in range(n):
            monomials.append(col[i][v] if table.pristine else table.indicator[i] + col[i][v])
    values = _materialize(server, monomials)
    elements = [MultCiphertext.total(values[v * n:(v + 1) * n], pk) for v in range(size)]
    return EncVector(
        elements,
        "histogram",
        table.schema[attr].domain,
        n,
        table.provenance + ((_operator, 2),),
    )


def group_by_count_encoded(server, table, attr):
    """Histogram of ``attr`` with each count one-hot encoded over ``0..m``.

    The AS masks each count with ``M + (m+1) R`` (``M`` uniform in ``0..m``,
    ``R`` a wide random multiple that hides the unreduced sum), the CSP
    reduces modulo ``m + 1`` and returns an encrypted one-hot, and the AS
    rotates it left by ``M`` so the one lands back on the true count.

    Returns:
        A table with attributes ``(attr, "count")``: one row per domain
        value of ``attr``, ``B`` all ones.
    """
    hist = group_by_count(server, table, attr, _operator="group_by_count_encoded")
    m = table.n_rows
    width = m + 1
    rng = server.rng
    shifts = [rng.randrange(width) for _ in hist.elements]
    sealed = [
        _as_mult(v).seal(mpz(s) + width * mpz(rng.getrandbits(STAT_MASK_BITS)), rng)
        for v, s in zip(hist.elements, shifts)
    ]
    vectors = server.hist_encode(sealed, width)
    pk = server.pk
    a = table.schema[attr]
    count_name = COUNT_ATTRIBUTE if attr != COUNT_ATTRIBUTE else f"{attr}_count"
    one, zero = lab_trivial(pk, 1), lab_trivial(pk, 0)
    # The key column is public by construction, so trivial encodings suffice.
    key_col = [[(one,) if i == v else (zero,) for i in range(a.size)] for v in range(a.size)]
    count_col = [[(vec[(j + s) % width],) for j in range(width)] for vec, s in zip(vectors, shifts)]
    out = EncTable(
        Schema((a, Attribute(count_name, tuple(range(width))))),
        {a.name: key_col, count_name: count_col},
        [(one,) for _ in range(a.size)],
        True,
        hist.provenance,
    )
    return out


def count_distinct(server, vector):
    """Encrypted number of non-zero entries of a histogram."""
    pk = server.pk
    rng = server.rng
    masks = [mpz(rng.randrange(int(pk.n))) for _ in vector.elements]
    sealed = [_as_mult(v).seal(m, rng) for v, m in zip(vector.elements, masks)]
    shifted, enc_r = server.count_nonzero(sealed, masks)
    result = lab_sub(lab_trivial(pk, shifted), enc_r)
    return EncVector(
        [MultCiphertext.lift(result)], "scalar", ("count_distinct",), len(vector),
        vector.provenance + (("count_distinct", 1),),
    )


def laplace(server, vector, epsilon, sensitivity):
    """Noisy plaintext release of every coordinate.

    The AS adds one discrete Laplace draw per coordinate under encryption;
    the CSP checks the budget, records the spend, decrypts and adds its own
    independent draw at the same scale ``2 * sensitivity / epsilon``.
    """
    spec = NoiseSpec.for_query(epsilon, sensitivity)
    pk = server.pk
    noise = server.draw_noise(spec.scale, len(vector))
    sealed = [_as_mult(v).seal(signed_encode(eta, pk.n), server.rng) for v, eta in zip(vector.elements, noise)]
    return server.decrypt_noisy(sealed, epsilon, sensitivity)


def noisy_max(server, vector, k, epsilon, sensitivity):
    """Indices of the ``k`` largest noisy coordinates, as a set; values stay hidden."""
    if not 1 <= k <= len(vector):
        raise PlanError(f"k must lie in [1, {len(vector)}]; got {k}")
    spec = NoiseSpec.for_query(epsilon, sensitivity, k=k)
    pk = server.pk
    rng = server.rng
    noise = server.draw_noise(spec.scale, len(vector))
    masks = [mpz(rng.randrange(int(pk.n))) for _ in vector.elements]
    sealed = [
        _as_mult(v).seal(signed_encode(eta, pk.n) + m, rng)
        for v, eta, m in zip(vector.elements, noise, masks)
    ]
    return server.noisy_max(sealed, masks, k, epsilon, sensitivity)


def sensitivity_of(provenance, measurement="laplace"):
    """Product of recorded stabilities.

    For top-k selection the last grouping contributes per-coordinate
    sensitivity: one row changes each count by at most one.
    """
    stabilities = [t for _, t in provenance]
    if measurement == "noisy_max" and provenance and provenance[-1][0] == "group_by_count":
        stabilities[-1] = 1
    out = 1
    for t in stabilities:
        out *= t
    return out

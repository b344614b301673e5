"""Schemas, one-hot encoding, record encryption and the encrypted table.

Table cells are stored as *monomials*: tuples of labeled ciphertexts whose
product is the cell's plaintext. A freshly ingested cell is a 1-tuple; a
cross product concatenates factor tuples without any interaction, and the
operators decide when a product is long enough to need the interactive
multiplication protocol.
"""
from __future__ import annotations

import csv
import itertools
import json
import uuid
from dataclasses import dataclass, field, replace

from gmpy2 import mpz

from .errors import AggregationError, IngestionError, PlanError
from .labhe import LabCiphertext, lab_decrypt, lab_encrypt, local_gen
from .lhe import Ciphertext, PublicKey, default_rng


@dataclass(frozen=True)
class Attribute:
    name: str
    domain: tuple

    def __post_init__(self):
        object.__setattr__(self, "domain", tuple(self.domain))
        if not self.domain:
            raise PlanError(f"attribute {self.name!r} has an empty domain")
        object.__setattr__(self, "_index", {v: i for i, v in enumerate(self.domain)})
        object.__setattr__(self, "_str_index", {str(v): i for i, v in enumerate(self.domain)})

    @property
    def size(self):
        return len(self.domain)

    def index_of(self, value):
        """Domain index of ``value``; string spellings of values are accepted too."""
        if isinstance(value, list):
            value = tuple(value)
        try:
            return self._index[value]
        except (KeyError, TypeError):
            pass
        try:
            return self._str_index[str(value)]
        except KeyError:
            raise IngestionError(f"value {value!r} not in domain of attribute {self.name!r}") from None


@dataclass(frozen=True)
class Schema:
    """Ordered attributes with fixed, finite domains."""

    attributes: tuple

    def __post_init__(self):
        attrs = tuple(a if isinstance(a, Attribute) else Attribute(a[0], a[1]) for a in self.attributes)
        names = [a.name for a in attrs]
        if len(set(names)) != len(names):
            raise PlanError("attribute names must be unique")
        object.__setattr__(self, "attributes", attrs)
        object.__setattr__(self, "_by_name", {a.name: a for a in attrs})

    @property
    def names(self):
        return tuple(a.name for a in self.attributes)

    def __contains__(self, name):
        return name in self._by_name

    def __getitem__(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise PlanError(f"unknown attribute {name!r}") from None

    def size(self, name):
        return self[name].size

    def subset(self, names):
        return Schema(tuple(self[n] for n in names))

    def dumps(self):
        return "".join(f"{a.name}: {','.join(str(v) for v in a.domain)}\n" for a in self.attributes)

    @classmethod
    def loads(cls, text):
        """Parse ``name: v1,v2,...`` lines; blank lines and ``#`` comments are skipped."""
        attrs = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            name, sep, values = line.partition(":")
            if not sep:
                raise IngestionError(f"schema line lacks ':': {raw!r}")
            attrs.append(Attribute(name.strip(), tuple(v.strip() for v in values.split(",") if v.strip())))
        return cls(tuple(attrs))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())

    def to_json(self):
        return [[a.name, [str(v) for v in a.domain]] for a in self.attributes]

    @classmethod
    def from_json(cls, data):
        return cls(tuple(Attribute(name, tuple(domain)) for name, domain in data))


@dataclass(frozen=True)
class OneHotRecord:
    bits: dict

    def value_indices(self):
        return {name: vec.index(1) for name, vec in self.bits.items()}


def encode(schema, raw_row):
    """One-hot encode a row given as a sequence (schema order) or a mapping."""
    if isinstance(raw_row, dict):
        values = [raw_row.get(a.name, _MISSING) for a in schema.attributes]
    else:
        values = list(raw_row)
        if len(values) != len(schema.attributes):
            raise IngestionError(f"row has {len(values)} values, schema has {len(schema.attributes)}")
    bits = {}
    for attr, value in zip(schema.attributes, values):
        if value is _MISSING:
            raise IngestionError(f"row lacks attribute {attr.name!r}")
        idx = attr.index_of(value)
        bits[attr.name] = tuple(1 if i == idx else 0 for i in range(attr.size))
    return OneHotRecord(bits)


_MISSING = object()


@dataclass(frozen=True)
class EncRecord:
    row_id: int
    columns: dict


def encrypt_record(pk, keys, record, row_id, rng=None):
    """Element-wise labeled encryption of a one-hot record by its owner."""
    columns = {}
    for name, vec in record.bits.items():
        columns[name] = tuple(
            lab_encrypt(pk, keys, bit, f"{name}/{i}/{row_id}", rng) for i, bit in enumerate(vec)
        )
    return EncRecord(row_id, columns)


@dataclass(eq=False)
class EncTable:
    """Encrypted rows plus the encrypted membership indicator ``B``.

    Attributes:
        schema: Current attribute layout (cross products add tuple domains).
        columns: ``name -> rows -> domain position -> monomial``.
        indicator: ``B`` as one monomial per row.
        pristine: True while ``B`` is still the all-ones vector produced at
            aggregation, which lets operators skip the multiplication by it.
        provenance: ``(operator, stability)`` history for sensitivity checks.
        source: Identifier of the underlying row set (kept by row-preserving
            operators, used by the precompute cache).
    """

    schema: Schema
    columns: dict
    indicator: list
    pristine: bool = True
    provenance: tuple = ()
    source: str = field(default_factory=lambda: uuid.uuid4().hex)

    @property
    def n_rows(self):
        return len(self.indicator)

    @property
    def public_key(self):
        for row in self.indicator:
            return row[0].d.public_key
        for col in self.columns.values():
            for row in col:
                return row[0][0].d.public_key
        return None

    def derive(self, **changes):
        return replace(self, **changes)

    def column_degree(self, name):
        return max((len(m) for row in self.columns[name] for m in row), default=1)

    def indicator_degree(self):
        if self.pristine:
            return 0
        return max((len(m) for m in self.indicator), default=1)

    def rows(self, start, stop):
        """A contiguous slice of rows as a new table with its own source id."""
        return EncTable(
            self.schema,
            {k: col[start:stop] for k, col in self.columns.items()},
            self.indicator[start:stop],
            self.pristine,
            self.provenance,
        )

    def to_json(self):
        if not all(len(m) == 1 for col in self.columns.values() for row in col for m in row):
            raise PlanError("only tables of fresh ciphertexts can be serialized")
        return {
            "schema": self.schema.to_json(),
            "n": str(self.public_key.n) if self.public_key is not None else None,
            "pristine": self.pristine,
            "indicator": [_lab_json(m[0]) for m in self.indicator],
            "columns": {k: [[_lab_json(m[0]) for m in row] for row in col] for k, col in self.columns.items()},
        }

    @classmethod
    def from_json(cls, data, pk):
        if data.get("n") is not None and mpz(data["n"]) != pk.n:
            raise AggregationError("table was encrypted under a different public key")
        return cls(
            Schema.from_json(data["schema"]),
            {k: [[(_lab_from_json(x, pk),) for x in row] for row in col] for k, col in data["columns"].items()},
            [(_lab_from_json(x, pk),) for x in data["indicator"]],
            bool(data.get("pristine", True)),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, separators=(",", ":"))

    @classmethod
    def load(cls, path, pk):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh), pk)


def _lab_json(c):
    return [str(c.a), str(c.d.value), c.label]


def _lab_from_json(x, pk):
    return LabCiphertext(mpz(x[0]), Ciphertext(mpz(x[1]), pk), x[2])


def aggregate(records, schema, pk, keys, rng=None):
    """Collate encrypted records, in arrival order, into an :class:`EncTable`.

    Args:
        records: Encrypted records; each must cover exactly ``schema``.
        schema: Expected layout.
        pk: Public key.
        keys: The aggregator's own labeling material, used for ``B``.
        rng: Randomness source.
    """
    columns = {a.name: [] for a in schema.attributes}
    indicator = []
    batch = uuid.uuid4().hex  # B labels must never repeat under the aggregator's seed
    for rec in records:
        if set(rec.columns) != set(columns):
            raise AggregationError(f"record {rec.row_id} does not match the schema attributes")
        for attr in schema.attributes:
            cells = rec.columns[attr.name]
            if len(cells) != attr.size:
                raise AggregationError(f"record {rec.row_id}: attribute {attr.name!r} has wrong width")
            columns[attr.name].append([(c,) for c in cells])
        indicator.append((lab_encrypt(pk, keys, 1, f"B/{batch}/{len(indicator)}", rng),))
    return EncTable(schema, columns, indicator)


def ingest_rows(rows, schema, pk, as_keys, rng=None):
    """Simulate the data-collection phase: every row is encoded and encrypted by its own owner."""
    rng = default_rng(rng)
    records = []
    for row_id, raw in enumerate(rows):
        owner = local_gen(pk, rng, publish=False)
        records.append(encrypt_record(pk, owner, encode(schema, raw), row_id, rng))
    return aggregate(records, schema, pk, as_keys, rng)


def read_csv(path, schema):
    """Read a UTF-8 CSV whose header names the schema attributes."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [a for a in schema.names if a not in (reader.fieldnames or [])]
        if missing:
            raise IngestionError(f"CSV lacks columns {missing}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                rows.append(tuple(schema[a].domain[schema[a].index_of(rec[a].strip())] for a in schema.names))
            except IngestionError as exc:
                raise IngestionError(f"line {lineno}: {exc}") from None
    return rows


def write_csv(path, schema, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.names)
        writer.writerows(rows)


def decrypt_table(sk, table):
    """Decrypt an :class:`EncTable` into ``(rows of value indices, B bits)`` (testing aid)."""
    n = sk.public_key.n

    def mono(m):
        v = 1
        for f in m:
            v = v * lab_decrypt(sk, f) % n
        return int(v)

    rows = []
    for i in range(table.n_rows):
        row = []
        for attr in table.schema.attributes:
            row.append([mono(m) for m in table.columns[attr.name][i]])
        rows.append(row)
    bits = [mono(m) for m in table.indicator]
    return rows, bits


def cross_domain(left, right):
    """Domain of a cross-product attribute: row-major pairs of the two domains."""
    return tuple(itertools.product(left.domain, right.domain))

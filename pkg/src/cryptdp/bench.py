"""Experiment harness: synthetic data, end-to-end runs, baselines and sweeps."""
from __future__ import annotations

import json
import math
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import plaintext
from .dp import NoiseSpec, isotonic_cdf, sample_discrete_laplace
from .encoding import Attribute, Schema, ingest_rows, read_csv
from .engine.parties import UNSAFE_ENV, AnalyticsServer, noise_off_allowed
from .engine.program import Program, compute_sensitivity, execute
from .engine.session import deploy
from .engine.transport import Channel, TcpTransport
from .errors import BudgetExhausted, ConfigurationError, UnsupportedQuery
from .lhe import KeyPair, PrivateKey, PublicKey, keygen, make_rng
from .operators import Predicate, range_indices
from .optimize import (
    RangeTree,
    build_dp_index,
    build_range_tree,
    range_tree_query,
    restrict,
    tree_height,
)
from .programs import expand

# Synthetic Adult-like data ---------------------------------------------------

COUNTRIES = (
    "United-States", "Mexico", "Philippines", "Germany", "Canada", "Puerto-Rico",
    "El-Salvador", "India", "Cuba", "England", "Jamaica", "South", "China", "Italy",
    "Dominican-Republic", "Vietnam", "Guatemala", "Japan", "Poland", "Columbia",
    "Taiwan", "Haiti", "Iran", "Portugal", "Nicaragua", "Peru", "Greece", "France",
    "Ecuador", "Ireland", "Hong", "Cambodia", "Trinadad&Tobago", "Laos", "Thailand",
    "Yugoslavia", "Outlying-US", "Honduras", "Hungary", "Scotland",
)
RACES = ("White", "Black", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other")

ADULT_SCHEMA = Schema((
    Attribute("Age", tuple(range(1, 101))),
    Attribute("Gender", ("Male", "Female")),
    Attribute("NativeCountry", COUNTRIES),
    Attribute("Race", RACES),
))

_COUNTRY_P = np.array([0.895, 0.02] + [0.085 / 38] * 38)
_RACE_P = np.array([0.854, 0.096, 0.032, 0.01, 0.008])


def synthetic_adult(n, seed=None, schema=ADULT_SCHEMA):
    """``n`` rows resembling the Adult census extract, as tuples in schema order.

    Only the attributes present in ``schema`` are emitted.
    """
    rng = np.random.default_rng(seed)
    age = np.clip(np.rint(rng.normal(38.6, 13.6, n)), 17, 90).astype(int)
    if "Age" in schema and schema["Age"].domain != ADULT_SCHEMA["Age"].domain:
        # A custom Age domain gets uniform draws over its own values.
        domain = schema["Age"].domain
        age = [domain[i] for i in rng.integers(0, len(domain), n)]
    gender = np.where(rng.random(n) < 0.67, "Male", "Female")
    country = rng.choice(len(COUNTRIES), n, p=_COUNTRY_P / _COUNTRY_P.sum())
    race = rng.choice(len(RACES), n, p=_RACE_P)
    full = {
        "Age": [a if not isinstance(a, np.integer) else int(a) for a in age],
        "Gender": [str(g) for g in gender],
        "NativeCountry": [COUNTRIES[c] for c in country],
        "Race": [RACES[r] for r in race],
    }
    return [tuple(full[name][i] for name in schema.names) for i in range(n)]


def replicate(rows, n):
    """Grow (or cut) ``rows`` to ``n`` rows by cycling over them."""
    if not rows:
        raise ConfigurationError("cannot replicate an empty dataset")
    return [rows[i % len(rows)] for i in range(n)]


# Metrics ---------------------------------------------------------------------

def error_metric(truth, result):
    """Absolute error for scalars, L1 for vectors, missed indices for top-k sets."""
    if isinstance(truth, (set, frozenset)):
        return float(len(set(truth) - set(result)))
    if isinstance(truth, (list, tuple)):
        if len(truth) != len(result):
            raise ValueError("result and truth differ in length")
        return float(sum(abs(float(t) - float(r)) for t, r in zip(truth, result)))
    return abs(float(truth) - float(result))


def _jsonable(x):
    if isinstance(x, (set, frozenset)):
        return sorted(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


@dataclass
class MetricsReport:
    program_id: str
    mechanism: str
    epsilon: float
    n_rows: int
    truth: object
    results: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    refusals: int = 0
    timings: dict = field(default_factory=dict)
    ledger_entries: int = 0

    def add(self, result):
        self.results.append(result)
        self.errors.append(error_metric(self.truth, result))

    @property
    def mean_error(self):
        return float(np.mean(self.errors)) if self.errors else math.nan

    @property
    def std_error(self):
        return float(np.std(self.errors)) if self.errors else math.nan

    def to_json(self):
        out = asdict(self)
        out["truth"] = _jsonable(self.truth)
        out["results"] = [_jsonable(r) for r in self.results]
        out["mean_error"] = self.mean_error
        out["std_error"] = self.std_error
        return out

    def json_lines(self):
        """One line per repetition followed by a summary line."""
        lines = []
        for i, (r, e) in enumerate(zip(self.results, self.errors)):
            lines.append(json.dumps({
                "record": "repetition", "program": self.program_id, "mechanism": self.mechanism,
                "rep": i, "result": _jsonable(r), "error": e,
                "as_seconds": _at(self.timings.get("as_seconds"), i),
                "csp_seconds": _at(self.timings.get("csp_seconds"), i),
            }))
        summary = self.to_json()
        summary.pop("results")
        summary.pop("errors")
        summary["record"] = "summary"
        lines.append(json.dumps(summary, default=str))
        return lines


def _at(seq, i):
    return seq[i] if seq and i < len(seq) else None


# Configuration ---------------------------------------------------------------

@dataclass
class RunConfig:
    """Everything one ``run`` needs.

    ``program`` is a template id (``p1`` .. ``p7``) or a path to a program
    JSON file. Without ``data_path`` a synthetic dataset of ``rows`` rows is
    generated from ``seed``.
    """

    program: str = "P5"
    epsilon: float = 1.0
    budget: float = 10.0
    data_path: str | None = None
    schema_path: str | None = None
    rows: int = 1000
    transport: str = "inproc"
    key_bits: int = 2048
    key_path: str | None = None
    seed: int | None = None
    reps: int = 1
    noise_off: bool = False
    ledger_path: str | None = None
    output_path: str | None = None
    pool_size: int = 0
    index_attr: str | None = None
    index_bins: int = 10
    index_rho: float = 0.2
    index_neighbors: int = 0
    range_tree_attr: str | None = None
    range_tree_eps: float | None = None
    program_params: dict = field(default_factory=dict)

    def validate(self):
        if self.reps < 1:
            raise ConfigurationError("repetitions must be at least 1")
        if self.epsilon <= 0 or self.budget <= 0:
            raise ConfigurationError("epsilon and budget must be positive")
        if self.epsilon > self.budget:
            raise ConfigurationError("program epsilon exceeds the total budget")
        if self.transport not in ("inproc", "tcp"):
            raise ConfigurationError(f"unknown transport {self.transport!r}")
        if self.noise_off and not noise_off_allowed():
            raise ConfigurationError(f"turning noise off requires {UNSAFE_ENV}=1")
        if self.index_attr and not 0 < self.index_rho < 1:
            raise ConfigurationError("index rho must lie strictly between 0 and 1")


def load_dataset(config):
    if config.data_path:
        if not config.schema_path:
            raise ConfigurationError("a CSV dataset needs --schema")
        schema = Schema.load(config.schema_path)
        return schema, read_csv(config.data_path, schema)
    schema = Schema.load(config.schema_path) if config.schema_path else ADULT_SCHEMA
    return schema, synthetic_adult(config.rows, config.seed, schema)


def load_program(spec, schema, epsilon, **params):
    """A template id or the path of a program JSON file."""
    if os.path.exists(str(spec)):
        with open(spec, encoding="utf-8") as fh:
            return Program.loads(fh.read())
    return expand(spec, schema, epsilon, **params)


def save_keypair(keypair, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"public": keypair.pk.to_json(), "secret": keypair.sk.to_json()}, fh)


def load_keypair(path):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    pk = PublicKey.from_json(data["public"])
    sk = PrivateKey.from_json(data["secret"]) if "secret" in data else None
    return KeyPair(pk, sk)


# CSP process for the TCP transport -------------------------------------------

def spawn_csp(key_path, budget, ledger_path=None, noise_off=False, pool_size=0, seed=None):
    """Start ``python -m cryptdp csp`` and return ``(process, port)``."""
    cmd = [sys.executable, "-m", "cryptdp", "csp", "--key", key_path, "--eps-budget", str(budget), "--port", "0"]
    if ledger_path:
        cmd += ["--ledger", ledger_path]
    if noise_off:
        cmd.append("--noise-off")
    if pool_size:
        cmd += ["--pool-size", str(pool_size)]
    if seed is not None:
        cmd += ["--seed", str(seed)]
    proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, text=True)
    line = proc.stdout.readline().strip()
    if not line.startswith("PORT "):
        proc.kill()
        raise ConfigurationError(f"CSP process failed to start: {line!r}")
    return proc, int(line.split()[1])


class _RemoteSession:
    """AS side of a deployment whose CSP runs in another process."""

    def __init__(self, keypair, config, key_path):
        self.proc, port = spawn_csp(key_path, config.budget, config.ledger_path,
                                    config.noise_off, config.pool_size,
                                    None if config.seed is None else config.seed + 1)
        self.channel = Channel(TcpTransport("127.0.0.1", port))
        seed = config.seed
        self.server = AnalyticsServer(
            keypair.pk, self.channel, make_rng(seed), np.random.default_rng(seed),
            unsafe_disable_noise=config.noise_off,
        )
        self.csp = None

    @property
    def transcript(self):
        return self.channel.transcript

    def close(self):
        self.channel.close()
        self.proc.terminate()
        self.proc.wait(timeout=10)


def _csp_busy(session):
    if session.csp is not None:
        return session.csp.busy_seconds
    return float(session.server.ledger_query()["csp_busy_seconds"])


# Optimized execution paths ---------------------------------------------------

def _tree_ranges(program, attr, schema):
    """``[(lo, hi)]`` domain-index ranges if every query is a plain range count on ``attr``."""
    ranges = []
    for q in program.queries:
        ops_ = [s.op for s in q.steps]
        filters = [s for s in q.steps if s.op == "filter"]
        if ops_[-2:] != ["count", "laplace"] or len(filters) != 1:
            return None
        if any(op not in ("project", "filter", "count", "laplace") for op in ops_):
            return None
        where = filters[0].args["where"]
        if list(where) != [attr] or not isinstance(where[attr], dict):
            return None
        ranges.append(range_indices(schema[attr], *where[attr]["between"]))
    return ranges


def _index_range(program, attr, schema):
    """Domain-index span selected on ``attr`` by the program's filters, if any."""
    plan = program.plan
    if any(s.op in ("group_by_count_encoded", "cross_product") for s in plan):
        return None
    for s in plan:
        if s.op == "filter" and attr in s.args["where"]:
            pred = Predicate.from_values(schema, {attr: s.args["where"][attr]})
            idx = pred.terms[0][1]
            if idx:
                return min(idx), max(idx)
    return None


def _answer_from_tree(tree, ranges, program, n_rows):
    raw = [range_tree_query(tree, lo, hi) if lo <= hi else 0 for lo, hi in ranges]
    if program.post == "cdf-isotonic":
        return isotonic_cdf(raw, n_rows).tolist()
    return raw[0] if len(raw) == 1 else raw


# Runs ------------------------------------------------------------------------

def run(config):
    """Setup, data collection and program execution, repeated ``config.reps`` times.

    Returns:
        A :class:`MetricsReport`; refused repetitions are counted in
        ``refusals`` and contribute no error value.
    """
    config.validate()
    timings = {}
    t0 = time.perf_counter()
    rng = make_rng(config.seed)
    tmpdir = None
    if config.key_path and os.path.exists(config.key_path):
        keypair = load_keypair(config.key_path)
        key_path = config.key_path
    else:
        keypair = keygen(config.key_bits, rng)
        key_path = config.key_path
        if config.transport == "tcp" and key_path is None:
            tmpdir = tempfile.TemporaryDirectory()
            key_path = os.path.join(tmpdir.name, "keys.json")
        if key_path:
            save_keypair(keypair, key_path)
    if config.transport == "tcp":
        session = _RemoteSession(keypair, config, key_path)
    else:
        session = deploy(keypair, config.budget, "inproc", config.seed, config.noise_off,
                         config.ledger_path, config.pool_size)
    server = session.server
    timings["setup_seconds"] = time.perf_counter() - t0
    try:
        schema, rows = load_dataset(config)
        t1 = time.perf_counter()
        table = ingest_rows(rows, schema, keypair.pk, server.keys, rng)
        timings["ingest_seconds"] = time.perf_counter() - t1
        plain = plaintext.PlainTable.from_rows(schema, rows)

        program_eps = config.epsilon * (1 - config.index_rho) if config.index_attr else config.epsilon
        program = load_program(config.program, schema, program_eps, **config.program_params)
        truth = plaintext.run_program(program, plain)
        report = MetricsReport(program.id, "cryptdp", config.epsilon, len(rows), truth)

        t2 = time.perf_counter()
        tree, ranges, target = None, None, table
        if config.range_tree_attr:
            ranges = _tree_ranges(program, config.range_tree_attr, schema)
            if ranges is not None:
                with server.program(f"{program.id}-tree", "range tree build"):
                    tree = build_range_tree(server, table, config.range_tree_attr,
                                            config.range_tree_eps or config.epsilon)
        if config.index_attr:
            span = _index_range(program, config.index_attr, schema)
            if span is not None:
                with server.program(f"{program.id}-index", "dp index build"):
                    index = build_dp_index(server, table, config.index_attr, config.index_bins,
                                           config.index_rho, config.epsilon, config.index_neighbors)
                target = restrict(index, *span)
        timings["optimize_seconds"] = time.perf_counter() - t2
        timings["rows_processed"] = target.n_rows

        as_times, csp_times = [], []
        for _ in range(config.reps):
            busy0 = _csp_busy(session)
            start = time.perf_counter()
            try:
                if tree is not None:
                    result = _answer_from_tree(tree, ranges, program, len(rows))
                else:
                    result = execute(program, target, server).value
            except BudgetExhausted:
                report.refusals += 1
                continue
            total = time.perf_counter() - start
            csp = _csp_busy(session) - busy0
            as_times.append(total - csp)
            csp_times.append(csp)
            report.add(result)
        timings["as_seconds"] = as_times
        timings["csp_seconds"] = csp_times
        report.timings = timings
        report.ledger_entries = len(server.ledger_query()["ledger"]["entries"])
    finally:
        session.close()
        if tmpdir is not None:
            tmpdir.cleanup()
    if config.output_path:
        with open(config.output_path, "a", encoding="utf-8") as fh:
            for line in report.json_lines():
                fh.write(line + "\n")
    return report


def _plain_tree(hist, attr, epsilon, rng):
    """Central-DP range tree with one noise draw per node."""
    size = len(hist)
    height = tree_height(size)
    padded = 1 << height
    b = NoiseSpec.for_query(epsilon, height).scale
    level = list(hist) + [0] * (padded - size)
    levels = []
    for _ in range(height):
        levels.append((np.asarray(level) + sample_discrete_laplace(b, rng, len(level))).tolist())
        level = [level[i] + level[i + 1] for i in range(0, len(level), 2)]
    levels.append([sum(hist)])
    return RangeTree(attr, size, padded, epsilon, height, levels)


def baseline_cdp(table, program, epsilon=None, reps=1, seed=None, range_tree_attr="Age"):
    """Trusted-curator baseline: exact answers plus one discrete Laplace draw.

    Programs made only of range counts on ``range_tree_attr`` (such as the
    c.d.f. template) are answered from a noisy range tree instead, built
    with the program's whole epsilon.

    Args:
        table: :class:`~cryptdp.plaintext.PlainTable`.
        program: The program; its own epsilons are used unless ``epsilon``
            rescales the total.
        reps: Repetitions.
        seed: Seed for the noise generator.
    """
    rng = np.random.default_rng(seed)
    if epsilon is not None and not math.isclose(epsilon, program.epsilon):
        factor = epsilon / program.epsilon
        program = Program(program.id, program.description,
                          tuple(type(q)(q.steps, q.epsilon * factor) for q in program.queries), program.post)
    truth = plaintext.run_program(program, table)
    report = MetricsReport(program.id, "cdp", program.epsilon, table.n_rows, truth)
    ranges = _tree_ranges(program, range_tree_attr, table.schema) if range_tree_attr in table.schema else None
    for _ in range(reps):
        if ranges is not None:
            hist = plaintext.group_by_count(table, range_tree_attr)
            tree = _plain_tree(hist, range_tree_attr, program.epsilon, rng)
            report.add(_answer_from_tree(tree, ranges, program, table.n_rows))
        else:
            report.add(plaintext.run_program(program, table, rng))
    return report


def _frequency_target(program, schema):
    """``(attr, [(kind, selected indices)])`` if every query is a frequency query on one attribute."""
    attr = None
    targets = []
    for q in program.queries:
        steps = list(q.steps)
        ops_ = [s.op for s in steps]
        filters = [s for s in steps if s.op == "filter"]
        if any(op not in ("project", "filter", "count", "group_by_count", "laplace", "noisy_max") for op in ops_):
            raise UnsupportedQuery("local DP baseline covers single-attribute frequency queries only")
        if "group_by_count" in ops_:
            if filters:
                raise UnsupportedQuery("local DP baseline does not support filtered histograms")
            a = next(s.args["attr"] for s in steps if s.op == "group_by_count")
            kind, sel = ("noisy_max", int(steps[-1].args.get("k", 1))) if ops_[-1] == "noisy_max" else ("histogram", None)
        else:
            if len(filters) != 1 or len(filters[0].args["where"]) != 1:
                raise UnsupportedQuery("local DP baseline needs a count over one attribute condition")
            a = next(iter(filters[0].args["where"]))
            pred = Predicate.from_values(schema, filters[0].args["where"])
            kind, sel = "count", sorted(pred.terms[0][1])
        if attr is not None and a != attr:
            raise UnsupportedQuery("all queries must concern the same attribute")
        attr = a
        targets.append((kind, sel))
    return attr, targets


def krr_estimate(values, d, epsilon, rng):
    """Unbiased frequency estimates from k-ary randomized response.

    Each value in ``values`` (indices in ``0..d-1``) is kept with probability
    ``p = e^eps / (e^eps + d - 1)`` and otherwise replaced by one of the
    other ``d - 1`` values uniformly.
    """
    values = np.asarray(values, dtype=np.int64)
    n = len(values)
    if d < 2:
        return np.array([float(n)])
    p = math.exp(epsilon) / (math.exp(epsilon) + d - 1) if epsilon < 700 else 1.0
    q = (1 - p) / (d - 1)
    keep = rng.random(n) < p
    other = rng.integers(0, d - 1, n)
    other = other + (other >= values)
    reported = np.where(keep, values, other)
    observed = np.bincount(reported, minlength=d).astype(float)
    return (observed - n * q) / (p - q)


def baseline_ldp(table, program, epsilon=None, reps=1, seed=None):
    """Local-DP baseline: every row reports its value once through k-ary randomized response.

    All queries of the program must be frequency queries on one attribute;
    they are answered from the same set of reports, which spend the whole
    program epsilon.

    Raises:
        UnsupportedQuery: for anything other than frequency queries.
    """
    rng = np.random.default_rng(seed)
    epsilon = program.epsilon if epsilon is None else epsilon
    attr, targets = _frequency_target(program, table.schema)
    truth = plaintext.run_program(program, table)
    report = MetricsReport(program.id, "ldp", epsilon, table.n_rows, truth)
    values = [r[attr] for r in table.rows]
    d = table.schema.size(attr)
    for _ in range(reps):
        est = krr_estimate(values, d, epsilon, rng)
        raw = []
        for kind, sel in targets:
            if kind == "count":
                raw.append(float(est[sel].sum()) if sel else 0.0)
            elif kind == "histogram":
                raw.append(est.tolist())
            else:
                raw.append(plaintext.top_k(est.tolist(), sel))
        if program.post == "cdf-isotonic":
            report.add(isotonic_cdf(raw, table.n_rows).tolist())
        else:
            report.add(raw[0] if len(raw) == 1 else raw)
    return report


def scale_sweep(config, sizes, program_ids=("P1", "P3", "P5", "P7"), schema=ADULT_SCHEMA):
    """Time each program on synthetic datasets of the given sizes.

    Rows are copies of one base sample so only the size changes. ``P1`` is
    answered from a range tree on ``Age``; both the build and the query
    time are reported.

    Returns:
        A list of ``{"size", "program", ...}`` dictionaries.
    """
    config.validate()
    rng = make_rng(config.seed)
    keypair = keygen(config.key_bits, rng)
    base = synthetic_adult(min(sizes), config.seed, schema)
    out = []
    for size in sizes:
        rows = replicate(base, size)
        budget = config.epsilon * (len(program_ids) + 1)
        with deploy(keypair, budget, config.transport, config.seed, config.noise_off) as dep:
            server = dep.server
            t = time.perf_counter()
            table = ingest_rows(rows, schema, keypair.pk, server.keys, rng)
            ingest = time.perf_counter() - t
            for pid in program_ids:
                program = expand(pid, schema, config.epsilon)
                mark = len(dep.transcript)
                busy0 = dep.csp.busy_seconds
                t = time.perf_counter()
                record = {"size": size, "program": pid, "ingest_seconds": ingest}
                if pid == "P1":
                    tree = build_range_tree(server, table, "Age", config.epsilon)
                    record["build_seconds"] = time.perf_counter() - t
                    ranges = _tree_ranges(program, "Age", schema)
                    tq = time.perf_counter()
                    _answer_from_tree(tree, ranges, program, size)
                    record["query_seconds"] = time.perf_counter() - tq
                else:
                    execute(program, table, server)
                total = time.perf_counter() - t
                csp = dep.csp.busy_seconds - busy0
                record.update({
                    "seconds": total,
                    "as_seconds": total - csp,
                    "csp_seconds": csp,
                    "messages": dict(dep.transcript.counts(mark)),
                    "sensitivity": compute_sensitivity(program.plan),
                })
                out.append(record)
    if config.output_path:
        with open(config.output_path, "a", encoding="utf-8") as fh:
            for rec in out:
                fh.write(json.dumps({"record": "sweep", **rec}) + "\n")
    return out


def ledger_summary(path):
    """Entries and total spend of a ledger file, for display."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(json.loads(line))
    spent = next((e["cumulative"] for e in reversed(entries) if e["kind"] == "spend"), "0")
    return {"spent": spent, "entries": entries}

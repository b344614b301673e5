"""Optimizations: DP index, noisy range tree, cross-product cache, offline pool."""
from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .dp import isotonic_cdf
from .errors import PlanError, PoolExhausted
from .labhe import MultCiphertext, lab_trivial
from .operators import EncVector, _relabel, group_by_count, laplace


# Offline pool ---------------------------------------------------------------

class OfflinePool:
    """Queues of fresh labeled encryptions of 0 and of 1, produced ahead of time.

    Args:
        fresh: ``fresh(m) -> LabCiphertext`` producing a new encryption of ``m``.
        refill: When a queue is empty, encrypt on demand instead of raising.
    """

    def __init__(self, fresh, refill=True):
        self._fresh = fresh
        self.refill = refill
        self._queues = {0: deque(), 1: deque()}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = None
        self.on_demand = 0

    def __len__(self):
        return len(self._queues[0]) + len(self._queues[1])

    def size(self, tag):
        return len(self._queues[tag])

    def fill(self, zeros=0, ones=0):
        for tag, count in ((0, zeros), (1, ones)):
            for _ in range(count):
                c = self._fresh(tag)
                with self._lock:
                    self._queues[tag].append(c)

    def draw(self, tag):
        """A fresh ciphertext of ``tag``; each ciphertext is handed out once."""
        if tag not in (0, 1):
            raise ValueError("pool tags are 0 and 1")
        with self._lock:
            if self._queues[tag]:
                return self._queues[tag].popleft()
        if not self.refill:
            raise PoolExhausted(f"no precomputed encryptions of {tag} left")
        self.on_demand += 1
        return self._fresh(tag)

    def start_background(self, target, interval=0.01):
        """Keep both queues topped up to ``target`` from a daemon thread."""
        if self._thread is not None:
            return

        def loop():
            while not self._stop.is_set():
                low = [t for t in (0, 1) if self.size(t) < target]
                if not low:
                    self._stop.wait(interval)
                    continue
                for t in low:
                    self.fill(**{("zeros" if t == 0 else "ones"): 1})

        self._stop.clear()
        self._thread = threading.Thread(target=loop, name="offline-pool", daemon=True)
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None


def pool_draw(pool, tag):
    return pool.draw(tag)


# Cross-product cache ---------------------------------------------------------

class PrecomputeCache:
    """Relabeled cross-product columns keyed by row set and attribute pair."""

    def __init__(self):
        self._entries = {}

    def __len__(self):
        return len(self._entries)

    def lookup(self, table, attrs):
        return self._entries.get((table.source, tuple(attrs)))

    def store(self, table, attrs, column):
        self._entries[(table.source, tuple(attrs))] = column


def precompute_cross(server, table, attrs, cache):
    """Materialize the cross product of two attributes ahead of any program.

    Every cell becomes a single relabeled ciphertext, so later programs that
    multiply it by ``B`` stay within one local multiplication.
    """
    left, right = attrs
    if left not in table.schema or right not in table.schema:
        raise PlanError(f"attributes {attrs} not present")
    lcol, rcol = table.columns[left], table.columns[right]
    monomials = [lm + rm for lrow, rrow in zip(lcol, rcol) for lm in lrow for rm in rrow]
    cells = _relabel(server, monomials)
    width = table.schema.size(left) * table.schema.size(right)
    column = [[(c,) for c in cells[i * width:(i + 1) * width]] for i in range(table.n_rows)]
    cache.store(table, (left, right), column)
    return column


# DP index --------------------------------------------------------------------

def bin_edges(size, k):
    """Equi-width bins over domain indices; the remainder goes to the last bin."""
    if not 1 <= k <= size:
        raise PlanError(f"bin count must lie in [1, {size}]; got {k}")
    width = size // k
    return [(b * width, size if b == k - 1 else (b + 1) * width) for b in range(k)]


@dataclass(frozen=True)
class RowRange:
    """Half-open, 0-based row interval ``[start, stop)`` of the sorted table."""

    start: int
    stop: int

    def one_based(self):
        """The same rows as an inclusive 1-based interval."""
        return self.start + 1, self.stop

    def __len__(self):
        return max(0, self.stop - self.start)


@dataclass
class DPIndex:
    attribute: str
    bins: int
    rho: float
    epsilon: float
    table: object
    prefix: list
    edges: list
    neighbors: int = 0

    @property
    def n_rows(self):
        return self.table.n_rows

    def bin_of(self, value_index):
        for b, (lo, hi) in enumerate(self.edges):
            if lo <= value_index < hi:
                return b
        raise PlanError(f"value index {value_index} outside the indexed domain")


def build_dp_index(server, table, attr, k=10, rho=0.2, epsilon_total=2.2, neighbors=0, presorted=None):
    """Sort the table obliviously on ``attr`` and publish noisy bin prefix counts.

    Spends ``rho * epsilon_total`` on one vector measurement of the ``k``
    prefix counts; a single row moves at most ``k`` of them, so the
    sensitivity is ``k``.

    Args:
        presorted: The sorted table of an earlier build on the same rows and
            attribute. The sort spends no budget and does not depend on the
            noise, so a rebuild may skip it.
    """
    if not 0 < rho < 1:
        raise PlanError("rho must lie strictly between 0 and 1")
    if attr not in table.schema:
        raise PlanError(f"unknown attribute {attr!r}")
    edges = bin_edges(table.schema.size(attr), k)
    eps_a = rho * epsilon_total
    ordered = presorted if presorted is not None else server.oblivious_sort(table, attr)
    hist = group_by_count(server, ordered, attr)
    pk = server.pk
    prefix = []
    acc = []
    for lo, hi in edges:
        acc.extend(hist.elements[lo:hi])
        prefix.append(MultCiphertext.total(acc, pk))
    vector = EncVector(prefix, "histogram", tuple(range(k)), table.n_rows)
    noisy = laplace(server, vector, eps_a, k)
    fitted = np.rint(isotonic_cdf(noisy, table.n_rows)).astype(int).tolist()
    return DPIndex(attr, k, rho, eps_a, ordered, fitted, edges, neighbors)


def index_lookup(index, lo, hi):
    """Rows of the sorted table that may hold values in ``[lo, hi]`` (domain indices).

    The interval runs from the end of the bin before ``lo``'s bin to the
    end of ``hi``'s bin, both widened by ``index.neighbors`` bins; the first
    bin starts at row 0 and the last ends at the row count.
    """
    if lo > hi:
        raise PlanError("range start exceeds range end")
    i, j = index.bin_of(lo), index.bin_of(hi)
    q = index.neighbors
    n = index.n_rows
    start = 0 if i - q <= 0 else index.prefix[i - 1 - q]
    stop = n if j + q >= index.bins - 1 else index.prefix[j + q]
    start = min(max(start, 0), n)
    stop = min(max(stop, start), n)
    return RowRange(int(start), int(stop))


def restrict(index, lo, hi):
    """The sub-table selected by :func:`index_lookup`."""
    r = index_lookup(index, lo, hi)
    return index.table.rows(r.start, r.stop)


# Range tree -----------------------------------------------------------------

@dataclass
class RangeTree:
    """Noisy counts for every dyadic span of a power-of-two padded domain.

    ``levels[h][i]`` is the count over leaves ``[i * 2**h, (i + 1) * 2**h)``;
    the root is the public row count.
    """

    attribute: str
    domain_size: int
    padded_size: int
    epsilon: float
    sensitivity: int
    levels: list = field(default_factory=list)

    @property
    def node_count(self):
        return sum(len(level) for level in self.levels)


def tree_height(size):
    return max(1, math.ceil(math.log2(size)))


def dyadic_decomposition(lo, hi, padded_size):
    """Canonical cover of ``[lo, hi]`` (inclusive leaf indices) by tree nodes ``(level, index)``."""
    if not 0 <= lo <= hi < padded_size:
        raise PlanError("range outside the tree")
    nodes = []
    level = 0
    lo_i, hi_i = lo, hi + 1  # half-open at the current level
    while lo_i < hi_i:
        if lo_i & 1:
            nodes.append((level, lo_i))
            lo_i += 1
        if hi_i & 1:
            hi_i -= 1
            nodes.append((level, hi_i))
        lo_i >>= 1
        hi_i >>= 1
        level += 1
    return sorted(nodes, key=lambda x: (x[1] << x[0], x[0]))


def build_range_tree(server, table, attr, epsilon):
    """Measure every non-root node of the range tree in one Laplace call."""
    size = table.schema.size(attr)
    if size < 2:
        raise PlanError("a range tree needs a domain of at least two values")
    height = tree_height(size)
    padded = 1 << height
    hist = group_by_count(server, table, attr)
    pk = server.pk
    zero = MultCiphertext.lift(lab_trivial(pk, 0))
    level = [MultCiphertext.lift(x) if not isinstance(x, MultCiphertext) else x for x in hist.elements]
    level += [zero] * (padded - size)
    encrypted = []
    for _ in range(height):
        encrypted.append(level)
        level = [MultCiphertext.total(level[i:i + 2], pk) for i in range(0, len(level), 2)]
    flat = [x for lvl in encrypted for x in lvl]
    noisy = laplace(server, EncVector(flat, "histogram", (), table.n_rows), epsilon, height)
    levels = []
    pos = 0
    for lvl in encrypted:
        levels.append(noisy[pos:pos + len(lvl)])
        pos += len(lvl)
    levels.append([table.n_rows])
    return RangeTree(attr, size, padded, epsilon, height, levels)


def range_tree_query(tree, lo, hi):
    """Noisy count of values with index in ``[lo, hi]``; spends no budget."""
    if not 0 <= lo <= hi < tree.domain_size:
        raise PlanError("range outside the attribute domain")
    if hi == tree.domain_size - 1:
        hi = tree.padded_size - 1  # padding holds no rows
    return sum(tree.levels[h][i] for h, i in dyadic_decomposition(lo, hi, tree.padded_size))

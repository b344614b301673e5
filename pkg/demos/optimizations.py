"""Range trees and DP indexes: pay budget once, then answer or prune cheaply.

A range tree measures every dyadic span of a domain in one request, after
which any range count is post-processing. A DP index publishes noisy bin
boundaries of an obliviously sorted table so later programs only touch the
rows that can match. With only a few hundred rows the index needs a larger
epsilon than usual to be useful; widening by one neighbouring bin on each
side trades scanned rows for recall.
"""
import random

from cryptdp import keygen
from cryptdp.encoding import Attribute, Schema, ingest_rows
from cryptdp.engine.session import deploy
from cryptdp.optimize import build_dp_index, build_range_tree, index_lookup, range_tree_query

ROWS = 400


def main():
    schema = Schema((Attribute("Age", tuple(range(1, 33))),))
    rng = random.Random(5)
    rows = [(min(32, max(1, round(rng.gauss(16, 6)))),) for _ in range(ROWS)]
    ages = sorted(r[0] for r in rows)
    keypair = keygen(512, random.Random(5))

    with deploy(keypair, budget=12, seed=5) as dep:
        table = ingest_rows(rows, schema, keypair.pk, dep.server.keys, random.Random(5))

        tree = build_range_tree(dep.server, table, "Age", epsilon=1.0)
        print(f"range tree over {tree.domain_size} ages: {tree.node_count} nodes, one ledger entry")
        for lo, hi in ((1, 10), (11, 20), (15, 16), (1, 32)):
            exact = sum(lo <= a <= hi for a in ages)
            noisy = range_tree_query(tree, lo - 1, hi - 1)
            print(f"  ages {lo:2d}-{hi:2d}: noisy {noisy:4d}  exact {exact:4d}")
        print(f"  ledger entries after the queries: {len(dep.ledger.entries)}")

        index = build_dp_index(dep.server, table, "Age", k=8, rho=0.2, epsilon_total=10, neighbors=1)
        print(f"\nDP index with {index.bins} bins, noisy prefix counts {index.prefix}")
        for lo, hi in ((5, 8), (13, 16), (25, 32)):
            r = index_lookup(index, lo - 1, hi - 1)
            matching = sum(lo <= a <= hi for a in ages)
            covered = sum(r.start <= i < r.stop for i, a in enumerate(ages) if lo <= a <= hi)
            print(f"  ages {lo:2d}-{hi:2d}: scan rows {r.start}..{r.stop} ({len(r)} of {ROWS}), "
                  f"covering {covered} of {matching} matches")
        print(f"\nbudget spent {float(dep.ledger.spent):g} of {float(dep.ledger.budget):g}")


if __name__ == "__main__":
    main()

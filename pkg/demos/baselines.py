"""Compare the encrypted pipeline with a trusted curator and with local randomized response.

The same single count is answered three ways at the same epsilon. The
encrypted pipeline pays for two noise draws (one per server), so its error
sits at about 1.5 times the curator's; randomized response pays for
perturbing every row.
"""
import random

import numpy as np

from cryptdp import keygen
from cryptdp import operators as ops
from cryptdp import plaintext
from cryptdp.bench import baseline_cdp, baseline_ldp
from cryptdp.encoding import Attribute, Schema, ingest_rows
from cryptdp.engine.program import Program, Query, Step
from cryptdp.engine.session import deploy

ROWS = 5000
EPSILON = 0.2
TRIALS = 200


def main():
    schema = Schema((Attribute("Gender", ("Male", "Female")),))
    rng = random.Random(3)
    rows = [(rng.choice(("Male", "Female")),) for _ in range(ROWS)]
    where = {"Gender": ["Female"]}
    program = Program("females", "count of female rows", (
        Query((Step("filter", {"where": where}), Step("count"), Step("laplace")), EPSILON),))
    truth = sum(r[0] == "Female" for r in rows)

    keypair = keygen(512, random.Random(3))
    with deploy(keypair, budget=EPSILON * TRIALS, seed=3) as dep:
        table = ingest_rows(rows, schema, keypair.pk, dep.server.keys, random.Random(3))
        counted = ops.count(dep.server, ops.filter_rows(dep.server, table, ops.Predicate.from_values(schema, where)))
        answers = np.array([ops.laplace(dep.server, counted, EPSILON, 1)[0] for _ in range(TRIALS)])
    encrypted = float(np.abs(answers - truth).mean())

    plain = plaintext.PlainTable.from_rows(schema, rows)
    cdp = baseline_cdp(plain, program, reps=TRIALS, seed=3).mean_error
    ldp = baseline_ldp(plain, program, reps=TRIALS, seed=3).mean_error

    print(f"true count {truth} of {ROWS}, epsilon {EPSILON}, {TRIALS} trials (mean absolute error)")
    print(f"  trusted curator      {cdp:8.1f}")
    print(f"  encrypted pipeline   {encrypted:8.1f}   ({encrypted / cdp:.2f}x the curator)")
    print(f"  randomized response  {ldp:8.1f}   ({ldp / encrypted:.1f}x the encrypted pipeline)")


if __name__ == "__main__":
    main()

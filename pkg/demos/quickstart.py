"""Walk through one deployment: keys, encrypted ingestion, the seven templates, the ledger.

Run with ``python3 demos/quickstart.py``. Uses 512-bit keys and a few
hundred synthetic rows so it finishes in well under a minute.
"""
import random

from cryptdp import keygen
from cryptdp.bench import ADULT_SCHEMA, synthetic_adult
from cryptdp.encoding import ingest_rows
from cryptdp.engine.program import classify_program, execute
from cryptdp.engine.session import deploy
from cryptdp.engine.transcript import audit
from cryptdp.programs import DESCRIPTIONS, TEMPLATE_IDS, expand

ROWS = 300
EPSILON = 1.0


def main():
    keypair = keygen(512, random.Random(1))
    rows = synthetic_adult(ROWS, seed=1)
    print(f"{ROWS} synthetic rows over {', '.join(ADULT_SCHEMA.names)}")

    # The analytics server only ever holds ciphertexts; the crypto service
    # provider holds the secret key and the privacy ledger.
    with deploy(keypair, budget=10, seed=1) as dep:
        table = ingest_rows(rows, ADULT_SCHEMA, keypair.pk, dep.server.keys, random.Random(1))
        for tid in TEMPLATE_IDS:
            program = expand(tid, ADULT_SCHEMA, EPSILON)
            result = execute(program, table, dep.server, csp=dep.csp)
            value = result.value
            if tid == "P1":
                value = "c.d.f. at ages 20/40/60/80/100: " + ", ".join(f"{value[i]:.0f}" for i in (19, 39, 59, 79, 99))
            elif isinstance(value, list) and len(value) > 8:
                value = f"[{', '.join(str(v) for v in value[:6])}, ...] ({len(value)} noisy counts)"
            print(f"{tid} {classify_program(program.plan, ADULT_SCHEMA).value:9s} "
                  f"sensitivity={result.sensitivity}  {DESCRIPTIONS[tid]}")
            print(f"    -> {value}   ({dep.transcript.counts(result.transcript_start)})")

        print(f"\nledger: spent {float(dep.ledger.spent):g} of {float(dep.ledger.budget):g}")
        problems = audit(dep.transcript, dep.csp.views)
        print(f"leakage audit over {len(dep.transcript.entries)} messages: {problems or 'clean'}")


if __name__ == "__main__":
    main()

"""Command-line front end.

Verbs: ``keygen``, ``ingest``, ``run``, ``sweep``, ``ledger show`` and the
internal ``csp`` server used by the TCP transport. Results are printed as
JSON lines.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bench
from .encoding import Schema, ingest_rows, read_csv
from .engine.ledger import PrivacyLedger
from .engine.parties import UNSAFE_ENV, CryptoServiceProvider, noise_off_allowed
from .engine.transport import CspTcpServer
from .errors import CryptDPError
from .labhe import local_gen
from .lhe import DEFAULT_KEY_BITS, keygen, make_rng


def _positive_float(text):
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return value


def _sizes(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers") from None


def _add_run_options(p):
    p.add_argument("--eps", type=_positive_float, default=1.0, help="program epsilon")
    p.add_argument("--eps-budget", type=_positive_float, default=10.0, help="total budget enforced by the CSP")
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--key-bits", type=int, default=DEFAULT_KEY_BITS)
    p.add_argument("--key", dest="key_path", help="key file from 'keygen' (generated when absent)")
    p.add_argument("--noise-off", action="store_true",
                   help=f"disable all noise; refused unless {UNSAFE_ENV}=1")
    p.add_argument("--pool-size", type=int, default=0, help="fresh encryptions of 0 and 1 to precompute")
    p.add_argument("--out", dest="output_path", help="append JSON lines here as well")


def build_parser():
    parser = argparse.ArgumentParser(prog="cryptdp", description="Differentially private analytics over encrypted data.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("keygen", help="generate a Paillier key pair")
    p.add_argument("--bits", type=int, default=DEFAULT_KEY_BITS)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="key file (holds the secret key; CSP only)")

    p = sub.add_parser("ingest", help="encrypt a dataset into a table file")
    p.add_argument("--key", required=True)
    p.add_argument("--schema", help="schema file with 'name: v1,v2,...' lines")
    p.add_argument("--data", help="CSV file; omitted means synthetic rows")
    p.add_argument("--rows", type=int, default=1000, help="synthetic row count")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="run a program and report its error")
    p.add_argument("--program", required=True, help="p1..p7 or a program JSON file")
    p.add_argument("--data")
    p.add_argument("--schema")
    p.add_argument("--rows", type=int, default=1000)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--ledger", dest="ledger_path")
    p.add_argument("--baseline", choices=("none", "cdp", "ldp"), default="none",
                   help="also report a plaintext baseline")
    p.add_argument("--index-attr")
    p.add_argument("--index-bins", type=int, default=10)
    p.add_argument("--index-rho", type=float, default=0.2)
    p.add_argument("--index-neighbors", type=int, default=0)
    p.add_argument("--range-tree-attr")
    p.add_argument("--range-tree-eps", type=_positive_float)
    _add_run_options(p)

    p = sub.add_parser("sweep", help="time programs over growing synthetic datasets")
    p.add_argument("--sizes", type=_sizes, default=[1000, 2000, 4000])
    p.add_argument("--programs", default="p1,p3,p5,p7")
    _add_run_options(p)

    p = sub.add_parser("ledger", help="inspect a privacy ledger")
    p.add_argument("action", choices=("show",))
    p.add_argument("--ledger", required=True)

    p = sub.add_parser("csp", help="serve as the crypto service provider over TCP")
    p.add_argument("--key", required=True)
    p.add_argument("--eps-budget", type=_positive_float, required=True)
    p.add_argument("--ledger")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--pool-size", type=int, default=0)
    p.add_argument("--noise-off", action="store_true")
    return parser


def _emit(obj, out=None):
    line = obj if isinstance(obj, str) else json.dumps(obj, default=str)
    print(line, flush=True)


def _cmd_keygen(args):
    kp = keygen(args.bits, make_rng(args.seed))
    bench.save_keypair(kp, args.out)
    _emit({"record": "keygen", "bits": kp.pk.bits, "path": args.out})


def _cmd_ingest(args):
    kp = bench.load_keypair(args.key)
    if args.data:
        if not args.schema:
            raise CryptDPError("--data needs --schema")
        schema = Schema.load(args.schema)
        rows = read_csv(args.data, schema)
    else:
        schema = Schema.load(args.schema) if args.schema else bench.ADULT_SCHEMA
        rows = bench.synthetic_adult(args.rows, args.seed, schema)
    rng = make_rng(args.seed)
    table = ingest_rows(rows, schema, kp.pk, local_gen(kp.pk, rng, publish=False), rng)
    table.save(args.out)
    _emit({"record": "ingest", "rows": table.n_rows, "attributes": list(schema.names), "path": args.out})


def _config(args, **extra):
    return bench.RunConfig(
        epsilon=args.eps,
        budget=args.eps_budget,
        transport=args.transport,
        seed=args.seed,
        key_bits=args.key_bits,
        key_path=args.key_path,
        noise_off=args.noise_off,
        pool_size=args.pool_size,
        output_path=args.output_path,
        **extra,
    )


def _cmd_run(args):
    config = _config(
        args,
        program=args.program,
        data_path=args.data,
        schema_path=args.schema,
        rows=args.rows,
        reps=args.reps,
        ledger_path=args.ledger_path,
        index_attr=args.index_attr,
        index_bins=args.index_bins,
        index_rho=args.index_rho,
        index_neighbors=args.index_neighbors,
        range_tree_attr=args.range_tree_attr,
        range_tree_eps=args.range_tree_eps,
    )
    report = bench.run(config)
    for line in report.json_lines():
        _emit(line)
    if args.baseline != "none":
        schema, rows = bench.load_dataset(config)
        plain = bench.plaintext.PlainTable.from_rows(schema, rows)
        program = bench.load_program(args.program, schema, args.eps)
        base = (bench.baseline_cdp if args.baseline == "cdp" else bench.baseline_ldp)(
            plain, program, reps=args.reps, seed=args.seed)
        for line in base.json_lines():
            _emit(line)


def _cmd_sweep(args):
    config = _config(args)
    ids = [p.strip().upper() for p in args.programs.split(",") if p.strip()]
    for rec in bench.scale_sweep(config, args.sizes, ids):
        _emit({"record": "sweep", **rec})


def _cmd_ledger(args):
    _emit({"record": "ledger", **bench.ledger_summary(args.ledger)})


def _cmd_csp(args):
    if args.noise_off and not noise_off_allowed():
        raise CryptDPError(f"turning noise off requires {UNSAFE_ENV}=1")
    kp = bench.load_keypair(args.key)
    if kp.sk is None:
        raise CryptDPError("the CSP needs a key file with the secret key")
    ledger = PrivacyLedger(args.eps_budget, args.ledger)
    csp = CryptoServiceProvider(kp, ledger, make_rng(args.seed), np.random.default_rng(args.seed),
                                unsafe_disable_noise=args.noise_off)
    if args.pool_size:
        csp.pool.fill(zeros=args.pool_size, ones=args.pool_size)
    server = CspTcpServer(csp, args.host, args.port)
    print(f"PORT {server.port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


_COMMANDS = {
    "keygen": _cmd_keygen,
    "ingest": _cmd_ingest,
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "ledger": _cmd_ledger,
    "csp": _cmd_csp,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _COMMANDS[args.verb](args)
    except (CryptDPError, OSError) as exc:
        print(f"cryptdp: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""``fridgesim`` command line.

    fridgesim run --scenario S.json --seed N [--config F] --out DIR
    fridgesim status [--store DIR|URL] [--rules F] [--format text|json] [--now-ms T]
                     [--watch --interval S]
    fridgesim calibrate --out curve.cal [--off-only]
    fridgesim serve --dir DIR [--host H] [--port P] [--config F]
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from fridgesim import calibration, client, harness
from fridgesim.cloud import ChoreoEndpoint, MockStore, QuotaLedger, make_server
from fridgesim.config import STORE_ENV_VAR, load_config


def _cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        events = harness.load_scenario(args.scenario)
        rules = client.load_rules(args.rules)
    except (OSError, ValueError) as exc:
        print(f"fridgesim: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        print(f"fridgesim: output directory {out} is not empty", file=sys.stderr)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    try:
        trace = harness.run(events, args.seed, config, out=out, rules=rules, check=args.check)
    except harness.InvariantViolation as exc:
        for v in exc.violations:
            print(f"invariant violated: {v}", file=sys.stderr)
        return 1
    sys.stdout.write(trace.report)
    return 0


def _cmd_status(args) -> int:
    store = args.store or os.environ.get(STORE_ENV_VAR)
    if not store:
        print(f"fridgesim: no store given (use --store or ${STORE_ENV_VAR})", file=sys.stderr)
        return client.EXIT_NO_DATA
    rules = client.load_rules(args.rules)
    if args.watch:
        try:
            return client.cmd_watch(store, args.interval, rules, fmt=args.format)
        except KeyboardInterrupt:
            return 0
    return client.cmd_status(store, rules, now_ms=args.now_ms, fmt=args.format)


def _cmd_calibrate(args) -> int:
    curve = calibration.fit_curve(calibration.table_samples(include_on_state=not args.off_only))
    calibration.write_curve(curve, args.out)
    print(
        f"gain {curve.gain_counts_per_gram:.4f} counts/g, r^2 {curve.r_squared:.6f}, "
        f"max residual {curve.residual_max_counts:.0f} counts ({curve.uncertainty_grams:.2f} g)"
    )
    return 0


def _cmd_serve(args) -> int:
    config = load_config(args.config)
    ledger = QuotaLedger(limit=config.quota_limit, period=config.quota_period_ms)
    endpoint = ChoreoEndpoint(MockStore(args.dir), config.gateway.credentials, ledger)
    server = make_server(endpoint, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"store listening on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fridgesim", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario end to end")
    p.add_argument("--scenario", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--rules")
    p.add_argument("--out", required=True)
    p.add_argument("--check", action="store_true", help="fail on any broken pipeline invariant")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("status", help="show the newest stored inventory")
    p.add_argument("--store")
    p.add_argument("--rules")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--watch", action="store_true")
    p.add_argument("--interval", type=float, default=5.0)
    p.add_argument("--now-ms", type=int, help="reference time for the age line (default: wall clock)")
    p.set_defaults(func=_cmd_status)

    p = sub.add_parser("calibrate", help="fit the bundled weight tables")
    p.add_argument("--out", required=True)
    p.add_argument("--off-only", action="store_true", help="fit the off-state table only")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("serve", help="run the mock store over HTTP")
    p.add_argument("--dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

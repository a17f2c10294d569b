"""Command-line entry point: ``fedgan-trust simulate | audit | inspect | config``.

Exit codes: 0 success / audit pass, 1 audit fail, 2 usage, config or input
error, 3 training stall.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from . import audit as A
from .contracts import ConfigError, ordinal_of
from .ledger import ContractError, Transaction
from .registry import Fault, SimulationConfig, StallError, quality_config, run_simulation

EXIT_OK, EXIT_AUDIT_FAIL, EXIT_USAGE, EXIT_STALL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="fedgan-trust", description="Federated GAN over a simulated consortium ledger.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="run the protocol and write transcript, shares, datasets, summary")
    s.add_argument("config", nargs="?", help="JSON config (defaults apply when omitted)")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--out", default="run", help="output directory (default: ./run)")
    s.add_argument("--fault", action="append", default=[], metavar="SPEC",
                   help="byzantine-merger:R, tamper-fake-data:R:ITER or forge-record:R[:ITER]")

    a = sub.add_parser("audit", help="reconstruct the key from shares and verify a transcript")
    a.add_argument("transcript")
    a.add_argument("--shares", nargs="+", default=[], metavar="FILE")
    a.add_argument("--out", help="write the JSON report here")
    a.add_argument("--no-replay", action="store_true", help="skip the SGD replay checks")
    a.add_argument("--json", action="store_true", help="print JSON instead of text")

    i = sub.add_parser("inspect", help="print transcript records (ciphertexts shown as digests)")
    i.add_argument("transcript")
    g = i.add_mutually_exclusive_group()
    g.add_argument("--height", type=int)
    g.add_argument("--registry", type=int)
    i.add_argument("--channel", default=None, help="restrict to one channel")

    c = sub.add_parser("config", help="print a config file")
    c.add_argument("--quality", action="store_true", help="the longer run used for the quality check")
    return p


def cmd_simulate(args) -> int:
    try:
        cfg = SimulationConfig.load(args.config) if args.config else SimulationConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.fault:
            cfg = cfg.with_faults(cfg.faults + tuple(Fault.parse(f) for f in args.fault))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = run_simulation(cfg, out_dir=args.out)
        code = EXIT_OK
    except StallError as e:
        print(f"stall: {e.reason}", file=sys.stderr)
        result = e.result
        code = EXIT_STALL
    s = result.summary
    print(f"status: {s['status']}")
    print(f"merge rounds: {s['merge_rounds']}")
    if s["stop"]:
        print(f"stop: registry {s['stop']['registry']} at iteration {s['stop']['iteration']}, "
              f"height {s['stop']['height']}")
    for r, losses in sorted(s["final_losses"].items()):
        if losses:
            print(f"registry {r}: d_loss {losses['d_loss']:.4f}, g_loss {losses['g_loss']:.4f}")
    for rej in s["rejected_averages"]:
        print(f"rejected average from registry {rej['registry']} (round {rej['round']}): {rej['reason']}")
    for v in s["violations"]:
        print(f"violation at registry {v['registry']}, iteration {v['iteration']}: {v['kind']}")
    print(f"outputs written to {args.out}")
    return code


def cmd_audit(args) -> int:
    if not os.path.exists(args.transcript):
        print(f"no such transcript: {args.transcript}", file=sys.stderr)
        return EXIT_USAGE
    missing = [p for p in args.shares if not os.path.exists(p)]
    if missing:
        print(f"missing share files: {', '.join(missing)}", file=sys.stderr)
        return EXIT_USAGE
    tr = A.parse_transcript(args.transcript)
    try:
        report = A.audit(tr, share_paths=args.shares, replay=not args.no_replay)
    except A.AuditError as e:
        print(f"audit input error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    print(report.to_json() if args.json else report.to_text())
    return EXIT_OK if report.verdict == "pass" else EXIT_AUDIT_FAIL


def _summarise(value):
    """Replace long hex blobs (ciphertext vectors, components) by a short digest."""
    if isinstance(value, dict):
        return {k: _summarise(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_summarise(v) for v in value]
    if isinstance(value, str) and len(value) > 128 and all(c in "0123456789abcdef" for c in value[:128]):
        return f"<{len(value) // 2} bytes sha256:{hashlib.sha256(bytes.fromhex(value)).hexdigest()[:16]}>"
    return value


def _format_block(channel, height, tx: Transaction | None, block_hash) -> str:
    head = f"{channel} #{height} block {block_hash.hex()[:16]}"
    if tx is None:
        return head + " (empty)"
    lines = [head, f"  tx {tx.tx_id.hex()[:16]} by {tx.submitter or '-'} contract {tx.contract} "
                   f"tick {tx.tick} status {tx.status}"]
    try:
        payload = json.loads(tx.payload) if tx.payload else None
    except ValueError:
        payload = f"<{len(tx.payload)} bytes>"
    lines.append("  payload " + json.dumps(_summarise(payload), sort_keys=True))
    for etype, body in tx.events:
        lines.append(f"  event {etype} {json.dumps(_summarise(json.loads(body)), sort_keys=True)}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    if not os.path.exists(args.transcript):
        print(f"no such transcript: {args.transcript}", file=sys.stderr)
        return EXIT_USAGE
    tr = A.parse_transcript(args.transcript)
    for e in tr.parse_errors:
        print(f"warning: line {e['line']} unreadable: {e['error']}", file=sys.stderr)
    channels = [args.channel] if args.channel else sorted(tr.blocks)
    if args.height is not None:
        channels = [args.channel] if args.channel else ["gan-interaction"]
    out = []
    for cid in channels:
        blocks = tr.chain(cid)
        if args.height is not None:
            if not 0 <= args.height < len(blocks):
                print(f"no block at height {args.height} on {cid} ({len(blocks)} blocks)", file=sys.stderr)
                return EXIT_USAGE
            blocks = [blocks[args.height]]
        for b in blocks:
            txs = b.transactions()
            tx = txs[0] if txs else None
            if args.registry is not None:
                if tx is None or not tx.submitter:
                    continue
                try:
                    if ordinal_of(tx.submitter) != args.registry:
                        continue
                except ContractError:
                    continue
            out.append(_format_block(cid, b.height, tx, b.block_hash))
    print("\n".join(out))
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = quality_config() if args.quality else SimulationConfig()
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"simulate": cmd_simulate, "audit": cmd_audit, "inspect": cmd_inspect, "config": cmd_config}
    try:
        return handler[args.command](args)
    except BrokenPipeError:
        # output piped into e.g. head; not an error
        sys.stderr.close()
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

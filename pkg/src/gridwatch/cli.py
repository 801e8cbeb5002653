"""Command line: compile rules, inspect captures, generate scenarios, score runs."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from .alerts import AlertLog, FixedClock, SinkError, read_alert_stream, wall_clock
from .engine import Engine
from .harness import SCENARIOS, dump_labels, gateway_capture, generate_scenario, load_labels, replay, score
from .harness.labels import LabelError
from .harness.scenarios import FixtureError
from .harness.scoring import LabelMismatch
from .model import ModelError, parse_model, validate_model
from .pcap import CaptureError
from .rules import ChecksumMismatch, EmptySpecification, export_rules, generate_rules, import_rules, load_config

log = logging.getLogger("gridwatch")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INTERNAL = 3

INPUT_ERRORS = (OSError, ModelError, CaptureError, ChecksumMismatch, EmptySpecification,
                LabelError, LabelMismatch, FixtureError, ValueError, KeyError)


class InputError(Exception):
    pass


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None


def cmd_rules(args) -> int:
    gim = parse_model(_read(args.gim))
    diags = validate_model(gim)
    if diags:
        for d in diags:
            print(f"error: {type(d).__name__}: {d}", file=sys.stderr)
        return EXIT_INPUT
    config = load_config(_read(args.config))
    sb = generate_rules(gim, config)
    text = export_rules(sb)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    log.info("wrote %d endpoints, %d channels, %d data points (checksum %s)",
             len(sb.endpoints), len(sb.channels), len(sb.datapoints), sb.checksum[:12])
    return EXIT_OK


def cmd_inspect(args) -> int:
    sb = import_rules(_read(args.rules))
    capture = _read(args.pcap)
    clock = FixedClock.parse(args.clock) if args.clock else wall_clock
    labels = load_labels(_read(args.labels).decode("utf-8")) if args.labels else None
    with open(args.alert_log, "w", encoding="utf-8", newline="\n") as log_fh:
        stream_fh = open(args.alerts_jsonl, "w", encoding="utf-8") if args.alerts_jsonl else None
        try:
            sink = AlertLog(log_fh, stream_fh)
            result = replay(capture, Engine(sb, args.assume_started), workers=args.workers,
                            clock=clock, log=sink, speed=args.speed)
        finally:
            if stream_fh is not None:
                stream_fh.close()
    lines = [
        f"packets={len(result.reports)}",
        f"alerts={len(result.alerts)}",
        f"alerted_packets={len(set(result.alerted_indices))}",
        f"rules_checksum={sb.checksum}",
    ]
    for name, count in sorted(Counter(a.alert_type.value for a in result.alerts).items()):
        lines.append(f"alert_count.{name}={count}")
    for group, stats in result.latency_stats().items():
        lines.append(f"latency.{group}.count={stats['count']}")
        for key in ("mean_ms", "p50_ms", "p95_ms"):
            lines.append(f"latency.{group}.{key}={stats[key]:.4f}")
    if labels is not None:
        cm = score(result.alerted_indices, labels)
        lines.extend(f"confusion.{k}={v}" for k, v in cm.as_dict().items())
    print("\n".join(lines))
    return EXIT_OK


def cmd_scenario(args) -> int:
    if args.id == "GATEWAY":
        cap = gateway_capture(args.seed)
    else:
        gim = None
        if args.gim:
            from .model import load_model
            gim = load_model(_read(args.gim))
        cap = generate_scenario(args.id, args.seed, gim)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.pcap").write_bytes(cap.capture)
    Path(f"{prefix}.labels.jsonl").write_text(dump_labels(cap.labels))
    log.info("%s seed %d: %d packets, %d malicious", args.id, args.seed, len(cap.packets), cap.count(True))
    return EXIT_OK


def cmd_score(args) -> int:
    try:
        records = read_alert_stream(_read(args.alerts).decode("utf-8"))
        indices = [int(r["packet_index"]) for r in records]
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"malformed alert stream {args.alerts}: {exc}") from None
    labels = load_labels(_read(args.labels).decode("utf-8"))
    cm = score(indices, labels, args.tag or None)
    print(cm)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridwatch", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("rules", help="compile a GIM and rule config into a specification base")
    r.add_argument("gim")
    r.add_argument("config")
    r.add_argument("out", help="output path, or - for standard output")
    r.set_defaults(func=cmd_rules)

    i = sub.add_parser("inspect", help="inspect a capture and write the alert log")
    i.add_argument("rules")
    i.add_argument("pcap")
    i.add_argument("alert_log")
    i.add_argument("--assume-started", action="store_true",
                   help="treat connections seen mid-stream as already in data transfer")
    i.add_argument("--clock", help="deterministic alert timestamps, e.g. 'fixed:14.04.2022 10:47:09'")
    i.add_argument("--alerts-jsonl", help="also write one JSON record per alert")
    i.add_argument("--labels", help="label sidecar; adds the confusion matrix to the report")
    i.add_argument("--workers", type=int, default=1)
    i.add_argument("--speed", choices=("fast", "paced"), default="fast")
    i.set_defaults(func=cmd_inspect)

    s = sub.add_parser("scenario", help="generate a labeled scenario capture")
    s.add_argument("id", choices=SCENARIOS + ("GATEWAY",))
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--gim", help="infrastructure model (default: bundled testbed)")
    s.add_argument("--out", required=True, help="output prefix; writes PREFIX.pcap and PREFIX.labels.jsonl")
    s.set_defaults(func=cmd_scenario)

    c = sub.add_parser("score", help="confusion matrix of an alert stream against labels")
    c.add_argument("alerts", help="JSON-lines alert stream from inspect --alerts-jsonl")
    c.add_argument("labels")
    c.add_argument("--tag", action="append", help="score only packets with this scenario tag (repeatable)")
    c.set_defaults(func=cmd_score)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SinkError as exc:
        print(f"error: cannot write alerts: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except INPUT_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

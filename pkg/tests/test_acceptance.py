"""Acceptance gate: one PASS/FAIL line per primary criterion.

Each test records its verdict before asserting, so a red criterion still
reports its measured numbers.
"""

import io
import ipaddress
import json
import random
import struct
import time
from functools import lru_cache

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

import conftest
import test_automata as automata_suite
import test_codec as codec_suite
import test_rules as rules_suite
from gridwatch.alerts import FixedClock
from gridwatch.cli import main
from gridwatch.codec import TCP_ACK, TCP_PSH, RawPacket, encode_apdu, encode_packet
from gridwatch.engine import Engine
from gridwatch.fixtures import fixture_path, read_fixture
from gridwatch.harness import SCENARIOS, generate_scenario, gateway_capture, observed_rtts, replay, score
from gridwatch.harness.scenarios import bulk_capture
from gridwatch.rules import export_rules, generate_rules, import_rules, load_config
from strategies import apdus

SEEDS = range(1, 6)


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    conftest.ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def compiled_rules():
    return import_rules(export_rules(generate_rules(
        conftest.testbed_model(), load_config(read_fixture("testbed_config.json")))))


# ---------------------------------------------------------------- confusion table

EXPECTED = {
    "S1": ({"tp": 0, "tn": 200, "fp": 0, "fn": 0}, None),
    "S2A": ({"tp": 115, "fn": 0}, None),
    "S2B1": ({"tp": 10, "fn": 0}, "S2B1"),
    "S2B2": ({"tp": 0, "fn": 10}, "S2B2"),
}


def test_confusion_table(tmp_path, capsys):
    start = time.perf_counter()
    rules = tmp_path / "rules.json"
    with fixture_path("testbed_gim.json") as gim, fixture_path("testbed_config.json") as cfg:
        assert main(["rules", str(gim), str(cfg), str(rules)]) == 0
    mismatches, rows = [], []
    for seed in SEEDS:
        for sid in SCENARIOS:
            prefix = tmp_path / f"{sid}-{seed}"
            assert main(["scenario", sid, "--seed", str(seed), "--out", str(prefix)]) == 0
            stream = tmp_path / f"{sid}-{seed}.alerts.jsonl"
            assert main(["inspect", str(rules), f"{prefix}.pcap", str(tmp_path / "alerts.log"),
                         "--alerts-jsonl", str(stream)]) == 0
            expected, tag = EXPECTED[sid]
            args = ["score", str(stream), f"{prefix}.labels.jsonl"] + (["--tag", tag] if tag else [])
            capsys.readouterr()
            assert main(args) == 0
            got = dict(kv.split("=") for kv in capsys.readouterr().out.split())
            got = {k: int(v) for k, v in got.items()}
            rows.append(f"{sid}/{seed} {got}")
            if any(got[k] != v for k, v in expected.items()):
                mismatches.append(rows[-1])
    elapsed = time.perf_counter() - start
    print("\n".join(rows))
    verdict("confusion table, seeds 1..5", not mismatches and elapsed < 30.0,
            f"{len(rows)} runs, {len(mismatches)} mismatching {mismatches}, {elapsed:.1f} s (limit 30 s)")


# ---------------------------------------------------------------- golden alert log

def test_rogue_endpoint_golden_log(tmp_path, capsys):
    golden = read_fixture("gateway_rogue_alerts.log")
    bundled = read_fixture("gateway_rogue.pcap")
    regenerated = gateway_capture().capture == bundled
    rules = tmp_path / "rules.json"
    log = tmp_path / "alerts.log"
    with fixture_path("gateway_gim.json") as gim, fixture_path("gateway_config.json") as cfg, \
            fixture_path("gateway_rogue.pcap") as pcap:
        assert main(["rules", str(gim), str(cfg), str(rules)]) == 0
        assert main(["inspect", str(rules), str(pcap), str(log), "--clock=fixed:14.04.2022 10:47:09"]) == 0
    produced = log.read_bytes()
    same = produced == golden
    detail = f"{len(produced)} bytes vs {len(golden)} golden, byte-identical={same}, capture regenerates={regenerated}"
    if not same:
        detail += "\n" + produced.decode(errors="replace")
    verdict("rogue-endpoint golden alert log", same and regenerated, detail)


# ---------------------------------------------------------------- round trip time threshold

def rtt_false_positives(cap, max_rtt_ms):
    sb = compiled_rules()
    sb.max_rtt_ms = max_rtt_ms
    result = replay(cap.capture, Engine(sb))
    return score(result.alerted_indices, cap.labels).fp, len(result.alerts)


def test_rtt_threshold():
    low, p95 = [], []
    notes = []
    for seed in SEEDS:
        cap = generate_scenario("S1", seed)
        rtts = np.array(observed_rtts(cap.packets))
        threshold = float(np.percentile(rtts, 95))
        fp_low, _ = rtt_false_positives(cap, 100.0)
        fp_p95, _ = rtt_false_positives(cap, threshold)
        above = int((rtts > threshold).sum())
        low.append(fp_low)
        p95.append(fp_p95)
        notes.append(f"seed {seed}: {len(rtts)} RTTs, p95={threshold:.1f} ms, "
                     f"{above} samples above p95, FP@100ms={fp_low}, FP@p95={fp_p95}")
    ok = all(n > 0 for n in low) and all(n == 0 for n in p95)
    analysis = ("" if ok else
                "\n  A threshold equal to the 95th percentile of the same RTT sample leaves about 5% of the "
                "samples above it by definition, so each of those acknowledgements raises RTT_EXCEEDED. "
                "FP = 0 at that threshold is unattainable for any continuous RTT distribution with more "
                "than 20 samples; see test_rtt_conservative_threshold for the bound that does hold.")
    verdict("RTT threshold false positives", ok, "; ".join(notes) + analysis)


def test_rtt_conservative_threshold():
    """Not a criterion: a threshold above every normal RTT (mean + 1.96 sd of U(50,180), or the max) is quiet."""
    for seed in SEEDS:
        cap = generate_scenario("S1", seed)
        rtts = np.array(observed_rtts(cap.packets))
        for threshold in (rtts.mean() + 1.96 * rtts.std(), rtts.max()):
            assert rtt_false_positives(cap, float(threshold)) == (0, 0)


# ---------------------------------------------------------------- latency

def test_inspection_latency():
    cap = bulk_capture(1)
    sb = compiled_rules()
    replay(cap.capture, Engine(sb), clock=FixedClock.parse("fixed:14.04.2022 10:47:09"))  # warm-up
    from gridwatch.alerts import AlertLog
    result = replay(cap.capture, Engine(sb), clock=FixedClock.parse("fixed:14.04.2022 10:47:09"),
                    log=AlertLog(io.StringIO(), io.StringIO()))
    stats = result.latency_stats()
    valid, invalid = stats["valid"], stats["invalid"]
    cm = score(result.alerted_indices, cap.labels)
    ok = (len(cap.packets) >= 10_000 and valid["count"] > 0 and invalid["count"] > 0
          and valid["mean_ms"] <= 1.0 and invalid["mean_ms"] <= 5.0 and invalid["mean_ms"] > valid["mean_ms"])
    verdict("per-packet inspection latency", ok,
            f"{len(cap.packets)} packets ({cm}); conformant n={valid['count']} mean={valid['mean_ms']:.4f} ms "
            f"p95={valid['p95_ms']:.4f} ms (limit 1.0); violating n={invalid['count']} "
            f"mean={invalid['mean_ms']:.4f} ms p95={invalid['p95_ms']:.4f} ms (limit 5.0)")


# ---------------------------------------------------------------- idempotent replay property

@lru_cache(maxsize=None)
def base_capture(sid, seed):
    return tuple(generate_scenario(sid, seed).packets)


@lru_cache(maxsize=1)
def shared_rules():
    return compiled_rules()


def alert_multiset(result):
    return sorted((a.packet_index, a.alert_type.value, a.alert_reason, a.packet_info) for a in result.alerts)


@conftest.PROPERTY
@given(st.sampled_from(SCENARIOS), st.integers(1, 3), st.data(), st.booleans(), st.sampled_from([1, 2, 4]))
def test_replay_is_idempotent(sid, seed, data, assume_started, workers):
    packets = base_capture(sid, seed)
    a = data.draw(st.integers(0, len(packets) - 1))
    b = data.draw(st.integers(a + 1, len(packets)))
    chunk = list(packets[a:b])
    sb = shared_rules()
    first = replay(chunk, Engine(sb, assume_started))
    second = replay(chunk, Engine(sb, assume_started), workers=workers)
    assert alert_multiset(first) == alert_multiset(second)
    assert [a.id for a in second.alerts] == list(range(len(second.alerts)))


# ---------------------------------------------------------------- property suites

SUITES = [
    ("codec round trip", codec_suite.test_codec_round_trip),
    ("automata totality", automata_suite.test_totality_over_random_walks),
    ("conformant traces yield no INVALID", automata_suite.test_conformant_traces_have_no_invalid_output),
    ("STARTDT deletion detected", automata_suite.test_startdt_deletion_is_detected),
    ("sequence wraparound vs big-integer oracle", automata_suite.test_wraparound_matches_big_integer_oracle),
    ("rule generation determinism", rules_suite.test_rule_generation_is_deterministic),
    ("idempotent replay", test_replay_is_idempotent),
]


def run_counted(test):
    handle = test.hypothesis
    inner = handle.inner_test
    calls = 0

    def counting(*args, **kwargs):
        nonlocal calls
        calls += 1
        return inner(*args, **kwargs)

    handle.inner_test = counting
    try:
        test()
    finally:
        handle.inner_test = inner
    return calls


def test_property_suites():
    results, failures = [], []
    for name, test in SUITES:
        try:
            n = run_counted(test)
        except Exception as exc:  # a falsified property
            failures.append(f"{name}: {type(exc).__name__}")
            continue
        results.append(f"{name}={n}")
        if n < 1000:
            failures.append(f"{name}: only {n} cases")
    # totality is also checked exhaustively over the finite (role, state, symbol) space
    for role in automata_suite.Role:
        automata_suite.test_totality_against_reference(role)
    verdict("property suites (>= 1000 cases each)", not failures,
            ", ".join(results) + (f"; failures: {failures}" if failures else "") +
            f"; exhaustive totality over {2 * len(automata_suite.State) * len(automata_suite.ALPHABET)} triples")


# ---------------------------------------------------------------- closed-world soundness

def brute_force_in_spec(doc: dict, data: bytes) -> bool:
    """Re-check one frame straight against the rule document, with its own byte parsing."""
    if len(data) < 34 or data[12:14] != b"\x08\x00":
        return False
    dst_mac = ":".join(f"{b:02x}" for b in data[0:6])
    src_mac = ":".join(f"{b:02x}" for b in data[6:12])
    ihl = (data[14] & 0x0F) * 4
    if data[23] != 6:
        return False
    src_ip = str(ipaddress.IPv4Address(data[26:30]))
    dst_ip = str(ipaddress.IPv4Address(data[30:34]))
    sport, dport = struct.unpack_from("!HH", data, 14 + ihl)
    macs = {e["mac"] for e in doc["endpoints"]}
    ips = {e["ip"] for e in doc["endpoints"]}
    if not {src_mac, dst_mac} <= macs or not {src_ip, dst_ip} <= ips:
        return False
    for c in doc["channels"]:
        if (src_ip, dst_ip, dport) == (c["client_ip"], c["server_ip"], c["server_port"]):
            return True
        if (dst_ip, src_ip, sport) == (c["client_ip"], c["server_ip"], c["server_port"]):
            return True
    return False


@lru_cache(maxsize=1)
def rule_document():
    return json.loads(export_rules(compiled_rules()))


def unknown_mac(doc, rnd):
    known = {e["mac"] for e in doc["endpoints"]}
    while True:
        mac = "02:" + ":".join(f"{rnd.randrange(256):02x}" for _ in range(5))
        if mac not in known:
            return mac


def unknown_ip(doc, rnd):
    known = {e["ip"] for e in doc["endpoints"]}
    while True:
        ip = str(ipaddress.IPv4Address(rnd.randrange(1 << 24, 0xDFFFFFFF)))
        if ip not in known:
            return ip


@lru_cache(maxsize=1)
def _pairs(doc_json: str):
    doc = json.loads(doc_json)
    linked = {(c["client_ip"], c["server_ip"]) for c in doc["channels"]}
    return [(a, b) for a in doc["endpoints"] for b in doc["endpoints"]
            if a is not b and (a["ip"], b["ip"]) not in linked]


def unchanneled_pairs(doc):
    return _pairs(json.dumps(doc, sort_keys=True))


def swap_mac(data: bytes, mac: str, src: bool) -> bytes:
    raw = bytes.fromhex(mac.replace(":", ""))
    return raw + data[6:] if not src else data[:6] + raw + data[12:]


@st.composite
def fuzz_captures(draw):
    doc = rule_document()
    base = list(base_capture("S1", draw(st.integers(1, 3))))
    rnd = random.Random(draw(st.integers(0, 2**32 - 1)))
    endpoints = doc["endpoints"]
    inserts: list[tuple[int, RawPacket]] = []
    for _ in range(draw(st.integers(1, 30))):
        pos = rnd.randrange(len(base))
        template = base[pos]
        kind = draw(st.sampled_from(["mac", "ip", "port", "channel"]))
        if kind == "mac":
            data = swap_mac(template.data, unknown_mac(doc, rnd), src=rnd.random() < 0.5)
            # the perturbed copy travels right behind its template
            inserts.append((pos + 1, RawPacket(template.ts_sec, template.ts_nsec, data)))
            continue
        a, b = rnd.sample(endpoints, 2)
        if kind == "channel":
            # only pairs without a channel: random frames on a real channel are protocol errors,
            # which this address-level classifier cannot judge
            a, b = rnd.choice(unchanneled_pairs(doc))
        payload = encode_apdu(draw(apdus())) if rnd.random() < 0.8 else rnd.randbytes(rnd.randrange(1, 40))
        sport, dport = rnd.randrange(1024, 65536), rnd.randrange(1, 65536)
        if kind == "ip":
            ip = unknown_ip(doc, rnd)
            src_ip, dst_ip = (ip, b["ip"]) if rnd.random() < 0.5 else (a["ip"], ip)
            dport = rnd.choice([2404, dport])
        else:
            src_ip, dst_ip = a["ip"], b["ip"]
            if kind == "port":
                while dport == 2404 or sport == 2404:
                    sport, dport = rnd.randrange(1024, 65536), rnd.randrange(1, 65536)
            else:
                dport = 2404  # an IEC-104 connection between endpoints with no channel
                sport = sport if sport != 2404 else 2405
        data = encode_packet(a["mac"], b["mac"], src_ip, dst_ip, sport, dport, rnd.randrange(1 << 32),
                             rnd.randrange(1 << 32), TCP_PSH | TCP_ACK, payload)
        inserts.append((pos + 1, RawPacket(template.ts_sec, template.ts_nsec, data)))
    packets = list(base)
    for pos, pkt in sorted(inserts, key=lambda x: x[0], reverse=True):
        packets.insert(pos, pkt)
    return packets


FUZZ_STATS = {"captures": 0, "in_spec": 0, "out_of_spec": 0}


@settings(max_examples=300, deadline=None, database=None)
@given(fuzz_captures())
def fuzz_case(packets):
    doc = rule_document()
    result = replay(packets, Engine(import_rules(doc)))
    alerted = set(result.alerted_indices)
    for index, pkt in enumerate(packets):
        expected = brute_force_in_spec(doc, pkt.data)
        FUZZ_STATS["in_spec" if expected else "out_of_spec"] += 1
        if expected:
            assert index not in alerted, f"alert on in-spec packet {index}"
        else:
            assert index in alerted, f"no alert on out-of-spec packet {index}"
    FUZZ_STATS["captures"] += 1


def test_closed_world_soundness():
    error = None
    try:
        fuzz_case()
    except AssertionError as exc:
        error = str(exc).splitlines()[0]
    verdict("closed-world soundness", error is None,
            f"{FUZZ_STATS['captures']} fuzzed captures, {FUZZ_STATS['in_spec']} in-spec and "
            f"{FUZZ_STATS['out_of_spec']} out-of-spec packets checked against the brute-force classifier"
            + (f"; counterexample: {error}" if error else ""))

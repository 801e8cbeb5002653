"""Feed captures through the engine and collect alerts and per-packet latency."""

from __future__ import annotations

import socket
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from statistics import mean
from typing import Iterable

from ..alerts import Alert, AlertGenerator, AlertLog, Clock, wall_clock
from ..codec import RawPacket
from ..engine import Engine, InspectionReport
from ..pcap import read_pcap


@dataclass
class ReplayResult:
    reports: list[InspectionReport]
    alerts: list[Alert]
    latencies_ns: list[int] = field(default_factory=list)

    @property
    def alerted_indices(self) -> list[int]:
        return [a.packet_index for a in self.alerts]

    def latency_stats(self) -> dict[str, dict[str, float]]:
        groups: dict[str, list[float]] = {"valid": [], "invalid": []}
        for report, ns in zip(self.reports, self.latencies_ns):
            groups["invalid" if report.violations else "valid"].append(ns / 1e6)
        out = {}
        for name, values in groups.items():
            values.sort()
            if not values:
                out[name] = {"count": 0, "mean_ms": 0.0, "p50_ms": 0.0, "p95_ms": 0.0}
                continue
            out[name] = {
                "count": len(values),
                "mean_ms": mean(values),
                "p50_ms": values[len(values) // 2],
                "p95_ms": values[min(len(values) - 1, int(0.95 * len(values)))],
            }
        return out


def flow_key(data: bytes) -> tuple | None:
    """Direction-independent TCP/IP endpoint pair, read straight from the frame bytes."""
    if len(data) < 34 or data[12:14] != b"\x08\x00":
        return None
    ihl = (data[14] & 0x0F) * 4
    if data[23] != 6 or len(data) < 14 + ihl + 4:
        return None
    a = (data[26:30], struct.unpack_from("!H", data, 14 + ihl)[0])
    b = (data[30:34], struct.unpack_from("!H", data, 14 + ihl + 2)[0])
    return (a, b) if a <= b else (b, a)


def _packets(capture) -> list[RawPacket]:
    if isinstance(capture, (bytes, bytearray, str)) or hasattr(capture, "read"):
        return read_pcap(capture)
    return list(capture)


def replay(capture, engine: Engine, workers: int = 1, clock: Clock = wall_clock,
           log: AlertLog | None = None, speed: str = "fast") -> ReplayResult:
    """Inspect packets in capture order; alert ids are allocated by a single generator.

    With ``workers > 1`` connections are sharded across threads, each shard
    owning its own connection table; packets of one flow stay in order.
    """
    packets = _packets(capture)
    gen = AlertGenerator(clock)
    if workers <= 1:
        return _replay_serial(packets, engine, gen, log, speed)
    return _replay_sharded(packets, engine, gen, log, workers)


def _replay_serial(packets, engine, gen, log, speed) -> ReplayResult:
    reports, alerts, lat = [], [], []
    start_wall = time.perf_counter()
    start_ts = packets[0].timestamp if packets else 0.0
    clock_ns = time.perf_counter_ns
    for index, pkt in enumerate(packets):
        if speed == "paced":
            delay = (pkt.timestamp - start_ts) - (time.perf_counter() - start_wall)
            if delay > 0:
                time.sleep(delay)
        t0 = clock_ns()
        report = engine.inspect(pkt, index)
        for draft in report.violations:
            alert = gen.emit(draft)
            if log is not None:
                log.write(alert)
            alerts.append(alert)
        lat.append(clock_ns() - t0)
        reports.append(report)
    return ReplayResult(reports, alerts, lat)


def _replay_sharded(packets, engine, gen, log, workers) -> ReplayResult:
    shards: list[list[int]] = [[] for _ in range(workers)]
    owner: dict = {}
    for index, pkt in enumerate(packets):
        key = flow_key(pkt.data)
        if key not in owner:
            owner[key] = len(owner) % workers
        shards[owner[key]].append(index)

    def run(indices: list[int]):
        local = Engine(engine.sb, engine.assume_started)
        out = []
        for index in indices:
            t0 = time.perf_counter_ns()
            report = local.inspect(packets[index], index)
            out.append((index, report, time.perf_counter_ns() - t0))
        return out

    results: dict[int, tuple[InspectionReport, int]] = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for chunk in pool.map(run, shards):
            for index, report, ns in chunk:
                results[index] = (report, ns)
    reports, alerts, lat = [], [], []
    for index in range(len(packets)):
        report, ns = results[index]
        t0 = time.perf_counter_ns()
        for draft in report.violations:
            alert = gen.emit(draft)
            if log is not None:
                log.write(alert)
            alerts.append(alert)
        lat.append(ns + time.perf_counter_ns() - t0)
        reports.append(report)
    return ReplayResult(reports, alerts, lat)


def observed_rtts(packets: Iterable[RawPacket]) -> list[float]:
    """Round trip times in ms: each data segment to the first peer ACK covering it."""
    open_segments: dict[tuple, list[tuple[int, float]]] = {}
    out = []
    for pkt in packets:
        d = pkt.data
        if len(d) < 54 or d[12:14] != b"\x08\x00" or d[23] != 6:
            continue
        ihl = (d[14] & 0x0F) * 4
        total = struct.unpack_from("!H", d, 16)[0]
        tcp = 14 + ihl
        sport, dport, seq, ack = struct.unpack_from("!HHII", d, tcp)
        doff = (d[tcp + 12] >> 4) * 4
        flags = d[tcp + 13]
        plen = total - ihl - doff
        src = (socket.inet_ntoa(d[26:30]), sport)
        dst = (socket.inet_ntoa(d[30:34]), dport)
        if flags & 0x10:
            pending = open_segments.get((dst, src), [])
            keep = []
            for end, ts in pending:
                if ((ack - end) % (1 << 32)) < (1 << 31):
                    out.append((pkt.timestamp - ts) * 1000.0)
                else:
                    keep.append((end, ts))
            open_segments[(dst, src)] = keep
        if plen > 0:
            open_segments.setdefault((src, dst), []).append(((seq + plen) % (1 << 32), pkt.timestamp))
    return out

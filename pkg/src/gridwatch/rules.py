"""Compile a GIM into the whitelist rule document used by the inspection engine.

The pipeline is importer (:func:`load_config` / :func:`gridwatch.model.load_model`),
rule manager (:func:`generate_rules`) and exporter (:func:`export_rules`).
The compiled rules are closed-world: whatever is not listed is illegitimate.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from datetime import time
from typing import Iterable

from .model import (
    Direction, EdgeKind, Gim, NodeKind, Protocol, ReferentialError, SchemaError,
    _enum, _int, _ip, _list, _mac, _num, _obj, _str,
)

FORMAT = "gridwatch-sb/1"
DEFAULT_MAX_RTT_MS = 200.0
WEEKDAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")
DOMAINS = ("ASSET", "COMMUNICATION", "OPERATION")

SEND_CONTROL = "send-control"
SEND_MONITOR = "send-monitor"
SEND_CONFIRMATION = "send-confirmation"

ROLE_OPS = {
    "MTU": frozenset({SEND_CONTROL}),
    "RTU": frozenset({SEND_MONITOR, SEND_CONFIRMATION}),
}

_CLOCK_RE = re.compile(r"^([01]\d|2[0-3]):([0-5]\d)$")


class EmptySpecification(Exception):
    pass


class ChecksumMismatch(Exception):
    def __init__(self, stored: str, computed: str):
        super().__init__(f"rule checksum {stored!r} does not match content ({computed})")
        self.stored = stored
        self.computed = computed


@dataclass(frozen=True)
class ProtocolWindow:
    protocol: str
    weekdays: frozenset[str]
    start_time: time
    end_time: time

    def contains(self, weekday: int, at: time) -> bool:
        return WEEKDAYS[weekday] in self.weekdays and self.start_time <= at < self.end_time

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "weekdays": sorted(self.weekdays, key=WEEKDAYS.index),
            "start_time": self.start_time.strftime("%H:%M"),
            "end_time": self.end_time.strftime("%H:%M"),
        }


@dataclass(frozen=True)
class RuleConfig:
    device_kinds_of_interest: frozenset[NodeKind] = frozenset({NodeKind.MTU, NodeKind.RTU})
    max_rtt_ms: float = DEFAULT_MAX_RTT_MS
    protocol_windows: tuple[ProtocolWindow, ...] = ()
    emit_domains: frozenset[str] = frozenset(DOMAINS)

    def __post_init__(self):
        if not self.max_rtt_ms > 0:
            raise SchemaError("$.max_rtt_ms", "must be positive")
        for w in self.protocol_windows:
            if not w.start_time < w.end_time:
                raise SchemaError("$.protocol_windows", f"{w.protocol}: start_time must precede end_time")


@dataclass(frozen=True)
class Endpoint:
    mac: str
    ip: str
    node_id: str


@dataclass(frozen=True)
class ChannelRule:
    client_ip: str
    server_ip: str
    server_port: int
    protocol: str


@dataclass(frozen=True)
class DatapointRule:
    asdu_type: int
    direction: Direction
    min_value: float | None = None
    max_value: float | None = None
    unit: str = ""


@dataclass(frozen=True)
class RoleOps:
    role: str
    send: frozenset[str]


DatapointKey = tuple[str, int, int]  # (server_ip, common_address, ioa)


@dataclass
class SpecificationBase:
    endpoints: list[Endpoint]
    channels: list[ChannelRule]
    datapoints: dict[DatapointKey, DatapointRule]
    role_ops: dict[str, RoleOps]
    max_rtt_ms: float = DEFAULT_MAX_RTT_MS
    protocol_windows: list[ProtocolWindow] = field(default_factory=list)
    domains: frozenset[str] = frozenset(DOMAINS)
    source_model: str = ""
    checksum: str = ""

    def __post_init__(self):
        self._index()

    def _index(self):
        self.macs = {e.mac for e in self.endpoints}
        self.ips = {e.ip for e in self.endpoints}
        self.node_by_ip = {e.ip: e.node_id for e in self.endpoints}
        self.channel_index = {(c.client_ip, c.server_ip, c.server_port): c for c in self.channels}
        self.server_ports = {(c.server_ip, c.server_port) for c in self.channels}
        self.clients_of = {}
        for c in self.channels:
            self.clients_of.setdefault((c.server_ip, c.server_port), set()).add(c.client_ip)
        self.iec104_ports = {c.server_port for c in self.channels if c.protocol == Protocol.IEC104.value}
        self.common_addresses = {(ip, ca) for ip, ca, _ in self.datapoints}

    def channel_for(self, ip_a: str, port_a: int, ip_b: str, port_b: int) -> tuple[ChannelRule, bool] | None:
        """Find the whitelisted channel for a packet; the flag is True when ``a`` is the client."""
        c = self.channel_index.get((ip_a, ip_b, port_b))
        if c is not None:
            return c, True
        c = self.channel_index.get((ip_b, ip_a, port_a))
        if c is not None:
            return c, False
        return None

    def to_document(self) -> dict:
        return {
            "format": FORMAT,
            "source_model": self.source_model,
            "domains": sorted(self.domains),
            "endpoints": [vars(e) for e in sorted(self.endpoints, key=lambda e: (e.node_id, e.ip))],
            "channels": [vars(c) for c in sorted(self.channels, key=_channel_sort)],
            "datapoints": [
                {"server_ip": k[0], "common_address": k[1], "ioa": k[2],
                 "asdu_type": r.asdu_type, "direction": r.direction.value,
                 "min_value": r.min_value, "max_value": r.max_value, "unit": r.unit}
                for k, r in sorted(self.datapoints.items(), key=lambda kv: (_ip_key(kv[0][0]), kv[0][1:]))
            ],
            "role_ops": {n: {"role": r.role, "send": sorted(r.send)} for n, r in sorted(self.role_ops.items())},
            "max_rtt_ms": float(self.max_rtt_ms),
            "protocol_windows": sorted((w.to_dict() for w in self.protocol_windows),
                                       key=lambda d: json.dumps(d, sort_keys=True)),
        }

    def compute_checksum(self) -> str:
        return content_checksum(self.to_document())


def _ip_key(ip: str) -> tuple[int, ...]:
    return tuple(int(x) for x in ip.split("."))


def _channel_sort(c: ChannelRule):
    return (_ip_key(c.client_ip), _ip_key(c.server_ip), c.server_port, c.protocol)


def content_checksum(document: dict) -> str:
    body = {k: v for k, v in document.items() if k != "checksum"}
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canonical.encode("ascii")).hexdigest()


# ---------------------------------------------------------------- importer: config

def _clock(value, path: str) -> time:
    m = _CLOCK_RE.match(value) if isinstance(value, str) else None
    if not m:
        raise SchemaError(path, "expected 24h clock HH:MM")
    return time(int(m.group(1)), int(m.group(2)))


def _parse_window(raw, path: str) -> ProtocolWindow:
    d = _obj(raw, path, {"protocol", "weekdays", "start_time", "end_time"}, set())
    days = _list(d["weekdays"], f"{path}.weekdays")
    for i, day in enumerate(days):
        if day not in WEEKDAYS:
            raise SchemaError(f"{path}.weekdays[{i}]", f"expected one of {list(WEEKDAYS)}")
    start = _clock(d["start_time"], f"{path}.start_time")
    end = _clock(d["end_time"], f"{path}.end_time")
    if not start < end:
        raise SchemaError(path, "start_time must precede end_time")
    return ProtocolWindow(_str(d["protocol"], f"{path}.protocol").upper(), frozenset(days), start, end)


def load_config(document: bytes | str | dict) -> RuleConfig:
    if isinstance(document, (bytes, bytearray)):
        document = document.decode("utf-8")
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON: {exc}") from None
    d = _obj(document, "$", {"device_kinds_of_interest"},
             {"max_rtt_ms", "protocol_windows", "emit_domains"})
    kinds = frozenset(_enum(NodeKind, k, f"$.device_kinds_of_interest[{i}]")
                      for i, k in enumerate(_list(d["device_kinds_of_interest"], "$.device_kinds_of_interest")))
    max_rtt = _num(d.get("max_rtt_ms", DEFAULT_MAX_RTT_MS), "$.max_rtt_ms")
    windows = tuple(_parse_window(w, f"$.protocol_windows[{i}]")
                    for i, w in enumerate(_list(d.get("protocol_windows", []), "$.protocol_windows")))
    domains = d.get("emit_domains", list(DOMAINS))
    for i, dom in enumerate(_list(domains, "$.emit_domains")):
        if dom not in DOMAINS:
            raise SchemaError(f"$.emit_domains[{i}]", f"expected one of {list(DOMAINS)}")
    return RuleConfig(kinds, max_rtt, windows, frozenset(domains))


# ---------------------------------------------------------------- rule manager

def _fallback_bounds(unit: str, limits) -> tuple[float | None, float | None]:
    if limits is None:
        return None, None
    u = unit.strip().lower().replace(" ", "").replace("φ", "phi")
    if u == "kw" and limits.p_max_kw is not None:
        return -limits.p_max_kw, limits.p_max_kw
    if u == "kvar" and limits.q_max_kvar is not None:
        return -limits.q_max_kvar, limits.q_max_kvar
    if u in ("cos_phi", "cosphi") and (limits.cos_phi_min is not None or limits.cos_phi_max is not None):
        lo = limits.cos_phi_min if limits.cos_phi_min is not None else -1.0
        hi = limits.cos_phi_max if limits.cos_phi_max is not None else 1.0
        return lo, hi
    return None, None


def generate_rules(gim: Gim, config: RuleConfig) -> SpecificationBase:
    """Project the GIM onto the configured device kinds and emit whitelists."""
    selected = [n for n in gim.nodes
                if n.kind in config.device_kinds_of_interest and n.ip is not None and n.mac is not None]
    if not selected:
        kinds = sorted(k.value for k in config.device_kinds_of_interest)
        raise EmptySpecification(f"no addressable asset of kind {kinds} in model {gim.meta.model_id!r}")
    by_id = {n.id: n for n in selected}
    endpoints = [Endpoint(n.mac, n.ip, n.id) for n in selected]

    channels: list[ChannelRule] = []
    role_ops: dict[str, set[str]] = {}
    roles: dict[str, str] = {}
    server_nodes = []
    for edge in gim.edges:
        if edge.kind is not EdgeKind.COMM_CHANNEL or edge.channel is None:
            continue
        ch = edge.channel
        client, server = by_id.get(ch.client), by_id.get(ch.server)
        if client is None or server is None:
            continue
        channels.append(ChannelRule(client.ip, server.ip, ch.server_port, ch.protocol.value))
        server_nodes.append(server)
        if ch.protocol is Protocol.IEC104:
            for node, role in ((client, "MTU"), (server, "RTU")):
                role_ops.setdefault(node.id, set()).update(ROLE_OPS[role])
                roles[node.id] = role if roles.get(node.id, role) == role else "MTU+RTU"

    datapoints: dict[DatapointKey, DatapointRule] = {}
    if "ASSET" in config.emit_domains:
        for server in {n.id: n for n in server_nodes}.values():
            for dp in server.data_points:
                lo, hi = dp.min_value, dp.max_value
                if "OPERATION" in config.emit_domains:
                    if dp.direction is Direction.CONTROL and (lo is None or hi is None):
                        flo, fhi = _fallback_bounds(dp.unit, server.op_limits)
                        lo = flo if lo is None else lo
                        hi = fhi if hi is None else hi
                else:
                    lo = hi = None
                datapoints[(server.ip, dp.common_address, dp.ioa)] = DatapointRule(
                    dp.asdu_type, dp.direction, lo, hi, dp.unit)

    sb = SpecificationBase(
        endpoints=endpoints,
        channels=channels,
        datapoints=datapoints,
        role_ops={n: RoleOps(roles[n], frozenset(ops)) for n, ops in role_ops.items()},
        max_rtt_ms=float(config.max_rtt_ms),
        protocol_windows=list(config.protocol_windows),
        domains=frozenset(config.emit_domains),
        source_model=gim.meta.model_id,
    )
    sb.checksum = sb.compute_checksum()
    return sb


# ---------------------------------------------------------------- exporter / importer

def export_rules(sb: SpecificationBase) -> str:
    doc = sb.to_document()
    doc["checksum"] = content_checksum(doc)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _check_references(sb: SpecificationBase) -> None:
    ips = sb.ips
    for c in sb.channels:
        for ip in (c.client_ip, c.server_ip):
            if ip not in ips:
                raise ReferentialError(f"channel {c.client_ip}->{c.server_ip}:{c.server_port}",
                                       f"{ip} is not a whitelisted endpoint")
    servers = {c.server_ip for c in sb.channels}
    for ip, ca, ioa in sb.datapoints:
        if ip not in servers:
            raise ReferentialError(f"datapoint {ip}/{ca}/{ioa}", f"{ip} is not a channel server")
    for node_id in sb.role_ops:
        if node_id not in {e.node_id for e in sb.endpoints}:
            raise ReferentialError(f"role_ops.{node_id}", "unknown endpoint node")


def import_rules(document: bytes | str | dict) -> SpecificationBase:
    if isinstance(document, (bytes, bytearray)):
        try:
            document = document.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError("$", f"not UTF-8: {exc}") from None
    if isinstance(document, str):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError("$", f"invalid JSON: {exc}") from None
    d = _obj(document, "$", {"format", "endpoints", "channels", "datapoints", "role_ops",
                             "max_rtt_ms", "protocol_windows", "domains", "checksum"}, {"source_model"})
    if d["format"] != FORMAT:
        raise SchemaError("$.format", f"expected {FORMAT!r}")
    stored = d["checksum"]
    computed = content_checksum(d)
    if stored != computed:
        raise ChecksumMismatch(stored, computed)

    endpoints = []
    for i, e in enumerate(_list(d["endpoints"], "$.endpoints")):
        p = f"$.endpoints[{i}]"
        e = _obj(e, p, {"mac", "ip", "node_id"}, set())
        endpoints.append(Endpoint(_mac(e["mac"], f"{p}.mac"), _ip(e["ip"], f"{p}.ip"), _str(e["node_id"], f"{p}.node_id")))
    channels = []
    for i, c in enumerate(_list(d["channels"], "$.channels")):
        p = f"$.channels[{i}]"
        c = _obj(c, p, {"client_ip", "server_ip", "server_port", "protocol"}, set())
        channels.append(ChannelRule(_ip(c["client_ip"], f"{p}.client_ip"), _ip(c["server_ip"], f"{p}.server_ip"),
                                    _int(c["server_port"], f"{p}.server_port", 1, 65535),
                                    _enum(Protocol, c["protocol"], f"{p}.protocol").value))
    datapoints = {}
    for i, r in enumerate(_list(d["datapoints"], "$.datapoints")):
        p = f"$.datapoints[{i}]"
        r = _obj(r, p, {"server_ip", "common_address", "ioa", "asdu_type", "direction"},
                 {"min_value", "max_value", "unit"})
        key = (_ip(r["server_ip"], f"{p}.server_ip"), _int(r["common_address"], f"{p}.common_address", 0, 0xFFFF),
               _int(r["ioa"], f"{p}.ioa", 0, 0xFFFFFF))
        if key in datapoints:
            raise SchemaError(p, "duplicate datapoint key")
        datapoints[key] = DatapointRule(_int(r["asdu_type"], f"{p}.asdu_type", 1, 255),
                                        _enum(Direction, r["direction"], f"{p}.direction"),
                                        _num(r.get("min_value"), f"{p}.min_value"),
                                        _num(r.get("max_value"), f"{p}.max_value"),
                                        r.get("unit", "") or "")
    role_ops = {}
    raw_roles = d["role_ops"]
    if not isinstance(raw_roles, dict):
        raise SchemaError("$.role_ops", "expected an object")
    for node_id, r in raw_roles.items():
        p = f"$.role_ops.{node_id}"
        r = _obj(r, p, {"role", "send"}, set())
        send = _list(r["send"], f"{p}.send")
        for op in send:
            if op not in (SEND_CONTROL, SEND_MONITOR, SEND_CONFIRMATION):
                raise SchemaError(f"{p}.send", f"unknown operation {op!r}")
        role_ops[node_id] = RoleOps(_str(r["role"], f"{p}.role"), frozenset(send))
    max_rtt = _num(d["max_rtt_ms"], "$.max_rtt_ms")
    if not max_rtt > 0:
        raise SchemaError("$.max_rtt_ms", "must be positive")
    windows = [_parse_window(w, f"$.protocol_windows[{i}]")
               for i, w in enumerate(_list(d["protocol_windows"], "$.protocol_windows"))]
    domains = _list(d["domains"], "$.domains")
    if any(x not in DOMAINS for x in domains):
        raise SchemaError("$.domains", f"expected a subset of {list(DOMAINS)}")

    sb = SpecificationBase(endpoints, channels, datapoints, role_ops, max_rtt, windows,
                           frozenset(domains), d.get("source_model", ""), stored)
    _check_references(sb)
    return sb


def rules_from_model(gim: Gim, kinds: Iterable[NodeKind] | None = None, **kwargs) -> SpecificationBase:
    """Convenience wrapper: compile with default config for the given kinds."""
    cfg = RuleConfig(frozenset(kinds) if kinds else RuleConfig().device_kinds_of_interest, **kwargs)
    return generate_rules(gim, cfg)

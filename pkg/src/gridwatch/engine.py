"""Deep packet inspection: the per-packet pipeline and per-connection state."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum

from .alerts import AlertDraft, AlertType
from .automata import (
    ERROR,
    ActivationLedger,
    Automaton,
    Direction,
    Role,
    SeqCounters,
    SeqViolation,
    State,
    WindowExceeded,
    check_sequence,
    map_frame,
    new_automaton,
    sync_counters,
)
from .codec import (
    TCP_ACK,
    TCP_SYN,
    Apdu,
    Asdu,
    FrameFormat,
    InformationObject,
    MalformedLayer,
    PacketLayers,
    RawPacket,
    decode_packet,
    split_apdus,
)
from .model import Direction as DataDirection
from .model import OpLimits
from .rules import (
    SEND_CONFIRMATION,
    SEND_CONTROL,
    SEND_MONITOR,
    ChannelRule,
    DatapointRule,
    SpecificationBase,
    _fallback_bounds,
)

log = logging.getLogger(__name__)

IEC104_PORT = 2404
WELL_KNOWN_PORTS = {
    20: "FTP", 21: "FTP", 22: "SSH", 23: "TELNET", 80: "HTTP", 102: "MMS",
    443: "HTTPS", 502: "MODBUS", 3389: "RDP", 20000: "DNP3",
}
RTT_EXPIRY_S = 10.0
MAX_OUT_OF_ORDER = 64
SEQ32 = 1 << 32

REASON_MAC = "MAC of this packet is unknown: {}"
REASON_IP = "IP of this packet is unknown: {}"
REASON_PORT = "One of the Ports of this packet is unknown: {}"
REASON_CONNECTION = "Connection does not exist in whitelisting data!"
REASON_OPERATION = "Send packet contains invalid operation for the endpoint!"
REASON_SETPOINT = "Active control command contains invalid setpoint!"


class Category(str, Enum):
    IEC104 = "IEC104"
    OTHER_WHITELISTED_PROTOCOL = "OTHER_WHITELISTED_PROTOCOL"
    IRRELEVANT = "IRRELEVANT"
    MALFORMED = "MALFORMED"


@dataclass(frozen=True)
class PacketCategory:
    value: Category
    protocol: str | None = None

    def __str__(self):
        return f"{self.value.value}({self.protocol})" if self.protocol else self.value.value


@dataclass
class InspectionReport:
    packet_index: int
    category: PacketCategory
    violations: list[AlertDraft] = field(default_factory=list)

    @property
    def conformant(self) -> bool:
        return not self.violations


def _seq_diff(a: int, b: int) -> int:
    """Signed distance from ``a`` to ``b`` in 32-bit TCP sequence space."""
    d = (b - a) % SEQ32
    return d - SEQ32 if d >= SEQ32 // 2 else d


class StreamBuffer:
    """In-order reassembly of one TCP direction."""

    def __init__(self):
        self.next_seq: int | None = None
        self.pending: dict[int, bytes] = {}
        self.residue = b""

    def feed(self, seq: int, payload: bytes, syn: bool = False) -> bytes:
        """Accept a segment and return the newly contiguous bytes."""
        if syn:
            self.next_seq = (seq + 1) % SEQ32
            self.pending.clear()
            self.residue = b""
            seq = self.next_seq
        if not payload:
            return b""
        if self.next_seq is None:
            self.next_seq = seq
        d = _seq_diff(self.next_seq, seq)
        if d > 0:
            self.pending[seq] = payload
            if len(self.pending) > MAX_OUT_OF_ORDER:
                # give up on the gap and resume at the earliest buffered segment
                self.next_seq = min(self.pending, key=lambda s: _seq_diff(self.next_seq, s))
                self.residue = b""
                return self._drain(b"")
            return b""
        if d < 0:
            payload = payload[-d:] if len(payload) > -d else b""
        if not payload:
            return b""
        self.next_seq = (self.next_seq + len(payload)) % SEQ32
        return self._drain(payload)

    def _drain(self, out: bytes) -> bytes:
        while self.pending:
            progressed = False
            for s in list(self.pending):
                d = _seq_diff(self.next_seq, s)
                chunk = self.pending[s]
                if d <= 0:
                    del self.pending[s]
                    tail = chunk[-d:] if len(chunk) > -d else b""
                    if tail:
                        out += tail
                        self.next_seq = (self.next_seq + len(tail)) % SEQ32
                        progressed = True
            if not progressed:
                break
        return out


class RttTracker:
    """Open data segments per direction, keyed by the sequence number that acknowledges them."""

    def __init__(self, expiry: float = RTT_EXPIRY_S):
        self.expiry = expiry
        self.open: dict[bool, dict[int, float]] = {True: {}, False: {}}

    def record(self, from_client: bool, end_seq: int, ts: float) -> None:
        # a retransmission keeps the first send time
        self.open[from_client].setdefault(end_seq, ts)

    def acknowledge(self, from_client: bool, ack: int, ts: float) -> float | None:
        """Apply an ACK sent by ``from_client``; returns the largest RTT in seconds it resolves."""
        peer = self.open[not from_client]
        worst = None
        for end_seq, sent in list(peer.items()):
            if ts - sent > self.expiry:
                del peer[end_seq]
            elif _seq_diff(end_seq, ack) >= 0:
                del peer[end_seq]
                rtt = ts - sent
                worst = rtt if worst is None or rtt > worst else worst
        return worst


@dataclass
class ConnectionObject:
    key: tuple[str, int, str, int]  # client_ip, client_port, server_ip, server_port
    channel_rule: ChannelRule
    mtu_automaton: Automaton
    rtu_automaton: Automaton
    mtu_counters: SeqCounters = field(default_factory=SeqCounters)
    rtu_counters: SeqCounters = field(default_factory=SeqCounters)
    rtt_tracker: RttTracker = field(default_factory=RttTracker)
    ledger: ActivationLedger = field(default_factory=ActivationLedger)
    streams: dict[bool, StreamBuffer] = field(default_factory=lambda: {True: StreamBuffer(), False: StreamBuffer()})
    synced: bool = True

    @property
    def server_ip(self) -> str:
        return self.key[2]

    @property
    def client_ip(self) -> str:
        return self.key[0]

    def sender_ip(self, from_client: bool) -> str:
        return self.key[0] if from_client else self.key[2]


def new_connection(key, channel_rule: ChannelRule, assume_started: bool = False) -> ConnectionObject:
    state = State.STARTED if assume_started else State.IDLE
    return ConnectionObject(key, channel_rule, new_automaton(Role.MTU, state), new_automaton(Role.RTU, state),
                            synced=not assume_started)


# ---------------------------------------------------------------- categorization

def categorize(layers: PacketLayers, sb: SpecificationBase) -> PacketCategory:
    if any(d.layer in ("ETH", "IP", "TCP") for d in layers.diagnostics):
        return PacketCategory(Category.MALFORMED)
    if layers.ip is not None and not layers.ip.checksum_ok:
        return PacketCategory(Category.MALFORMED)
    if layers.ip is None or layers.tcp is None:
        return PacketCategory(Category.IRRELEVANT)
    if not layers.tcp.checksum_ok:
        return PacketCategory(Category.MALFORMED)
    ip, tcp = layers.ip, layers.tcp
    ports = (tcp.src_port, tcp.dst_port)
    if any(p in sb.iec104_ports or p == IEC104_PORT for p in ports):
        return PacketCategory(Category.IEC104)
    hit = sb.channel_for(ip.src_ip, tcp.src_port, ip.dst_ip, tcp.dst_port)
    if hit is not None:
        return PacketCategory(Category.OTHER_WHITELISTED_PROTOCOL, hit[0].protocol)
    for p in ports:
        if p in WELL_KNOWN_PORTS:
            return PacketCategory(Category.OTHER_WHITELISTED_PROTOCOL, WELL_KNOWN_PORTS[p])
    if ip.src_ip in sb.ips or ip.dst_ip in sb.ips:
        # unclassified TCP touching a protected endpoint is never irrelevant
        return PacketCategory(Category.OTHER_WHITELISTED_PROTOCOL, "OTHER")
    return PacketCategory(Category.IRRELEVANT)


# ---------------------------------------------------------------- individual checks

def check_addresses(layers: PacketLayers, sb: SpecificationBase, info: str) -> list[AlertDraft]:
    """L2/L3 endpoint whitelist followed by the L4 port and channel match."""
    out = []
    eth, ip, tcp = layers.eth, layers.ip, layers.tcp
    for mac in (eth.src_mac, eth.dst_mac):
        if mac not in sb.macs:
            out.append(AlertDraft(AlertType.MAC_MISMATCH, REASON_MAC.format(mac), info))
    for addr in (ip.src_ip, ip.dst_ip):
        if addr not in sb.ips:
            out.append(AlertDraft(AlertType.IP_MISMATCH, REASON_IP.format(addr), info))
    ends = ((ip.src_ip, tcp.src_port), (ip.dst_ip, tcp.dst_port))
    for (addr, port), (peer, peer_port) in (ends, ends[::-1]):
        if not _port_known(sb, addr, port, peer, peer_port):
            out.append(AlertDraft(AlertType.PORT_MISMATCH, REASON_PORT.format(port), info))
            break
    if sb.channel_for(ip.src_ip, tcp.src_port, ip.dst_ip, tcp.dst_port) is None:
        out.append(AlertDraft(AlertType.NO_SUCH_CONNECTION, REASON_CONNECTION, info))
    return out


def _port_known(sb: SpecificationBase, ip: str, port: int, peer: str, peer_port: int) -> bool:
    if (ip, port) in sb.server_ports:
        return True
    # client ports are ephemeral: known when the address is a client of the peer's service
    clients = sb.clients_of.get((peer, peer_port))
    return clients is not None and ip in clients


def operation_class(asdu: Asdu) -> str | None:
    if asdu.type_id < 45:
        return SEND_MONITOR
    if asdu.cot in (6, 8):
        return SEND_CONTROL
    if asdu.cot in (7, 9, 10) or 44 <= asdu.cot <= 47:
        return SEND_CONFIRMATION
    return None


def check_setpoint(obj: InformationObject, dp_rule: DatapointRule,
                   asset_limits: OpLimits | None = None, info: str = "") -> AlertDraft | None:
    lo, hi = dp_rule.min_value, dp_rule.max_value
    if lo is None and hi is None and asset_limits is not None:
        lo, hi = _fallback_bounds(dp_rule.unit, asset_limits)
    value = obj.value
    if isinstance(value, bool) or value is None:
        return None
    if value != value or (lo is not None and value < lo) or (hi is not None and value > hi):
        return AlertDraft(AlertType.INVALID_SETPOINT, REASON_SETPOINT, info)
    return None


def check_datapoint(asdu: Asdu, conn: ConnectionObject, sb: SpecificationBase,
                    from_client: bool = False, info: str = "") -> list[AlertDraft]:
    out = []
    node = sb.node_by_ip.get(conn.sender_ip(from_client))
    ops = sb.role_ops.get(node)
    op = operation_class(asdu)
    if op is None or ops is None or op not in ops.send:
        out.append(AlertDraft(AlertType.INVALID_OPERATION, REASON_OPERATION, info))
    if "ASSET" not in sb.domains:
        return out
    server, ca = conn.server_ip, asdu.common_address
    if asdu.type_id >= 100:
        if ca != 0xFFFF and (server, ca) not in sb.common_addresses:
            out.append(AlertDraft(AlertType.DATAPOINT_MISMATCH,
                                  f"Common address of this packet is unknown: {ca}", info))
        return out
    for obj in asdu.objects:
        rule = sb.datapoints.get((server, ca, obj.ioa))
        if rule is None:
            out.append(AlertDraft(AlertType.DATAPOINT_MISMATCH,
                                  f"Data point of this packet is unknown: CA {ca} IOA {obj.ioa}", info))
            continue
        if rule.asdu_type != asdu.type_id:
            out.append(AlertDraft(AlertType.TYPE_MISMATCH,
                                  f"ASDU type {asdu.type_id} does not match data point IOA {obj.ioa} "
                                  f"(expected {rule.asdu_type})", info))
            continue
        if rule.direction is DataDirection.CONTROL:
            if asdu.cot == 6:
                draft = check_setpoint(obj, rule, info=info)
                if draft is not None:
                    out.append(draft)
        elif _out_of_range(obj.value, rule):
            out.append(AlertDraft(AlertType.DATAPOINT_MISMATCH,
                                  f"Value {obj.value:g} of data point IOA {obj.ioa} is outside "
                                  f"[{_fmt(rule.min_value)}, {_fmt(rule.max_value)}]", info))
    return out


def _fmt(v: float | None) -> str:
    return "-inf" if v is None else f"{v:g}"


def _out_of_range(value, rule: DatapointRule) -> bool:
    if isinstance(value, bool) or value is None:
        return False
    if value != value:
        return True
    return (rule.min_value is not None and value < rule.min_value) or (
        rule.max_value is not None and value > rule.max_value)


def check_rtt(conn: ConnectionObject, layers: PacketLayers, now: float,
              sb: SpecificationBase | None = None, max_rtt_ms: float | None = None,
              from_client: bool | None = None, info: str = "") -> AlertDraft | None:
    tcp = layers.tcp
    if from_client is None:
        from_client = layers.ip.src_ip == conn.client_ip and tcp.src_port == conn.key[1]
    limit = max_rtt_ms if max_rtt_ms is not None else sb.max_rtt_ms
    worst = None
    if tcp.has(TCP_ACK):
        worst = conn.rtt_tracker.acknowledge(from_client, tcp.ack, now)
    if tcp.payload:
        conn.rtt_tracker.record(from_client, (tcp.seq + len(tcp.payload)) % SEQ32, now)
    if worst is not None and worst * 1000.0 > limit:
        return AlertDraft(AlertType.RTT_EXCEEDED,
                          f"Round trip time of {worst * 1000.0:.1f} ms exceeds maximum of {limit:g} ms", info)
    return None


def check_protocol_window(category: PacketCategory, timestamp: float | datetime,
                          sb: SpecificationBase, info: str = "") -> AlertDraft | None:
    protocol = category.protocol or "OTHER"
    windows = [w for w in sb.protocol_windows if w.protocol == protocol]
    if not windows:
        return AlertDraft(AlertType.PROTOCOL_NOT_ALLOWED, f"Protocol {protocol} is not allowed", info)
    if isinstance(timestamp, datetime):
        when = timestamp
    else:
        when = datetime.fromtimestamp(timestamp, tz=timezone.utc).replace(tzinfo=None)
    if any(w.contains(when.weekday(), when.time()) for w in windows):
        return None
    return AlertDraft(AlertType.TIME_WINDOW_VIOLATION,
                      f"Protocol {protocol} used outside its permitted time window", info)


# ---------------------------------------------------------------- engine

ConnectionKey = tuple[str, int, str, int]


class Engine:
    """Stateful inspector; one instance owns one connection table."""

    def __init__(self, sb: SpecificationBase, assume_started: bool = False):
        self.sb = sb
        self.assume_started = assume_started
        self.table: dict[ConnectionKey, ConnectionObject] = {}
        self.packet_count = 0

    def inspect(self, raw: RawPacket | bytes, index: int | None = None) -> InspectionReport:
        if index is None:
            index = self.packet_count
        self.packet_count += 1
        if isinstance(raw, (bytes, bytearray)):
            raw = RawPacket(0, 0, bytes(raw))
        ts = raw.timestamp
        layers = decode_packet(raw)
        category = categorize(layers, self.sb)
        report = InspectionReport(index, category)
        v = report.violations
        if category.value is Category.IRRELEVANT:
            return report
        if category.value is Category.MALFORMED:
            problems = [d for d in layers.diagnostics if d.layer in ("ETH", "IP", "TCP")]
            if layers.ip is not None and not layers.ip.checksum_ok:
                problems.append(MalformedLayer("IP", 14, "header checksum mismatch"))
            if layers.tcp is not None and not layers.tcp.checksum_ok:
                problems.append(MalformedLayer("TCP", 34, "checksum mismatch"))
            reason = "; ".join(f"{d.layer} at offset {d.offset}: {d.reason}" for d in problems)
            v.append(AlertDraft(AlertType.MALFORMED_PACKET, f"Malformed packet: {reason}", layers.summary()))
        else:
            info = layers.summary()
            if "COMMUNICATION" in self.sb.domains:
                v.extend(check_addresses(layers, self.sb, info))
            if category.value is Category.OTHER_WHITELISTED_PROTOCOL:
                draft = check_protocol_window(category, ts, self.sb, info)
                if draft is not None:
                    v.append(draft)
            else:
                self._inspect_iec104(layers, ts, v)
        if v:
            report.violations = [replace(d, packet_index=index, packet_time=ts) for d in v]
        return report

    def _connection(self, layers: PacketLayers) -> tuple[ConnectionObject, bool] | None:
        ip, tcp = layers.ip, layers.tcp
        hit = self.sb.channel_for(ip.src_ip, tcp.src_port, ip.dst_ip, tcp.dst_port)
        if hit is None:
            return None
        rule, from_client = hit
        if from_client:
            key = (ip.src_ip, tcp.src_port, ip.dst_ip, tcp.dst_port)
        else:
            key = (ip.dst_ip, tcp.dst_port, ip.src_ip, tcp.src_port)
        conn = self.table.get(key)
        opening = tcp.has(TCP_SYN) and not tcp.has(TCP_ACK)
        if conn is None or opening:
            # a fresh handshake always starts the automata from IDLE
            conn = new_connection(key, rule, self.assume_started and not opening)
            self.table[key] = conn
        return conn, from_client

    def _inspect_iec104(self, layers: PacketLayers, ts: float, v: list[AlertDraft]) -> None:
        found = self._connection(layers)
        if found is None:
            return
        conn, from_client = found
        sb, tcp = self.sb, layers.tcp
        for out in conn.ledger.expire(ts):
            v.append(AlertDraft(AlertType.AUTOMATA_VIOLATION, out.reason, layers.summary()))
        if "COMMUNICATION" in sb.domains:
            draft = check_rtt(conn, layers, ts, sb, from_client=from_client, info=layers.summary())
            if draft is not None:
                v.append(draft)
        stream = conn.streams[from_client]
        data = stream.feed(tcp.seq, tcp.payload, syn=tcp.has(TCP_SYN))
        if not data:
            return
        buf = stream.residue + data
        frames, residue = split_apdus(buf)
        stream.residue = buf[len(buf) - residue:] if residue else b""
        for frame in frames:
            self._inspect_frame(conn, frame, from_client, layers, ts, v)

    def _inspect_frame(self, conn: ConnectionObject, frame, from_client: bool,
                       layers: PacketLayers, ts: float, v: list[AlertDraft]) -> None:
        info = layers.summary(frame)
        if isinstance(frame, Apdu) and frame.apci.format is not FrameFormat.U:
            self._check_sequence(conn, frame, from_client, info, v)
            asdu = frame.asdu
            if asdu is not None and asdu.supported:
                v.extend(check_datapoint(asdu, conn, self.sb, from_client, info))
                for out in conn.ledger.observe(asdu, from_client, ts):
                    v.append(AlertDraft(AlertType.AUTOMATA_VIOLATION, out.reason, info))
        mtu_dir = Direction.SENT if from_client else Direction.RECEIVED
        sym = map_frame(frame, mtu_dir)
        rtu_sym = sym if sym is ERROR else map_frame(frame, mtu_dir.flip())
        for automaton, s in ((conn.mtu_automaton, sym), (conn.rtu_automaton, rtu_sym)):
            out = automaton.step(s)
            if not out.ok:
                v.append(AlertDraft(AlertType.AUTOMATA_VIOLATION,
                                    f"{automaton.role.value} automaton: {out.reason}", info))

    def _check_sequence(self, conn: ConnectionObject, frame: Apdu, from_client: bool,
                        info: str, v: list[AlertDraft]) -> None:
        apci = frame.apci
        sender, receiver = ((conn.mtu_counters, conn.rtu_counters) if from_client
                            else (conn.rtu_counters, conn.mtu_counters))
        if not conn.synced:
            if apci.format is not FrameFormat.I:
                return
            sync_counters(sender, receiver, apci)
            conn.synced = True
        result = check_sequence(sender, apci, Direction.SENT)
        if not isinstance(result, SeqViolation):
            second = check_sequence(receiver, apci, Direction.RECEIVED)
            result = result or second
        if isinstance(result, (SeqViolation, WindowExceeded)):
            v.append(AlertDraft(AlertType.SEQUENCE_VIOLATION, str(result), info))

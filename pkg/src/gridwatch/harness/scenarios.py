"""Labeled scenario captures: normal operation, rogue endpoint and MITM injections."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..codec import Asdu, InformationObject, RawPacket, TCP_ACK, TCP_PSH, UFunction, encode_apdu, encode_packet, u_frame
from ..fixtures import read_fixture
from ..model import Direction, EdgeKind, Gim, NodeKind, Protocol, load_model
from ..rules import _fallback_bounds
from .labels import Label, LabeledCapture
from .simulator import BENIGN_TAG, Emitted, Host, Session

SCENARIOS = ("S1", "S2A", "S2B1", "S2B2")
EPOCH_S = 1649933229  # Thu 14.04.2022 10:47:09 UTC
EPHEMERAL = (49152, 65535)
MAX_UNIT = 16


class FixtureError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioParams:
    background_packets: int = 200
    rogue_packets: int = 115
    injections: int = 10
    rtt_ms: tuple[float, float] = (50.0, 180.0)
    start_s: int = EPOCH_S
    rogue_mac: str = "02:66:00:00:00:66"
    rogue_ip: str = "10.0.0.66"


@dataclass
class Outstation:
    """Simulated process state of one RTU."""

    node_id: str
    host: Host
    common_address: int
    monitor: dict[int, tuple[int, float | None, float | None]]  # ioa -> (type, lo, hi)
    control: dict[int, tuple[int, float | None, float | None]]
    values: dict[int, float | bool] = field(default_factory=dict)

    def walk(self, rng: random.Random) -> None:
        for ioa, (type_id, lo, hi) in self.monitor.items():
            if type_id == 1:
                if ioa not in self.values or rng.random() < 0.05:
                    self.values[ioa] = rng.random() < 0.9
                continue
            lo_, hi_ = (lo if lo is not None else -100.0), (hi if hi is not None else 100.0)
            v = self.values.get(ioa, rng.uniform(lo_, hi_))
            v += rng.gauss(0.0, 0.03 * (hi_ - lo_))
            self.values[ioa] = float(min(max(v, lo_), hi_))

    def asdu(self, ioa: int, cot: int) -> Asdu:
        type_id = self.monitor[ioa][0]
        value = self.values[ioa]
        return Asdu(type_id, cot, self.common_address, (InformationObject(ioa, value, 0),))

    def interrogation_responses(self) -> list[Asdu]:
        by_type: dict[int, list[InformationObject]] = {}
        for ioa in sorted(self.monitor):
            by_type.setdefault(self.monitor[ioa][0], []).append(InformationObject(ioa, self.values[ioa], 0))
        return [Asdu(t, 20, self.common_address, tuple(objs)) for t, objs in sorted(by_type.items())]


@dataclass
class Population:
    mtu_id: str
    mtu_mac: str
    mtu_ip: str
    outstations: list[Outstation]


def population(gim: Gim) -> Population:
    """MTU and RTUs reachable over IEC-104 channels of the model."""
    nodes = {n.id: n for n in gim.nodes}
    channels = [e.channel for e in gim.edges
                if e.kind is EdgeKind.COMM_CHANNEL and e.channel is not None and e.channel.protocol is Protocol.IEC104]
    mtus = sorted({c.client for c in channels if nodes[c.client].kind is NodeKind.MTU})
    if not mtus:
        raise FixtureError(f"model {gim.meta.model_id!r} has no MTU acting as IEC-104 client")
    mtu = nodes[mtus[0]]
    stations = []
    for c in sorted(channels, key=lambda c: c.server):
        node = nodes[c.server]
        if c.client != mtu.id or node.kind is not NodeKind.RTU:
            continue
        cas = sorted({dp.common_address for dp in node.data_points})
        if not cas:
            continue
        monitor, control = {}, {}
        for dp in node.data_points:
            if dp.common_address != cas[0]:
                continue
            lo, hi = dp.min_value, dp.max_value
            if lo is None and hi is None:
                lo, hi = _fallback_bounds(dp.unit, node.op_limits)
            target = monitor if dp.direction is Direction.MONITOR else control
            if dp.asdu_type in (1, 13, 36, 45, 50):
                target[dp.ioa] = (dp.asdu_type, lo, hi)
        if monitor:
            stations.append(Outstation(node.id, Host(node.mac, node.ip, c.server_port), cas[0], monitor, control))
    if not stations:
        raise FixtureError(f"model {gim.meta.model_id!r} has no RTU with monitored data points")
    return Population(mtu.id, mtu.mac, mtu.ip, stations)


def testbed_model() -> Gim:
    return load_model(read_fixture("testbed_gim.json"))


# ---------------------------------------------------------------- conversation script

class Conversation:
    """Drives one session with a packet budget counted over benign packets."""

    def __init__(self, session: Session, station: Outstation, rng: random.Random, budget: int,
                 counted=None):
        self.session = session
        self.station = station
        self.rng = rng
        self.budget = budget
        self.counted = counted or (lambda s: s.benign_count)

    @property
    def remaining(self) -> int:
        return self.budget - self.counted(self.session)

    def opening(self) -> None:
        self.station.walk(self.rng)
        self.session.handshake()
        self.session.startdt()
        self.session.interrogation(self.station.common_address, self.station.interrogation_responses())

    def unit(self, weights: dict[str, float]) -> None:
        kinds = sorted(weights)
        kind = self.rng.choices(kinds, [weights[k] for k in kinds])[0]
        st, s = self.station, self.session
        st.walk(self.rng)
        if kind == "spontaneous":
            s.spontaneous(st.asdu(self.rng.choice(sorted(st.monitor)), 3))
        elif kind == "interrogation":
            s.interrogation(st.common_address, st.interrogation_responses())
        elif kind == "testfr":
            s.testfr()
        elif kind == "s_exchange":
            s.s_exchange()
        elif kind == "command" and st.control:
            ioa = self.rng.choice(sorted(st.control))
            type_id, lo, hi = st.control[ioa]
            if type_id == 45:
                value = self.rng.random() < 0.5
            else:
                value = round(self.rng.uniform(max(lo, 0.0) if lo is not None else 0.0,
                                               hi if hi is not None else 1.0), 2)
            s.command(Asdu(type_id, 6, st.common_address, (InformationObject(ioa, value, 0),)))
        else:
            s.testfr()

    def fill(self) -> None:
        while self.remaining > 0:
            if self.remaining % 2:
                self.session.testfr()
            else:
                self.session.s_exchange()
        if self.remaining != 0:
            raise AssertionError(f"budget overshoot by {-self.remaining}")


BACKGROUND_MIX = {"spontaneous": 0.45, "interrogation": 0.1, "testfr": 0.15, "s_exchange": 0.1, "command": 0.2}
ROGUE_MIX = {"interrogation": 0.5, "spontaneous": 0.3, "testfr": 0.2}


def _split(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _ports(rng: random.Random, n: int, taken: set[int]) -> list[int]:
    out = []
    while len(out) < n:
        p = rng.randint(*EPHEMERAL)
        if p not in taken:
            taken.add(p)
            out.append(p)
    return out


def _merge(groups: list[list[Emitted]]) -> LabeledCapture:
    tagged = [(e.ts_us, g, i, e) for g, events in enumerate(groups) for i, e in enumerate(events)]
    tagged.sort(key=lambda x: x[:3])
    packets = [e.packet for *_, e in tagged]
    labels = [Label(i, e.malicious, e.tag) for i, (*_, e) in enumerate(tagged)]
    return LabeledCapture(packets, labels)


def _background(pop: Population, rng: random.Random, params: ScenarioParams, budget: int,
                taken_ports: set[int], injector=None, gap_budget=None) -> tuple[list[Session], list[Conversation]]:
    n = len(pop.outstations)
    budgets = _split(budget, n)
    ports = _ports(rng, n, taken_ports)
    sessions, convs = [], []
    for k, (station, b, port) in enumerate(zip(pop.outstations, budgets, ports)):
        start = params.start_s * 1_000_000 + k * 250_000
        s = Session(Host(pop.mtu_mac, pop.mtu_ip, port), station.host, rng, start, rtt_ms=params.rtt_ms)
        sessions.append(s)
        convs.append(Conversation(s, station, rng, b))
    for conv in convs:
        if conv.remaining < 2 * MAX_UNIT:
            raise FixtureError(f"background budget {budget} too small for {n} sessions")
        conv.opening()
        target = injector is not None and injector.target is conv.station
        while conv.remaining >= MAX_UNIT or (target and injector.left):
            if target and injector.left and injector.due(conv):
                injector.inject(conv)
            else:
                conv.unit(BACKGROUND_MIX)
        conv.fill()
    return sessions, convs


class Injector:
    """MITM injection of forged RTU measurements into one channel."""

    def __init__(self, kind: str, target: Outstation, rng: random.Random, count: int, unknown_ioas: list[int]):
        self.kind = kind
        self.target = target
        self.rng = rng
        self.left = count
        self.unknown_ioas = unknown_ioas

    def due(self, conv: Conversation) -> bool:
        # spread injections over the conversation, forcing them before the budget runs out
        return conv.remaining <= 2 * MAX_UNIT + 3 * self.left or self.rng.random() < 0.25

    def inject(self, conv: Conversation) -> None:
        st = self.target
        if self.kind == "S2B1":
            ioa = self.unknown_ioas[self.left - 1]
            value = st.values.get(1001, 0.0)
            asdu = Asdu(13, 3, st.common_address, (InformationObject(ioa, value, 0),))
        else:
            floats = sorted(i for i, (t, _, _) in st.monitor.items() if t in (13, 36))
            ioa = floats[0]
            type_id, lo, hi = st.monitor[ioa]
            last = st.values[ioa]
            noisy = last + self.rng.gauss(0.0, 0.01 * ((hi or 1.0) - (lo or 0.0)))
            value = float(min(max(noisy, lo if lo is not None else noisy), hi if hi is not None else noisy))
            asdu = Asdu(type_id, 3, st.common_address, (InformationObject(ioa, value, 0),))
        conv.session.spontaneous(asdu, malicious=True, tag=self.kind)
        self.left -= 1


def generate_scenario(scenario: str, seed: int, gim: Gim | None = None,
                      params: ScenarioParams | None = None) -> LabeledCapture:
    """Deterministic labeled capture for one scenario id and seed."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    params = params or ScenarioParams()
    pop = population(gim or testbed_model())
    rng = random.Random(f"{scenario}:{seed}")
    injection = scenario if scenario in ("S2B1", "S2B2") else None
    return _compose(pop, rng, params, rogue=scenario == "S2A", injection=injection)


def bulk_capture(seed: int, background: int = 9000, rogue: int = 700, injections: int = 300,
                 gim: Gim | None = None) -> LabeledCapture:
    """Large mixed capture: normal channels, a rogue endpoint and unknown-IOA injections."""
    params = ScenarioParams(background_packets=background, rogue_packets=rogue, injections=injections)
    pop = population(gim or testbed_model())
    rng = random.Random(f"bulk:{seed}")
    return _compose(pop, rng, params, rogue=rogue > 0, injection="S2B1" if injections else None)


def _compose(pop: Population, rng: random.Random, params: ScenarioParams,
             rogue: bool, injection: str | None) -> LabeledCapture:
    taken: set[int] = set()
    injector = None
    if injection is not None:
        target = pop.outstations[rng.randrange(len(pop.outstations))]
        for st in pop.outstations:
            st.walk(rng)
        known = set(target.monitor) | set(target.control)
        unknown: list[int] = []
        while len(unknown) < params.injections:
            ioa = rng.randint(3000, 0xFFFF)
            if ioa not in known and ioa not in unknown:
                unknown.append(ioa)
        injector = Injector(injection, target, rng, params.injections, unknown)
    sessions, _ = _background(pop, rng, params, params.background_packets, taken, injector)
    groups = [s.events for s in sessions]
    if rogue:
        groups.append(_rogue(pop, rng, params, taken).events)
    return _merge(groups)


def _rogue(pop: Population, rng: random.Random, params: ScenarioParams, taken: set[int]) -> Session:
    station = pop.outstations[rng.randrange(len(pop.outstations))]
    port = _ports(rng, 1, taken)[0]
    start = params.start_s * 1_000_000 + rng.randint(5_000_000, 20_000_000)
    s = Session(Host(params.rogue_mac, params.rogue_ip, port), station.host, rng, start,
                tag="S2A", malicious=True, rtt_ms=params.rtt_ms)
    conv = Conversation(s, station, rng, params.rogue_packets, counted=len)
    conv.opening()
    while conv.remaining >= MAX_UNIT:
        conv.unit(ROGUE_MIX)
    conv.fill()
    return s


# ---------------------------------------------------------------- bundled rogue-endpoint capture

GATEWAY_ROGUE = Host("02:42:ac:18:00:01", "173.24.0.3", 59478)
GATEWAY_SETPOINT_AT_S = 51.2
GATEWAY_TAG = "GATEWAY"


def gateway_model() -> Gim:
    return load_model(read_fixture("gateway_gim.json"))


def gateway_capture(seed: int = 1) -> LabeledCapture:
    """Rogue STARTDT through the gateway, then a legitimate channel whose RTU issues a setpoint."""
    pop = population(gateway_model())
    station = pop.outstations[0]
    rng = random.Random(f"gateway:{seed}")
    t0 = EPOCH_S * 1_000_000
    rogue_payload = encode_apdu(u_frame(UFunction.STARTDT_ACT))
    data = encode_packet(GATEWAY_ROGUE.mac, station.host.mac, GATEWAY_ROGUE.ip, station.host.ip,
                         GATEWAY_ROGUE.port, station.host.port, rng.randrange(1 << 32), rng.randrange(1 << 32),
                         TCP_PSH | TCP_ACK, rogue_payload, ident=rng.randrange(1 << 16))
    rogue = Emitted(t0, RawPacket(EPOCH_S, 0, data), True, GATEWAY_TAG)

    s = Session(Host(pop.mtu_mac, pop.mtu_ip, 50123), station.host, rng, t0 + 1_000_000)
    conv = Conversation(s, station, rng, 10 ** 6)
    conv.opening()
    setpoint_at = t0 + int(GATEWAY_SETPOINT_AT_S * 1_000_000)
    while s.t < setpoint_at - 3_000_000:
        conv.unit({"spontaneous": 0.6, "testfr": 0.4})
    s.t = setpoint_at - 1  # the next data segment of the RTU follows an idle gap
    s.idle_ms = (0.001, 0.001)
    ioa = min(station.control)
    type_id, lo, hi = station.control[ioa]
    forged = Asdu(type_id, 6, station.common_address, (InformationObject(ioa, float(hi) + 4.0, 0),))
    s.spontaneous(forged, malicious=True, tag=GATEWAY_TAG)
    return _merge([[rogue], s.events])

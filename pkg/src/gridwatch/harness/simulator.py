"""Ping-pong TCP model of one MTU-RTU conversation carrying IEC-104 frames.

Every data segment is acknowledged by the next packet of the peer, sent one
sampled round trip later. Before a side sends another data segment the peer's
pending acknowledgement is emitted as a pure ACK, so observed round trip
times are exactly the sampled ones.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from ..codec import (
    SEQ_MODULO,
    TCP_ACK,
    TCP_PSH,
    TCP_SYN,
    Asdu,
    InformationObject,
    RawPacket,
    UFunction,
    encode_apdu,
    encode_packet,
    i_frame,
    s_frame,
    u_frame,
)

BENIGN_TAG = "background"
WINDOW_W = 8


@dataclass(frozen=True)
class Host:
    mac: str
    ip: str
    port: int


@dataclass(frozen=True)
class Emitted:
    ts_us: int
    packet: RawPacket
    malicious: bool
    tag: str


class Session:
    def __init__(self, client: Host, server: Host, rng: random.Random, start_us: int = 0,
                 tag: str = BENIGN_TAG, malicious: bool = False,
                 rtt_ms: tuple[float, float] = (50.0, 180.0), idle_ms: tuple[float, float] = (200.0, 1500.0),
                 gap_ms: tuple[float, float] = (1.0, 5.0), w: int = WINDOW_W):
        self.hosts = {True: client, False: server}
        self.rng = rng
        self.t = start_us
        self.tag = tag
        self.malicious = malicious
        self.rtt_ms = rtt_ms
        self.idle_ms = idle_ms
        self.gap_ms = gap_ms
        self.w = w
        self.seq = {True: rng.randrange(1 << 32), False: rng.randrange(1 << 32)}
        self.ident = {True: rng.randrange(1 << 16), False: rng.randrange(1 << 16)}
        self.vs = {True: 0, False: 0}
        self.vr = {True: 0, False: 0}
        self.unacked_in = {True: 0, False: 0}  # I-frames received and not yet acknowledged
        self.awaiting_ack: bool | None = None  # side whose data segment is not yet TCP-acked
        self.events: list[Emitted] = []
        self.rtts_ms: list[float] = []

    # -------------------------------------------------------------- counting

    @property
    def benign_count(self) -> int:
        return sum(1 for e in self.events if not e.malicious)

    def __len__(self) -> int:
        return len(self.events)

    # -------------------------------------------------------------- transport

    def _sample(self, bounds: tuple[float, float]) -> int:
        return int(round(self.rng.uniform(*bounds) * 1000))

    def _emit(self, from_client: bool, flags: int, payload: bytes = b"",
              malicious: bool | None = None, tag: str | None = None) -> None:
        src, dst = self.hosts[from_client], self.hosts[not from_client]
        ack = self.seq[not from_client] if flags & TCP_ACK else 0
        data = encode_packet(src.mac, dst.mac, src.ip, dst.ip, src.port, dst.port,
                             self.seq[from_client], ack, flags, payload, ident=self.ident[from_client])
        self.ident[from_client] = (self.ident[from_client] + 1) & 0xFFFF
        self.seq[from_client] = (self.seq[from_client] + len(payload) + (1 if flags & TCP_SYN else 0)) % (1 << 32)
        if malicious is None:
            malicious = self.malicious
        packet = RawPacket(self.t // 1_000_000, (self.t % 1_000_000) * 1000, data)
        self.events.append(Emitted(self.t, packet, malicious, tag or self.tag))

    def _wait_rtt(self) -> None:
        d = self._sample(self.rtt_ms)
        self.rtts_ms.append(d / 1000.0)
        self.t += d

    def _before_send(self, from_client: bool, gap: tuple[float, float] | None) -> None:
        if self.awaiting_ack is (not from_client):
            self._wait_rtt()  # this segment is the acknowledgement
            return
        if self.awaiting_ack is from_client:
            self.pure_ack(not from_client)
        self.t += self._sample(gap or self.idle_ms)

    def pure_ack(self, from_client: bool) -> None:
        """The side ``from_client`` acknowledges the peer's outstanding data."""
        self._wait_rtt()
        self._emit(from_client, TCP_ACK)
        self.awaiting_ack = None

    def settle(self) -> None:
        if self.awaiting_ack is not None:
            self.pure_ack(not self.awaiting_ack)

    def handshake(self) -> None:
        self.t += self._sample(self.gap_ms)
        self._emit(True, TCP_SYN)
        self._wait_rtt()
        self._emit(False, TCP_SYN | TCP_ACK)
        self.t += self._sample(self.gap_ms)
        self._emit(True, TCP_ACK)
        self.awaiting_ack = None

    def send(self, from_client: bool, payload: bytes, gap: tuple[float, float] | None = None,
             malicious: bool | None = None, tag: str | None = None) -> None:
        self._before_send(from_client, gap)
        self._emit(from_client, TCP_PSH | TCP_ACK, payload, malicious, tag)
        self.awaiting_ack = from_client

    # -------------------------------------------------------------- IEC-104

    def u(self, from_client: bool, fn: UFunction, **kw) -> None:
        self.send(from_client, encode_apdu(u_frame(fn)), **kw)

    def s(self, from_client: bool, **kw) -> None:
        self.send(from_client, encode_apdu(s_frame(self.vr[from_client])), **kw)
        self.unacked_in[from_client] = 0

    def i(self, from_client: bool, asdu: Asdu, **kw) -> None:
        apdu = i_frame(self.vs[from_client], self.vr[from_client], asdu)
        self.send(from_client, encode_apdu(apdu), **kw)
        self.vs[from_client] = (self.vs[from_client] + 1) % SEQ_MODULO
        self.vr[not from_client] = (self.vr[not from_client] + 1) % SEQ_MODULO
        self.unacked_in[from_client] = 0
        self.unacked_in[not from_client] += 1
        if self.unacked_in[not from_client] >= self.w:
            self.s(not from_client)

    # -------------------------------------------------------------- conversation units

    def startdt(self) -> None:
        self.u(True, UFunction.STARTDT_ACT, gap=self.gap_ms)
        self.u(False, UFunction.STARTDT_CON)
        self.settle()

    def testfr(self) -> None:
        self.u(True, UFunction.TESTFR_ACT)
        self.u(False, UFunction.TESTFR_CON)
        self.settle()

    def s_exchange(self) -> None:
        self.s(True)
        self.settle()

    def interrogation(self, ca: int, responses: list[Asdu]) -> None:
        self.i(True, Asdu(100, 6, ca, (InformationObject(0, None, 20),)))
        self.i(False, Asdu(100, 7, ca, (InformationObject(0, None, 20),)))
        for asdu in responses:
            self.i(False, asdu, gap=self.gap_ms)
        self.i(False, Asdu(100, 10, ca, (InformationObject(0, None, 20),)), gap=self.gap_ms)
        self.settle()

    def spontaneous(self, asdu: Asdu, **kw) -> None:
        self.i(False, asdu, **kw)
        self.settle()

    def command(self, asdu: Asdu) -> None:
        self.i(True, asdu)
        self.i(False, Asdu(asdu.type_id, 7, asdu.common_address, asdu.objects))
        self.settle()

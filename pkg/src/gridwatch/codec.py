"""Ethernet / IPv4 / TCP / IEC 60870-5-104 packet codec.

Decoding never raises on bad input: problems are reported as
:class:`MalformedLayer` diagnostics on the returned :class:`PacketLayers`.
Only a small ASDU type subset is decoded into information objects; other
type ids keep their header fields and carry the object bytes as ``opaque``.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Union

START_BYTE = 0x68
MAX_APDU_LENGTH = 253
SEQ_MODULO = 32768

ETHERTYPE_IPV4 = 0x0800
IPPROTO_TCP = 6

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10

# type id -> encoded size of one information element (without IOA)
ELEMENT_SIZES = {
    1: 1,    # M_SP_NA_1 single-point, SIQ
    13: 5,   # M_ME_NC_1 short float + QDS
    36: 12,  # M_ME_TF_1 short float + QDS + CP56Time2a
    45: 1,   # C_SC_NA_1 single command, SCO
    50: 5,   # C_SE_NC_1 setpoint short float + QOS
    100: 1,  # C_IC_NA_1 interrogation, QOI
}
SUPPORTED_TYPES = frozenset(ELEMENT_SIZES)
FLOAT_TYPES = frozenset({13, 36, 50})
BOOL_TYPES = frozenset({1, 45})


class CodecError(ValueError):
    pass


class UnsupportedTypeId(CodecError):
    def __init__(self, type_id: int):
        super().__init__(f"ASDU type id {type_id} is not supported by the encoder")
        self.type_id = type_id


class FrameFormat(str, Enum):
    I = "I"  # noqa: E741
    S = "S"
    U = "U"


class UFunction(Enum):
    STARTDT_ACT = 0x07
    STARTDT_CON = 0x0B
    STOPDT_ACT = 0x13
    STOPDT_CON = 0x23
    TESTFR_ACT = 0x43
    TESTFR_CON = 0x83


_U_BY_CODE = {f.value: f for f in UFunction}


@dataclass(frozen=True)
class MalformedLayer:
    layer: str
    offset: int
    reason: str


@dataclass(frozen=True)
class Apci:
    format: FrameFormat
    send_seq: int | None = None
    recv_seq: int | None = None
    u_function: UFunction | None = None
    length: int = 4


@dataclass(frozen=True)
class InformationObject:
    ioa: int
    value: float | bool | None = None
    quality: int | None = None
    time_tag: bytes | None = None  # raw CP56Time2a, type 36 only


@dataclass(frozen=True)
class Asdu:
    type_id: int
    cot: int
    common_address: int
    objects: tuple[InformationObject, ...] = ()
    sequence_flag: bool = False
    num_objects: int | None = None
    originator: int = 0
    negative: bool = False
    test: bool = False
    opaque: bytes | None = None

    def __post_init__(self):
        if self.num_objects is None:
            object.__setattr__(self, "num_objects", len(self.objects))

    @property
    def supported(self) -> bool:
        return self.opaque is None


@dataclass(frozen=True)
class Apdu:
    apci: Apci
    asdu: Asdu | None = None

    @property
    def format(self) -> FrameFormat:
        return self.apci.format


Frame = Union[Apdu, MalformedLayer]


@dataclass(frozen=True)
class RawPacket:
    ts_sec: int
    ts_nsec: int
    data: bytes

    @property
    def timestamp(self) -> float:
        return self.ts_sec + self.ts_nsec / 1e9

    @classmethod
    def at(cls, timestamp: float, data: bytes) -> RawPacket:
        ns = round(timestamp * 1e9)
        return cls(ns // 1_000_000_000, ns % 1_000_000_000, data)


@dataclass(frozen=True)
class Ethernet:
    src_mac: str
    dst_mac: str
    ethertype: int


@dataclass(frozen=True)
class IPv4:
    src_ip: str
    dst_ip: str
    protocol: int
    checksum: int
    checksum_ok: bool
    ident: int = 0
    ttl: int = 64


@dataclass(frozen=True)
class Tcp:
    src_port: int
    dst_port: int
    seq: int
    ack: int
    flags: int
    window: int
    checksum: int
    checksum_ok: bool
    payload: bytes = b""

    def has(self, flag: int) -> bool:
        return bool(self.flags & flag)


@dataclass
class PacketLayers:
    eth: Ethernet | None = None
    ip: IPv4 | None = None
    tcp: Tcp | None = None
    frames: list[Frame] = field(default_factory=list)
    residue: int = 0
    diagnostics: list[MalformedLayer] = field(default_factory=list)

    @property
    def iec104(self) -> list[Apdu]:
        return [f for f in self.frames if isinstance(f, Apdu)]

    def summary(self, frame: Frame | None = None) -> str:
        """Layer chain such as ``ETH / IP / TCP / IEC104-U``.

        Without ``frame`` the first IEC-104 frame of the packet is described.
        """
        parts = []
        if self.eth is not None:
            parts.append("ETH")
        if self.ip is not None:
            parts.append("IP")
        if self.tcp is not None:
            parts.append("TCP")
        if frame is None and self.frames:
            frame = self.frames[0]
        if isinstance(frame, Apdu):
            parts.append(f"IEC104-{frame.apci.format.value}")
        return " / ".join(parts)


# ---------------------------------------------------------------- helpers

def mac_to_str(raw: bytes) -> str:
    return raw.hex(":")


def mac_to_bytes(mac: str) -> bytes:
    return bytes.fromhex(mac.replace(":", "").replace("-", ""))


def internet_checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _tcp_checksum(src_ip: bytes, dst_ip: bytes, segment: bytes) -> int:
    pseudo = src_ip + dst_ip + struct.pack("!BBH", 0, IPPROTO_TCP, len(segment))
    return internet_checksum(pseudo + segment)


# ---------------------------------------------------------------- IEC-104

def _decode_elements(type_id: int, data: bytes, offset: int, ioa: int) -> InformationObject:
    if type_id in BOOL_TYPES:
        b = data[offset]
        return InformationObject(ioa, bool(b & 0x01), b & 0xFE)
    if type_id == 100:
        return InformationObject(ioa, None, data[offset])
    value = struct.unpack_from("<f", data, offset)[0]
    quality = data[offset + 4]
    time_tag = bytes(data[offset + 5:offset + 12]) if type_id == 36 else None
    return InformationObject(ioa, value, quality, time_tag)


def decode_asdu(data: bytes) -> Asdu:
    """Decode ASDU bytes; raises :class:`CodecError` on inconsistent layout."""
    if len(data) < 6:
        raise CodecError("ASDU shorter than its 6-byte header")
    type_id = data[0]
    num = data[1] & 0x7F
    sq = bool(data[1] & 0x80)
    cot = data[2] & 0x3F
    negative = bool(data[2] & 0x40)
    test = bool(data[2] & 0x80)
    originator = data[3]
    common_address = data[4] | (data[5] << 8)
    body = data[6:]
    if type_id not in SUPPORTED_TYPES:
        return Asdu(type_id, cot, common_address, (), sq, num, originator,
                    negative, test, opaque=bytes(body))
    if num == 0:
        raise CodecError("ASDU declares zero information objects")
    size = ELEMENT_SIZES[type_id]
    expected = 3 + num * size if sq else num * (3 + size)
    if len(body) != expected:
        raise CodecError(f"ASDU body is {len(body)} bytes, type {type_id} x{num} needs {expected}")
    objects = []
    if sq:
        base = body[0] | (body[1] << 8) | (body[2] << 16)
        for i in range(num):
            objects.append(_decode_elements(type_id, body, 3 + i * size, (base + i) & 0xFFFFFF))
    else:
        step = 3 + size
        for i in range(num):
            o = i * step
            ioa = body[o] | (body[o + 1] << 8) | (body[o + 2] << 16)
            objects.append(_decode_elements(type_id, body, o + 3, ioa))
    return Asdu(type_id, cot, common_address, tuple(objects), sq, num, originator, negative, test)


def _encode_element(type_id: int, obj: InformationObject) -> bytes:
    quality = obj.quality or 0
    if type_id in BOOL_TYPES:
        return bytes([(quality & 0xFE) | (1 if obj.value else 0)])
    if type_id == 100:
        return bytes([quality & 0xFF])
    out = struct.pack("<fB", float(obj.value or 0.0), quality & 0xFF)
    if type_id == 36:
        tag = obj.time_tag or bytes(7)
        if len(tag) != 7:
            raise CodecError("CP56Time2a time tag must be 7 bytes")
        out += tag
    return out


def encode_asdu(asdu: Asdu) -> bytes:
    if asdu.type_id not in SUPPORTED_TYPES:
        raise UnsupportedTypeId(asdu.type_id)
    n = len(asdu.objects)
    if not 1 <= n <= 127 or asdu.num_objects != n:
        raise CodecError(f"ASDU must carry 1..127 objects matching num_objects, got {n}")
    out = bytearray([
        asdu.type_id,
        (0x80 if asdu.sequence_flag else 0) | n,
        (0x80 if asdu.test else 0) | (0x40 if asdu.negative else 0) | (asdu.cot & 0x3F),
        asdu.originator & 0xFF,
        asdu.common_address & 0xFF,
        (asdu.common_address >> 8) & 0xFF,
    ])
    if asdu.sequence_flag:
        base = asdu.objects[0].ioa
        for i, obj in enumerate(asdu.objects):
            if obj.ioa != (base + i) & 0xFFFFFF:
                raise CodecError("sequence ASDU requires consecutive IOAs")
        out += base.to_bytes(3, "little")
        for obj in asdu.objects:
            out += _encode_element(asdu.type_id, obj)
    else:
        for obj in asdu.objects:
            out += obj.ioa.to_bytes(3, "little")
            out += _encode_element(asdu.type_id, obj)
    return bytes(out)


def encode_apdu(apdu: Apdu) -> bytes:
    """Serialize an APDU including start byte and length field."""
    apci = apdu.apci
    if apci.format is FrameFormat.U:
        ctrl = bytes([apci.u_function.value, 0, 0, 0])
        body = b""
    elif apci.format is FrameFormat.S:
        ctrl = bytes([0x01, 0x00]) + ((apci.recv_seq % SEQ_MODULO) << 1).to_bytes(2, "little")
        body = b""
    else:
        if apdu.asdu is None:
            raise CodecError("I-frame requires an ASDU")
        ctrl = ((apci.send_seq % SEQ_MODULO) << 1).to_bytes(2, "little") + \
            ((apci.recv_seq % SEQ_MODULO) << 1).to_bytes(2, "little")
        body = encode_asdu(apdu.asdu)
    length = 4 + len(body)
    if length > MAX_APDU_LENGTH:
        raise CodecError(f"APDU length {length} exceeds {MAX_APDU_LENGTH}")
    if apci.length != length:
        raise CodecError(f"APCI length field {apci.length} does not match encoded length {length}")
    return bytes([START_BYTE, length]) + ctrl + body


def u_frame(function: UFunction) -> Apdu:
    return Apdu(Apci(FrameFormat.U, u_function=function))


def s_frame(recv_seq: int) -> Apdu:
    return Apdu(Apci(FrameFormat.S, recv_seq=recv_seq))


def i_frame(send_seq: int, recv_seq: int, asdu: Asdu) -> Apdu:
    length = 4 + len(encode_asdu(asdu))
    return Apdu(Apci(FrameFormat.I, send_seq=send_seq, recv_seq=recv_seq, length=length), asdu)


def _decode_control(ctrl: bytes, length: int, asdu_bytes: bytes) -> Apdu:
    c0, c1, c2, c3 = ctrl
    if c0 & 0x01 == 0:
        if c2 & 0x01:
            raise CodecError("I-frame receive sequence field has bit 0 set")
        if length < 10:
            raise CodecError("I-frame without a complete ASDU")
        ssn = (c0 | (c1 << 8)) >> 1
        rsn = (c2 | (c3 << 8)) >> 1
        return Apdu(Apci(FrameFormat.I, ssn, rsn, length=length), decode_asdu(asdu_bytes))
    if length != 4:
        raise CodecError(f"{'S' if c0 & 0x03 == 0x01 else 'U'}-frame with length {length}")
    if c0 & 0x03 == 0x01:
        if c0 != 0x01 or c1 != 0 or c2 & 0x01:
            raise CodecError("S-frame control field has reserved bits set")
        return Apdu(Apci(FrameFormat.S, recv_seq=(c2 | (c3 << 8)) >> 1))
    function = _U_BY_CODE.get(c0)
    if function is None or c1 or c2 or c3:
        raise CodecError(f"U-frame control field {ctrl.hex()} is not a single function")
    return Apdu(Apci(FrameFormat.U, u_function=function))


def split_apdus(data: bytes, base_offset: int = 0) -> tuple[list[Frame], int]:
    """Split a byte stream into APDUs at start-byte/length boundaries.

    Returns the frames in wire order and the length of a trailing partial
    frame (residue) that the caller may keep for the next segment.
    """
    frames: list[Frame] = []
    pos = 0
    n = len(data)
    while pos < n:
        if data[pos] != START_BYTE:
            frames.append(MalformedLayer("IEC104", base_offset + pos,
                                         f"expected start byte 0x68, got 0x{data[pos]:02x}"))
            return frames, 0
        if n - pos < 2:
            return frames, n - pos
        length = data[pos + 1]
        end = pos + 2 + length
        if length < 4:
            if end > n:
                return frames, n - pos
            frames.append(MalformedLayer("IEC104", base_offset + pos, f"APCI length {length} below 4"))
            pos = end
            continue
        if end > n:
            return frames, n - pos
        try:
            frames.append(_decode_control(data[pos + 2:pos + 6], length, data[pos + 6:end]))
        except CodecError as exc:
            frames.append(MalformedLayer("IEC104", base_offset + pos, str(exc)))
        pos = end
    return frames, 0


# ---------------------------------------------------------------- link/net/transport

def decode_packet(raw: RawPacket | bytes) -> PacketLayers:
    data = raw.data if isinstance(raw, RawPacket) else raw
    layers = PacketLayers()
    if len(data) < 14:
        layers.diagnostics.append(MalformedLayer("ETH", 0, "frame shorter than Ethernet header"))
        return layers
    ethertype = struct.unpack_from("!H", data, 12)[0]
    layers.eth = Ethernet(mac_to_str(data[6:12]), mac_to_str(data[0:6]), ethertype)
    if ethertype != ETHERTYPE_IPV4:
        return layers

    off = 14
    if len(data) < off + 20:
        layers.diagnostics.append(MalformedLayer("IP", off, "truncated IPv4 header"))
        return layers
    vihl = data[off]
    ihl = (vihl & 0x0F) * 4
    if vihl >> 4 != 4 or ihl < 20 or len(data) < off + ihl:
        layers.diagnostics.append(MalformedLayer("IP", off, "invalid IPv4 version or header length"))
        return layers
    total_len = struct.unpack_from("!H", data, off + 2)[0]
    if total_len < ihl or off + total_len > len(data):
        layers.diagnostics.append(MalformedLayer("IP", off + 2, f"IPv4 total length {total_len} out of bounds"))
        return layers
    header = data[off:off + ihl]
    src_raw = header[12:16]
    dst_raw = header[16:20]
    ip_ok = internet_checksum(header) == 0
    layers.ip = IPv4(socket.inet_ntoa(src_raw), socket.inet_ntoa(dst_raw), header[9],
                     struct.unpack_from("!H", header, 10)[0], ip_ok,
                     struct.unpack_from("!H", header, 4)[0], header[8])
    if not ip_ok:
        layers.diagnostics.append(MalformedLayer("IP", off + 10, "IPv4 header checksum mismatch"))
    if header[9] != IPPROTO_TCP:
        return layers

    seg_off = off + ihl
    segment = data[seg_off:off + total_len]
    if len(segment) < 20:
        layers.diagnostics.append(MalformedLayer("TCP", seg_off, "truncated TCP header"))
        return layers
    sport, dport, seq, ack, doff, flags, window, csum = struct.unpack_from("!HHIIBBHH", segment, 0)
    thl = (doff >> 4) * 4
    if thl < 20 or thl > len(segment):
        layers.diagnostics.append(MalformedLayer("TCP", seg_off + 12, f"TCP data offset {thl} invalid"))
        return layers
    tcp_ok = _tcp_checksum(src_raw, dst_raw, segment) == 0
    payload = bytes(segment[thl:])
    layers.tcp = Tcp(sport, dport, seq, ack, flags, window, csum, tcp_ok, payload)
    if not tcp_ok:
        layers.diagnostics.append(MalformedLayer("TCP", seg_off + 16, "TCP checksum mismatch"))

    if payload and payload[0] == START_BYTE:
        frames, residue = split_apdus(payload)
        layers.frames = frames
        layers.residue = residue
        layers.diagnostics.extend(f for f in frames if isinstance(f, MalformedLayer))
    return layers


def encode_packet(src_mac: str, dst_mac: str, src_ip: str, dst_ip: str,
                  src_port: int, dst_port: int, seq: int, ack: int, flags: int,
                  payload: bytes = b"", ident: int = 0, window: int = 8192, ttl: int = 64) -> bytes:
    """Build an Ethernet II / IPv4 / TCP frame with valid checksums."""
    src_raw = socket.inet_aton(src_ip)
    dst_raw = socket.inet_aton(dst_ip)
    tcp_hdr = struct.pack("!HHIIBBHHH", src_port, dst_port, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
                          5 << 4, flags, window, 0, 0)
    csum = _tcp_checksum(src_raw, dst_raw, tcp_hdr + payload)
    tcp_hdr = tcp_hdr[:16] + struct.pack("!H", csum) + tcp_hdr[18:]
    total = 20 + len(tcp_hdr) + len(payload)
    ip_hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, ident & 0xFFFF, 0x4000, ttl,
                         IPPROTO_TCP, 0, src_raw, dst_raw)
    ip_hdr = ip_hdr[:10] + struct.pack("!H", internet_checksum(ip_hdr)) + ip_hdr[12:]
    eth = mac_to_bytes(dst_mac) + mac_to_bytes(src_mac) + struct.pack("!H", ETHERTYPE_IPV4)
    return eth + ip_hdr + tcp_hdr + payload

"""Classic libpcap capture files (micro- and nanosecond variants, Ethernet link type)."""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

from .codec import RawPacket

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D
LINKTYPE_ETHERNET = 1


class CaptureError(Exception):
    pass


def _open(source) -> BinaryIO:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return io.BytesIO(bytes(source))
    if isinstance(source, (str, Path)):
        return open(source, "rb")
    return source


def iter_pcap(source) -> Iterator[RawPacket]:
    """Yield packets from a pcap file path, bytes, or binary stream."""
    fp = _open(source)
    try:
        header = fp.read(24)
        if len(header) < 24:
            raise CaptureError("capture shorter than pcap global header")
        magic_le = struct.unpack("<I", header[:4])[0]
        for endian in ("<", ">"):
            magic = struct.unpack(endian + "I", header[:4])[0]
            if magic in (MAGIC_USEC, MAGIC_NSEC):
                break
        else:
            raise CaptureError(f"unknown pcap magic 0x{magic_le:08x}")
        nsec = magic == MAGIC_NSEC
        linktype = struct.unpack(endian + "I", header[20:24])[0]
        if linktype != LINKTYPE_ETHERNET:
            raise CaptureError(f"unsupported link type {linktype}")
        rec = struct.Struct(endian + "IIII")
        while True:
            head = fp.read(16)
            if not head:
                return
            if len(head) < 16:
                raise CaptureError("truncated pcap record header")
            sec, frac, incl, _orig = rec.unpack(head)
            data = fp.read(incl)
            if len(data) < incl:
                raise CaptureError("truncated pcap record body")
            yield RawPacket(sec, frac if nsec else frac * 1000, data)
    finally:
        if fp is not source:
            fp.close()


def read_pcap(source) -> list[RawPacket]:
    return list(iter_pcap(source))


def write_pcap(packets: Iterable[RawPacket], sink=None, nanosecond: bool = False) -> bytes:
    """Serialize packets as a little-endian classic pcap.

    Returns the bytes; also writes them to ``sink`` (path or stream) if given.
    """
    out = bytearray(struct.pack("<IHHiIII", MAGIC_NSEC if nanosecond else MAGIC_USEC,
                                2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
    for p in packets:
        frac = p.ts_nsec if nanosecond else p.ts_nsec // 1000
        out += struct.pack("<IIII", p.ts_sec, frac, len(p.data), len(p.data))
        out += p.data
    blob = bytes(out)
    if isinstance(sink, (str, Path)):
        Path(sink).write_bytes(blob)
    elif sink is not None:
        sink.write(blob)
    return blob

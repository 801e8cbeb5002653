"""Explainable alerts: numbering, threat levels, and the INI-style alert log."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from datetime import datetime, timedelta
from enum import Enum
from typing import Callable, Iterable, TextIO

TIMESTAMP_FORMAT = "%d.%m.%Y %H:%M:%S"


class AlertType(str, Enum):
    IP_MISMATCH = "IP_MISMATCH"
    MAC_MISMATCH = "MAC_MISMATCH"
    PORT_MISMATCH = "PORT_MISMATCH"
    NO_SUCH_CONNECTION = "NO_SUCH_CONNECTION"
    DATAPOINT_MISMATCH = "DATAPOINT_MISMATCH"
    TYPE_MISMATCH = "TYPE_MISMATCH"
    INVALID_OPERATION = "INVALID_OPERATION"
    INVALID_SETPOINT = "INVALID_SETPOINT"
    SEQUENCE_VIOLATION = "SEQUENCE_VIOLATION"
    AUTOMATA_VIOLATION = "AUTOMATA_VIOLATION"
    RTT_EXCEEDED = "RTT_EXCEEDED"
    PROTOCOL_NOT_ALLOWED = "PROTOCOL_NOT_ALLOWED"
    TIME_WINDOW_VIOLATION = "TIME_WINDOW_VIOLATION"
    MALFORMED_PACKET = "MALFORMED_PACKET"


class ThreatLevel(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


THREAT_LEVELS = {t: ThreatLevel.HIGH for t in AlertType}
THREAT_LEVELS[AlertType.RTT_EXCEEDED] = ThreatLevel.LOW
THREAT_LEVELS[AlertType.MALFORMED_PACKET] = ThreatLevel.MEDIUM


class SinkError(OSError):
    pass


@dataclass(frozen=True)
class AlertDraft:
    alert_type: AlertType
    reason: str
    packet_info: str
    packet_index: int = -1
    packet_time: float = 0.0


@dataclass(frozen=True)
class Alert:
    id: int
    alert_type: AlertType
    threat_level: ThreatLevel
    timestamp: datetime
    alert_reason: str
    packet_info: str
    packet_index: int = -1

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "packet_index": self.packet_index,
            "alert_type": self.alert_type.value,
            "threat_level": self.threat_level.value,
            "reason": self.alert_reason,
        }


Clock = Callable[[AlertDraft], datetime]


def wall_clock(_draft: AlertDraft) -> datetime:
    return datetime.now().replace(microsecond=0)


class FixedClock:
    """Deterministic clock: a fixed base plus each packet's offset from the first packet."""

    def __init__(self, base: datetime):
        self.base = base
        self._origin: float | None = None

    @classmethod
    def parse(cls, spec: str) -> FixedClock:
        text = spec[len("fixed:"):] if spec.startswith("fixed:") else spec
        return cls(datetime.strptime(text.strip(), TIMESTAMP_FORMAT))

    def __call__(self, draft: AlertDraft) -> datetime:
        if self._origin is None:
            self._origin = draft.packet_time
        return self.base + timedelta(seconds=int(draft.packet_time - self._origin))


class AlertGenerator:
    """Single id allocator; converts drafts into numbered alerts."""

    def __init__(self, clock: Clock = wall_clock):
        self.clock = clock
        self.next_id = 0

    def emit(self, draft: AlertDraft) -> Alert:
        alert = Alert(self.next_id, draft.alert_type, THREAT_LEVELS[draft.alert_type],
                      self.clock(draft), draft.reason, draft.packet_info, draft.packet_index)
        self.next_id += 1
        return alert


def format_alert(alert: Alert) -> str:
    return (
        f"[ALERT_{alert.id}]\n"
        f"alert_type = {alert.alert_type.value}\n"
        f"threat_level = {alert.threat_level.value}\n"
        f"timestamp = {alert.timestamp.strftime(TIMESTAMP_FORMAT)}\n"
        f"alert_reason = {alert.alert_reason}\n"
        f"packet_info = {alert.packet_info}\n"
    )


class AlertLog:
    """Streaming writer for the alert log and its companion JSON-lines stream."""

    def __init__(self, log: TextIO | None = None, stream: TextIO | None = None):
        self.log = log
        self.stream = stream
        self.count = 0
        self.bytes_written = 0

    def write(self, alert: Alert) -> None:
        text = ("\n" if self.count else "") + format_alert(alert)
        try:
            if self.log is not None:
                self.log.write(text)
            if self.stream is not None:
                self.stream.write(json.dumps(alert.to_record(), sort_keys=True) + "\n")
        except OSError as exc:
            raise SinkError(str(exc)) from exc
        self.count += 1
        self.bytes_written += len(text.encode("utf-8"))


def render_log(alerts: Iterable[Alert]) -> str:
    return "\n".join(format_alert(a) for a in alerts)


def write_log(alerts: Iterable[Alert], sink: TextIO) -> int:
    """Write alerts as INI-style sections; returns the number of bytes written."""
    text = render_log(alerts)
    try:
        sink.write(text)
    except OSError as exc:
        raise SinkError(str(exc)) from exc
    return len(text.encode("utf-8"))


_SECTION_RE = re.compile(r"^\[ALERT_(\d+)\]$")


def parse_log(text: str) -> list[Alert]:
    alerts = []
    current: dict | None = None

    def close():
        if current is not None:
            alerts.append(Alert(
                current["id"], AlertType(current["alert_type"]), ThreatLevel(current["threat_level"]),
                datetime.strptime(current["timestamp"], TIMESTAMP_FORMAT),
                current["alert_reason"], current["packet_info"]))

    for lineno, line in enumerate(text.split("\n"), 1):
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            close()
            current = {"id": int(m.group(1))}
            continue
        if current is None or " = " not in line:
            raise ValueError(f"line {lineno}: unexpected content {line!r}")
        key, value = line.split(" = ", 1)
        current[key] = value
    close()
    return alerts


def read_alert_stream(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]

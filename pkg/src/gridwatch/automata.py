"""Role-based Mealy automata and sequence counters for IEC-104 flow conformance.

Each monitored connection runs one automaton per endpoint role. Frames are
first mapped to direction-prefixed input symbols (relative to the endpoint
that owns the automaton); every (state, symbol) pair has exactly one
transition, and undefined protocol behaviour is a self-loop that outputs
INVALID.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .codec import Apci, Apdu, Asdu, Frame, FrameFormat, MalformedLayer, PacketLayers, SEQ_MODULO, UFunction


class Direction(str, Enum):
    SENT = "SENT"
    RECEIVED = "RECEIVED"

    def flip(self) -> Direction:
        return Direction.RECEIVED if self is Direction.SENT else Direction.SENT


class SymbolKind(str, Enum):
    STARTDT_ACT = "STARTDT_ACT"
    STARTDT_CON = "STARTDT_CON"
    STOPDT_ACT = "STOPDT_ACT"
    STOPDT_CON = "STOPDT_CON"
    TESTFR_ACT = "TESTFR_ACT"
    TESTFR_CON = "TESTFR_CON"
    I_FRAME = "I_FRAME"
    S_FRAME = "S_FRAME"


@dataclass(frozen=True)
class InputSymbol:
    direction: Direction | None
    kind: SymbolKind | None  # None together with direction None is the error symbol

    @property
    def is_error(self) -> bool:
        return self.kind is None

    def mirrored(self) -> InputSymbol:
        if self.is_error:
            return self
        return InputSymbol(self.direction.flip(), self.kind)

    def __str__(self):
        return "ERROR" if self.is_error else f"{self.direction.value}_{self.kind.value}"


ERROR = InputSymbol(None, None)
ALPHABET: tuple[InputSymbol, ...] = tuple(
    InputSymbol(d, k) for k in SymbolKind for d in Direction
) + (ERROR,)
_SYMBOLS = {(s.direction, s.kind): s for s in ALPHABET}


def symbol(direction: Direction, kind: SymbolKind) -> InputSymbol:
    return _SYMBOLS[(direction, kind)]


class Role(str, Enum):
    MTU = "MTU"
    RTU = "RTU"


class State(str, Enum):
    IDLE = "IDLE"
    START_PENDING = "START_PENDING"
    STARTED = "STARTED"
    STOP_PENDING = "STOP_PENDING"


@dataclass(frozen=True)
class Output:
    kind: str  # "VALID" | "INVALID" | "SUSPICIOUS"
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.kind == "VALID"


VALID = Output("VALID")


def invalid(reason: str) -> Output:
    return Output("INVALID", reason)


def suspicious(reason: str) -> Output:
    return Output("SUSPICIOUS", reason)


# ---------------------------------------------------------------- mapper

_U_KINDS = {
    UFunction.STARTDT_ACT: SymbolKind.STARTDT_ACT,
    UFunction.STARTDT_CON: SymbolKind.STARTDT_CON,
    UFunction.STOPDT_ACT: SymbolKind.STOPDT_ACT,
    UFunction.STOPDT_CON: SymbolKind.STOPDT_CON,
    UFunction.TESTFR_ACT: SymbolKind.TESTFR_ACT,
    UFunction.TESTFR_CON: SymbolKind.TESTFR_CON,
}


def map_frame(frame: Frame, direction: Direction) -> InputSymbol:
    if isinstance(frame, MalformedLayer):
        return ERROR
    fmt = frame.apci.format
    if fmt is FrameFormat.U:
        return symbol(direction, _U_KINDS[frame.apci.u_function])
    if fmt is FrameFormat.S:
        return symbol(direction, SymbolKind.S_FRAME)
    if frame.asdu is None or not frame.asdu.supported:
        return ERROR
    return symbol(direction, SymbolKind.I_FRAME)


def map_frames(frames: Iterable[Frame], direction: Direction) -> list[InputSymbol]:
    return [map_frame(f, direction) for f in frames]


def map_packet(layers: PacketLayers, direction: Direction) -> list[InputSymbol]:
    """One symbol per IEC-104 frame of the packet, in wire order."""
    return map_frames(layers.frames, direction)


# ---------------------------------------------------------------- transition tables

Transition = tuple[State, Output]

_S, _R = Direction.SENT, Direction.RECEIVED
_K = SymbolKind


def _default_reason(state: State, sym: InputSymbol) -> str:
    if sym.is_error:
        return "unmappable frame"
    own = sym.direction is _S
    k = sym.kind
    if k in (_K.I_FRAME, _K.S_FRAME):
        if state in (State.IDLE, State.START_PENDING):
            return "data transfer before STARTDT"
        return "I-frame sent by controlling station after STOPDT_ACT"
    if k is _K.STARTDT_ACT:
        if not own:
            return "STARTDT_ACT initiated by controlled station"
        return "STARTDT_ACT while data transfer is already starting or active"
    if k is _K.STOPDT_ACT:
        if not own:
            return "STOPDT_ACT initiated by controlled station"
        return "STOPDT_ACT while data transfer is not active"
    if k is _K.STARTDT_CON:
        return "STARTDT_CON without pending STARTDT_ACT"
    if k is _K.STOPDT_CON:
        return "STOPDT_CON without pending STOPDT_ACT"
    return "undefined transition"


def _build_mtu_table() -> dict[tuple[State, InputSymbol], Transition]:
    valid: dict[tuple[State, InputSymbol], State] = {}
    for state in State:
        for d in Direction:
            valid[(state, symbol(d, _K.TESTFR_ACT))] = state
            valid[(state, symbol(d, _K.TESTFR_CON))] = state
    valid[(State.IDLE, symbol(_S, _K.STARTDT_ACT))] = State.START_PENDING
    valid[(State.START_PENDING, symbol(_R, _K.STARTDT_CON))] = State.STARTED
    for d in Direction:
        valid[(State.STARTED, symbol(d, _K.I_FRAME))] = State.STARTED
        valid[(State.STARTED, symbol(d, _K.S_FRAME))] = State.STARTED
        valid[(State.STOP_PENDING, symbol(d, _K.S_FRAME))] = State.STOP_PENDING
    valid[(State.STARTED, symbol(_S, _K.STOPDT_ACT))] = State.STOP_PENDING
    # the controlled station may flush outstanding data until it confirms STOPDT
    valid[(State.STOP_PENDING, symbol(_R, _K.I_FRAME))] = State.STOP_PENDING
    valid[(State.STOP_PENDING, symbol(_R, _K.STOPDT_CON))] = State.IDLE

    table = {}
    for state in State:
        for sym in ALPHABET:
            nxt = valid.get((state, sym))
            if nxt is None:
                table[(state, sym)] = (state, invalid(_default_reason(state, sym)))
            else:
                table[(state, sym)] = (nxt, VALID)
    return table


_MTU_TABLE = _build_mtu_table()
# the RTU automaton is the direction mirror of the MTU automaton
_RTU_TABLE = {(state, sym): _MTU_TABLE[(state, sym.mirrored())] for state, sym in _MTU_TABLE}
TABLES = {Role.MTU: _MTU_TABLE, Role.RTU: _RTU_TABLE}


@dataclass
class Automaton:
    role: Role
    state: State = State.IDLE
    status: Output = VALID

    def step(self, sym: InputSymbol) -> Output:
        self.state, self.status = TABLES[self.role][(self.state, sym)]
        return self.status


def new_automaton(role: Role | str, state: State = State.IDLE) -> Automaton:
    return Automaton(Role(role), state)


def automaton_step(a: Automaton, sym: InputSymbol) -> Output:
    return a.step(sym)


# ---------------------------------------------------------------- sequence counters

WINDOW_K = 12
WINDOW_W = 8


def _dist(a: int, b: int) -> int:
    return (b - a) % SEQ_MODULO


@dataclass(frozen=True)
class SeqViolation:
    field: str
    expected: int
    got: int

    def __str__(self):
        return f"{self.field} sequence number mismatch: expected {self.expected}, got {self.got}"


@dataclass(frozen=True)
class WindowExceeded:
    unacked: int
    k: int

    def __str__(self):
        return f"{self.unacked} unacknowledged I-frames exceed window k={self.k}"


@dataclass
class SeqCounters:
    """Send/receive state variables of one endpoint (all modulo 32768)."""

    vs: int = 0            # next send sequence number
    vr: int = 0            # next expected receive sequence number
    unacked_sent: int = 0  # own I-frames not yet acknowledged by the peer
    ack: int = 0           # oldest own frame not yet acknowledged (peer's last N(R))
    acked_out: int = 0     # last N(R) this endpoint sent


def check_sequence(c: SeqCounters, apci: Apci, direction: Direction, k: int = WINDOW_K):
    """Check an I/S frame against one endpoint's counters.

    Returns None when conformant, :class:`SeqViolation` (counters untouched)
    or :class:`WindowExceeded` (counters updated, frame accepted but suspicious).
    """
    rsn = apci.recv_seq
    if direction is Direction.SENT:
        if apci.format is FrameFormat.I and apci.send_seq != c.vs:
            return SeqViolation("send", c.vs, apci.send_seq)
        if _dist(c.acked_out, rsn) > _dist(c.acked_out, c.vr):
            return SeqViolation("receive", c.vr, rsn)
        c.acked_out = rsn
        if apci.format is FrameFormat.I:
            c.vs = (c.vs + 1) % SEQ_MODULO
            c.unacked_sent = _dist(c.ack, c.vs)
            if c.unacked_sent > k:
                return WindowExceeded(c.unacked_sent, k)
        return None

    if apci.format is FrameFormat.I and apci.send_seq != c.vr:
        return SeqViolation("send", c.vr, apci.send_seq)
    if _dist(c.ack, rsn) > _dist(c.ack, c.vs):
        return SeqViolation("receive", c.vs, rsn)
    if apci.format is FrameFormat.I:
        c.vr = (c.vr + 1) % SEQ_MODULO
    c.ack = rsn
    c.unacked_sent = _dist(c.ack, c.vs)
    return None


def sync_counters(sender: SeqCounters, receiver: SeqCounters, apci: Apci) -> None:
    """Adopt the state implied by a first observed I-frame (mid-stream attach)."""
    ssn, rsn = apci.send_seq, apci.recv_seq
    sender.vs = sender.ack = ssn
    sender.vr = sender.acked_out = rsn
    receiver.vr = receiver.acked_out = ssn
    receiver.vs = receiver.ack = rsn
    sender.unacked_sent = receiver.unacked_sent = 0


# ---------------------------------------------------------------- pending activations

COT_ACT, COT_ACTCON, COT_DEACT, COT_DEACTCON, COT_ACTTERM = 6, 7, 8, 9, 10
COT_INTERROGATED = 20
NEGATIVE_COTS = frozenset({44, 45, 46, 47})
ACTIVATION_DEADLINE_S = 10.0


@dataclass
class _Pending:
    issued: float
    confirmed: bool = False


@dataclass
class ActivationLedger:
    """Tracks command activations issued by the MTU until the RTU answers them."""

    deadline: float = ACTIVATION_DEADLINE_S
    pending: dict[tuple[int, int, int], _Pending] = field(default_factory=dict)

    @staticmethod
    def _key(asdu: Asdu, ioa: int) -> tuple[int, int, int]:
        return (asdu.type_id, asdu.common_address, ioa)

    def _interrogating(self, ca: int) -> bool:
        return any(k[0] == 100 and k[1] in (ca, 0xFFFF) for k in self.pending)

    def observe(self, asdu: Asdu, from_mtu: bool, ts: float) -> list[Output]:
        if not asdu.objects:
            return []
        out = []
        if from_mtu:
            if asdu.cot in (COT_ACT, COT_DEACT):
                for obj in asdu.objects:
                    self.pending[self._key(asdu, obj.ioa)] = _Pending(ts)
            return out
        if asdu.type_id < 45:
            if asdu.cot == COT_INTERROGATED and not self._interrogating(asdu.common_address):
                out.append(suspicious("interrogated data without an active interrogation"))
            return out
        for obj in asdu.objects:
            key = self._key(asdu, obj.ioa)
            entry = self.pending.get(key)
            if asdu.cot in (COT_ACTCON, COT_DEACTCON) or asdu.cot in NEGATIVE_COTS:
                if entry is None or entry.confirmed:
                    out.append(suspicious(f"confirmation without pending activation (type {asdu.type_id}, IOA {obj.ioa})"))
                elif asdu.type_id == 100 and asdu.cot == COT_ACTCON and not asdu.negative:
                    entry.confirmed = True
                else:
                    del self.pending[key]
            elif asdu.cot == COT_ACTTERM:
                if entry is None:
                    out.append(suspicious(f"activation termination without activation (type {asdu.type_id}, IOA {obj.ioa})"))
                else:
                    del self.pending[key]
        return out

    def expire(self, now: float) -> list[Output]:
        out = []
        for key, entry in list(self.pending.items()):
            if now - entry.issued > self.deadline:
                del self.pending[key]
                if not entry.confirmed:
                    out.append(suspicious(
                        f"no activation confirmation within {self.deadline:g} s (type {key[0]}, IOA {key[2]})"))
        return out

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gridwatch.automata import (
    ALPHABET,
    ERROR,
    ActivationLedger,
    Direction,
    Role,
    SeqCounters,
    SeqViolation,
    State,
    SymbolKind,
    WindowExceeded,
    automaton_step,
    check_sequence,
    map_frame,
    map_packet,
    new_automaton,
    symbol,
    sync_counters,
)
from gridwatch.codec import (
    TCP_ACK,
    TCP_PSH,
    Apci,
    Asdu,
    FrameFormat,
    InformationObject,
    UFunction,
    decode_packet,
    encode_apdu,
    encode_packet,
    i_frame,
    s_frame,
    u_frame,
)

from conftest import PROPERTY

S, R = Direction.SENT, Direction.RECEIVED
K = SymbolKind
MOD = 32768


# ---------------------------------------------------------------- hand-checked conformance table
# Written out by hand from the start/stop procedure; deliberately not derived from the code.

MTU_VALID = {
    ("IDLE", "SENT_STARTDT_ACT"): "START_PENDING",
    ("START_PENDING", "RECEIVED_STARTDT_CON"): "STARTED",
    ("STARTED", "SENT_I_FRAME"): "STARTED",
    ("STARTED", "RECEIVED_I_FRAME"): "STARTED",
    ("STARTED", "SENT_S_FRAME"): "STARTED",
    ("STARTED", "RECEIVED_S_FRAME"): "STARTED",
    ("STARTED", "SENT_STOPDT_ACT"): "STOP_PENDING",
    ("STOP_PENDING", "RECEIVED_I_FRAME"): "STOP_PENDING",
    ("STOP_PENDING", "SENT_S_FRAME"): "STOP_PENDING",
    ("STOP_PENDING", "RECEIVED_S_FRAME"): "STOP_PENDING",
    ("STOP_PENDING", "RECEIVED_STOPDT_CON"): "IDLE",
}
RTU_VALID = {
    ("IDLE", "RECEIVED_STARTDT_ACT"): "START_PENDING",
    ("START_PENDING", "SENT_STARTDT_CON"): "STARTED",
    ("STARTED", "SENT_I_FRAME"): "STARTED",
    ("STARTED", "RECEIVED_I_FRAME"): "STARTED",
    ("STARTED", "SENT_S_FRAME"): "STARTED",
    ("STARTED", "RECEIVED_S_FRAME"): "STARTED",
    ("STARTED", "RECEIVED_STOPDT_ACT"): "STOP_PENDING",
    ("STOP_PENDING", "SENT_I_FRAME"): "STOP_PENDING",
    ("STOP_PENDING", "SENT_S_FRAME"): "STOP_PENDING",
    ("STOP_PENDING", "RECEIVED_S_FRAME"): "STOP_PENDING",
    ("STOP_PENDING", "SENT_STOPDT_CON"): "IDLE",
}
for _table in (MTU_VALID, RTU_VALID):
    for _state in ("IDLE", "START_PENDING", "STARTED", "STOP_PENDING"):
        for _sym in ("SENT_TESTFR_ACT", "RECEIVED_TESTFR_ACT", "SENT_TESTFR_CON", "RECEIVED_TESTFR_CON"):
            _table[(_state, _sym)] = _state
REFERENCE = {Role.MTU: MTU_VALID, Role.RTU: RTU_VALID}


def test_alphabet_has_seventeen_symbols():
    assert len(ALPHABET) == 17 and len(set(ALPHABET)) == 17
    assert sum(s.is_error for s in ALPHABET) == 1


@pytest.mark.parametrize("role", list(Role))
def test_totality_against_reference(role):
    """Every (role, state, symbol) has one defined transition that agrees with the reference."""
    for state in State:
        for sym in ALPHABET:
            a = new_automaton(role, state)
            out = automaton_step(a, sym)
            expected = REFERENCE[role].get((state.value, str(sym)))
            if expected is None:
                assert out.kind == "INVALID" and out.reason, (role, state, sym)
                assert a.state is state
            else:
                assert out.ok and a.state.value == expected, (role, state, sym)


@PROPERTY
@given(st.sampled_from(list(Role)), st.sampled_from(list(State)), st.lists(st.sampled_from(ALPHABET), max_size=30))
def test_totality_over_random_walks(role, state, symbols):
    a = new_automaton(role, state)
    for sym in symbols:
        before = a.state.value
        out = a.step(sym)
        expected = REFERENCE[role].get((before, str(sym)))
        assert out.kind in ("VALID", "INVALID")
        assert out.ok == (expected is not None)
        assert a.state.value == (expected or before)


def test_mtu_initiates_start():
    a = new_automaton(Role.MTU)
    assert a.step(symbol(S, K.STARTDT_ACT)).ok and a.state is State.START_PENDING


def test_data_before_startdt():
    out = new_automaton(Role.RTU).step(symbol(R, K.I_FRAME))
    assert out.kind == "INVALID" and out.reason == "data transfer before STARTDT"


@pytest.mark.parametrize("state", list(State))
def test_error_symbol_is_always_invalid(state):
    for role in Role:
        out = new_automaton(role, state).step(ERROR)
        assert out.kind == "INVALID" and out.reason == "unmappable frame"


def test_fresh_automata_are_independent():
    a, b = new_automaton(Role.MTU), new_automaton(Role.MTU)
    assert a.state is b.state is State.IDLE and new_automaton("RTU").state is State.IDLE
    a.step(symbol(S, K.STARTDT_ACT))
    assert b.state is State.IDLE


# ---------------------------------------------------------------- mapper

def packet(payload: bytes) -> bytes:
    return encode_packet("02:00:00:00:00:01", "02:00:00:00:00:11", "10.0.0.1", "10.0.0.11",
                         50000, 2404, 1, 1, TCP_PSH | TCP_ACK, payload)


def test_map_startdt_sent():
    layers = decode_packet(packet(encode_apdu(u_frame(UFunction.STARTDT_ACT))))
    assert [str(s) for s in map_packet(layers, S)] == ["SENT_STARTDT_ACT"]


def test_map_keeps_order():
    frames = i_frame(0, 0, Asdu(13, 3, 11, (InformationObject(1001, 1.5, 0),))), s_frame(1)
    layers = decode_packet(packet(b"".join(encode_apdu(f) for f in frames)))
    assert map_packet(layers, R) == [symbol(R, K.I_FRAME), symbol(R, K.S_FRAME)]


def test_map_malformed_apci():
    layers = decode_packet(packet(bytes.fromhex("6803010000")))
    assert map_packet(layers, S) == [ERROR]


# ---------------------------------------------------------------- conformant traces

def interrogation(ca, cot):
    return Asdu(100, cot, ca, (InformationObject(0, None, 20),))


def measurement(ca, ioa, value, cot=20):
    return Asdu(13, cot, ca, (InformationObject(ioa, value, 0),))


def run(trace):
    """Feed (sender, frame) pairs to both automata and both endpoint counters."""
    auto = {"MTU": new_automaton(Role.MTU), "RTU": new_automaton(Role.RTU)}
    counters = {"MTU": SeqCounters(), "RTU": SeqCounters()}
    outputs = []
    for sender, frame in trace:
        receiver = "RTU" if sender == "MTU" else "MTU"
        outputs.append(auto[sender].step(map_frame(frame, S)))
        outputs.append(auto[receiver].step(map_frame(frame, R)))
        if frame.apci.format is not FrameFormat.U:
            outputs.append(check_sequence(counters[sender], frame.apci, S))
            outputs.append(check_sequence(counters[receiver], frame.apci, R))
    return auto, counters, outputs


def violations(outputs):
    return [o for o in outputs if o is not None and not getattr(o, "ok", False)]


def test_interrogation_session_trace():
    trace = [
        ("MTU", u_frame(UFunction.STARTDT_ACT)),
        ("RTU", u_frame(UFunction.STARTDT_CON)),
        ("MTU", i_frame(0, 0, interrogation(11, 6))),
        ("RTU", i_frame(0, 1, interrogation(11, 7))),
        ("RTU", i_frame(1, 1, measurement(11, 1001, 4.5))),
        ("RTU", i_frame(2, 1, measurement(11, 1002, -0.5))),
        ("RTU", i_frame(3, 1, interrogation(11, 10))),
        ("MTU", s_frame(4)),
    ]
    auto, counters, outputs = run(trace)
    assert violations(outputs) == []
    assert auto["MTU"].state is auto["RTU"].state is State.STARTED
    assert counters["MTU"].unacked_sent == counters["RTU"].unacked_sent == 0


@st.composite
def conformant_traces(draw, k=12):
    trace = [("MTU", u_frame(UFunction.STARTDT_ACT)), ("RTU", u_frame(UFunction.STARTDT_CON))]
    vs = {"MTU": 0, "RTU": 0}
    vr = {"MTU": 0, "RTU": 0}
    unacked = {"MTU": 0, "RTU": 0}
    peer = {"MTU": "RTU", "RTU": "MTU"}
    ops = draw(st.lists(st.tuples(st.sampled_from(["MTU", "RTU"]), st.sampled_from("iist")), max_size=60))
    for sender, op in ops:
        other = peer[sender]
        if op == "i":
            if unacked[sender] >= k:
                trace.append((other, s_frame(vr[other])))
                unacked[sender] = 0
            asdu = measurement(11, 1001, 1.0, 3) if sender == "RTU" else interrogation(11, 6)
            trace.append((sender, i_frame(vs[sender], vr[sender], asdu)))
            vs[sender] = (vs[sender] + 1) % MOD
            vr[other] = (vr[other] + 1) % MOD
            unacked[sender] += 1
            unacked[other] = 0
        elif op == "s":
            trace.append((sender, s_frame(vr[sender])))
            unacked[other] = 0
        else:
            trace.append((sender, u_frame(UFunction.TESTFR_ACT)))
            trace.append((other, u_frame(UFunction.TESTFR_CON)))
    if draw(st.booleans()):
        trace.append(("MTU", u_frame(UFunction.STOPDT_ACT)))
        trace.append(("MTU", s_frame(vr["MTU"])))
        trace.append(("RTU", u_frame(UFunction.STOPDT_CON)))
    return trace


@PROPERTY
@given(conformant_traces())
def test_conformant_traces_have_no_invalid_output(trace):
    _, _, outputs = run(trace)
    assert violations(outputs) == []


@PROPERTY
@given(conformant_traces(), st.sampled_from(["act", "con", "both"]))
def test_startdt_deletion_is_detected(trace, drop):
    """Removing the STARTDT handshake, or part of it, is flagged."""
    has_data = any(f.apci.format is not FrameFormat.U for _, f in trace)
    mutated = {"act": trace[1:], "con": trace[:1] + trace[2:], "both": trace[2:]}[drop]
    _, _, outputs = run(mutated)
    invalid = [o for o in outputs if getattr(o, "kind", None) == "INVALID"]
    if drop == "act":
        # the orphaned STARTDT_CON is itself a violation
        assert invalid
    elif has_data:
        assert any(o.reason == "data transfer before STARTDT" for o in invalid)


# ---------------------------------------------------------------- sequence numbers

def apci_i(ssn, rsn):
    return Apci(FrameFormat.I, ssn, rsn)


def test_check_sequence_examples():
    c = SeqCounters()
    assert check_sequence(c, apci_i(0, 0), S) is None and c.vs == 1
    assert check_sequence(SeqCounters(), apci_i(5, 0), S) == SeqViolation("send", 0, 5)
    c = SeqCounters(vs=32767, ack=32767)
    assert check_sequence(c, apci_i(32767, 0), S) is None and c.vs == 0


def test_window_exceeded():
    c = SeqCounters()
    results = [check_sequence(c, apci_i(n, 0), S, k=12) for n in range(13)]
    assert results[:12] == [None] * 12 and isinstance(results[12], WindowExceeded)


def test_forty_thousand_frame_run():
    sender, receiver = SeqCounters(), SeqCounters()
    for n in range(40000):
        apci = apci_i(n % MOD, 0)
        assert check_sequence(sender, apci, S) is None
        assert check_sequence(receiver, apci, R) is None
        ack = Apci(FrameFormat.S, recv_seq=receiver.vr)
        assert check_sequence(receiver, ack, S) is None
        assert check_sequence(sender, ack, R) is None
    assert sender.vs == receiver.vr == 40000 % MOD
    assert sender.unacked_sent == 0


@PROPERTY
@given(st.integers(0, 2**40), st.lists(st.integers(1, 12), min_size=1, max_size=40))
def test_wraparound_matches_big_integer_oracle(start, bursts):
    """Counters agree with unbounded integer counting reduced mod 32768."""
    sender, receiver = SeqCounters(), SeqCounters()
    sync_counters(sender, receiver, apci_i(start % MOD, 0))
    sent = start  # oracle: never wraps
    for burst in bursts:
        for _ in range(burst):
            apci = apci_i(sent % MOD, 0)
            assert check_sequence(sender, apci, S) is None
            assert check_sequence(receiver, apci, R) is None
            sent += 1
            assert sender.vs == receiver.vr == sent % MOD
        ack = Apci(FrameFormat.S, recv_seq=sent % MOD)
        assert check_sequence(receiver, ack, S) is None
        assert check_sequence(sender, ack, R) is None
        assert sender.unacked_sent == 0
    stale = apci_i((sent - 1) % MOD, 0)
    assert check_sequence(sender, stale, S) == SeqViolation("send", sent % MOD, (sent - 1) % MOD)


def test_receive_ack_beyond_sent_is_violation():
    c = SeqCounters(vs=3)
    assert check_sequence(c, Apci(FrameFormat.S, recv_seq=5), R) == SeqViolation("receive", 3, 5)


# ---------------------------------------------------------------- activation ledger

def test_interrogation_cycle_is_clean():
    led = ActivationLedger()
    assert led.observe(interrogation(11, 6), True, 0.0) == []
    assert led.observe(interrogation(11, 7), False, 0.1) == []
    assert led.observe(measurement(11, 1001, 2.0), False, 0.2) == []
    assert led.observe(interrogation(11, 10), False, 0.3) == []
    assert led.pending == {} and led.expire(100.0) == []


def test_missing_confirmation_expires():
    led = ActivationLedger()
    led.observe(Asdu(50, 6, 11, (InformationObject(2001, 5.0, 0),)), True, 0.0)
    assert led.expire(9.0) == []
    (out,) = led.expire(10.5)
    assert out.kind == "SUSPICIOUS" and "IOA 2001" in out.reason


def test_unsolicited_confirmation():
    (out,) = ActivationLedger().observe(Asdu(50, 7, 11, (InformationObject(2001, 5.0, 0),)), False, 0.0)
    assert out.kind == "SUSPICIOUS"


def test_interrogated_data_without_interrogation():
    (out,) = ActivationLedger().observe(measurement(11, 1001, 1.0), False, 0.0)
    assert out.kind == "SUSPICIOUS"

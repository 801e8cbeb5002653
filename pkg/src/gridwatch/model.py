"""Graph-based infrastructure model (GIM): assets, links and data points.

The on-disk form is a single JSON document with ``meta``, ``nodes`` and
``edges``. Parsing is strict: unknown keys are rejected so that a typo never
silently drops a rule.
"""

from __future__ import annotations

import ipaddress
import json
import re
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any


class NodeKind(str, Enum):
    MTU = "MTU"
    RTU = "RTU"
    IED = "IED"
    SWITCH = "SWITCH"
    FIREWALL = "FIREWALL"
    DER = "DER"
    LOAD = "LOAD"
    SUBSTATION = "SUBSTATION"
    WORKSTATION = "WORKSTATION"


class Protocol(str, Enum):
    IEC104 = "IEC104"
    SSH = "SSH"
    MODBUS = "MODBUS"
    OTHER = "OTHER"


class Direction(str, Enum):
    MONITOR = "MONITOR"
    CONTROL = "CONTROL"


class EdgeKind(str, Enum):
    NETWORK_LINK = "NETWORK_LINK"
    COMM_CHANNEL = "COMM_CHANNEL"
    POWER_LINE = "POWER_LINE"


ADDRESSABLE_KINDS = frozenset({NodeKind.MTU, NodeKind.RTU, NodeKind.IED})
FIELD_KINDS = frozenset({NodeKind.RTU, NodeKind.IED, NodeKind.DER})

# process-information split of the IEC 60870-5-101/104 type identifiers
MONITOR_TYPES = range(1, 45)
CONTROL_TYPES = range(45, 70)


def direction_of_type(type_id: int) -> Direction | None:
    if type_id in MONITOR_TYPES:
        return Direction.MONITOR
    if type_id in CONTROL_TYPES:
        return Direction.CONTROL
    return None


class ModelError(Exception):
    """Base class for GIM diagnostics; instances double as diagnostic records."""

    def __eq__(self, other):
        return type(self) is type(other) and self.args == other.args

    def __hash__(self):
        return hash((type(self), self.args))


class SchemaError(ModelError):
    def __init__(self, path: str, reason: str):
        super().__init__(path, reason)
        self.path = path
        self.reason = reason

    def __str__(self):
        return f"{self.path}: {self.reason}"


class ReferentialError(ModelError):
    def __init__(self, edge_id: str, reason: str = "edge endpoint refers to a missing node"):
        super().__init__(edge_id, reason)
        self.edge_id = edge_id
        self.reason = reason

    def __str__(self):
        return f"{self.edge_id}: {self.reason}"


class InvariantError(ModelError):
    def __init__(self, node_id: str, rule: str):
        super().__init__(node_id, rule)
        self.node_id = node_id
        self.rule = rule

    def __str__(self):
        return f"{self.node_id}: violates {self.rule}"


@dataclass(frozen=True)
class PortSpec:
    port: int
    protocol: Protocol
    role: str  # "client" | "server"


@dataclass(frozen=True)
class DataPoint:
    ioa: int
    common_address: int
    asdu_type: int
    direction: Direction
    unit: str = ""
    min_value: float | None = None
    max_value: float | None = None


@dataclass(frozen=True)
class OpLimits:
    p_max_kw: float | None = None
    q_max_kvar: float | None = None
    cos_phi_min: float | None = None
    cos_phi_max: float | None = None


@dataclass(frozen=True)
class AssetNode:
    id: str
    kind: NodeKind
    mac: str | None = None
    ip: str | None = None
    ports: tuple[PortSpec, ...] = ()
    data_points: tuple[DataPoint, ...] = ()
    op_limits: OpLimits | None = None


@dataclass(frozen=True)
class Channel:
    protocol: Protocol
    server_port: int
    client: str
    server: str


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    kind: EdgeKind
    channel: Channel | None = None


@dataclass(frozen=True)
class Meta:
    model_id: str
    version: str = "1"
    created: str = ""


@dataclass(frozen=True)
class Gim:
    nodes: tuple[AssetNode, ...]
    edges: tuple[Edge, ...]
    meta: Meta = field(default_factory=lambda: Meta("unnamed"))

    def node(self, node_id: str) -> AssetNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def channels(self) -> list[Edge]:
        return [e for e in self.edges if e.kind is EdgeKind.COMM_CHANNEL]


# ---------------------------------------------------------------- strict parsing

_MAC_RE = re.compile(r"^[0-9a-f]{2}(:[0-9a-f]{2}){5}$")


def _obj(value, path: str, required: set[str], optional: set[str]) -> dict:
    if not isinstance(value, dict):
        raise SchemaError(path, "expected an object")
    unknown = set(value) - required - optional
    if unknown:
        raise SchemaError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    missing = required - set(value)
    if missing:
        raise SchemaError(f"{path}.{sorted(missing)[0]}", "missing required field")
    return value


def _int(value, path: str, lo: int, hi: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not lo <= value <= hi:
        raise SchemaError(path, f"expected integer in [{lo}, {hi}]")
    return value


def _num(value, path: str) -> float | None:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(path, "expected a number")
    return float(value)


def _str(value, path: str) -> str:
    if not isinstance(value, str) or not value:
        raise SchemaError(path, "expected a non-empty string")
    return value


def _enum(cls, value, path: str):
    try:
        return cls(value)
    except ValueError:
        raise SchemaError(path, f"expected one of {[m.value for m in cls]}") from None


def _mac(value, path: str) -> str | None:
    if value is None:
        return None
    mac = _str(value, path).lower().replace("-", ":")
    if not _MAC_RE.match(mac):
        raise SchemaError(path, "expected a MAC address aa:bb:cc:dd:ee:ff")
    return mac


def _ip(value, path: str) -> str | None:
    if value is None:
        return None
    try:
        return str(ipaddress.IPv4Address(_str(value, path)))
    except ipaddress.AddressValueError:
        raise SchemaError(path, "expected a dotted IPv4 address") from None


def _list(value, path: str) -> list:
    if not isinstance(value, list):
        raise SchemaError(path, "expected an array")
    return value


def _parse_data_point(raw, path: str) -> DataPoint:
    d = _obj(raw, path, {"ioa", "common_address", "asdu_type", "direction"},
             {"unit", "min_value", "max_value"})
    unit = d.get("unit", "")
    if not isinstance(unit, str):
        raise SchemaError(f"{path}.unit", "expected a string")
    return DataPoint(
        ioa=_int(d["ioa"], f"{path}.ioa", 0, 0xFFFFFF),
        common_address=_int(d["common_address"], f"{path}.common_address", 0, 0xFFFF),
        asdu_type=_int(d["asdu_type"], f"{path}.asdu_type", 1, 255),
        direction=_enum(Direction, d["direction"], f"{path}.direction"),
        unit=unit,
        min_value=_num(d.get("min_value"), f"{path}.min_value"),
        max_value=_num(d.get("max_value"), f"{path}.max_value"),
    )


def _parse_node(raw, path: str) -> AssetNode:
    d = _obj(raw, path, {"id", "kind"}, {"mac", "ip", "ports", "data_points", "op_limits"})
    ports = []
    for i, p in enumerate(_list(d.get("ports", []), f"{path}.ports")):
        pp = f"{path}.ports[{i}]"
        p = _obj(p, pp, {"port", "protocol", "role"}, set())
        if p["role"] not in ("client", "server"):
            raise SchemaError(f"{pp}.role", "expected 'client' or 'server'")
        ports.append(PortSpec(_int(p["port"], f"{pp}.port", 0, 65535),
                              _enum(Protocol, p["protocol"], f"{pp}.protocol"), p["role"]))
    dps = tuple(_parse_data_point(x, f"{path}.data_points[{i}]")
                for i, x in enumerate(_list(d.get("data_points", []), f"{path}.data_points")))
    limits = None
    if d.get("op_limits") is not None:
        lp = f"{path}.op_limits"
        lim = _obj(d["op_limits"], lp, set(), {"p_max_kw", "q_max_kvar", "cos_phi_min", "cos_phi_max"})
        limits = OpLimits(**{k: _num(v, f"{lp}.{k}") for k, v in lim.items()})
    return AssetNode(
        id=_str(d["id"], f"{path}.id"),
        kind=_enum(NodeKind, d["kind"], f"{path}.kind"),
        mac=_mac(d.get("mac"), f"{path}.mac"),
        ip=_ip(d.get("ip"), f"{path}.ip"),
        ports=tuple(ports),
        data_points=dps,
        op_limits=limits,
    )


def _parse_edge(raw, path: str) -> Edge:
    d = _obj(raw, path, {"src", "dst", "kind"}, {"channel"})
    channel = None
    if d.get("channel") is not None:
        cp = f"{path}.channel"
        c = _obj(d["channel"], cp, {"protocol", "server_port", "client", "server"}, set())
        channel = Channel(_enum(Protocol, c["protocol"], f"{cp}.protocol"),
                          _int(c["server_port"], f"{cp}.server_port", 1, 65535),
                          _str(c["client"], f"{cp}.client"), _str(c["server"], f"{cp}.server"))
    return Edge(_str(d["src"], f"{path}.src"), _str(d["dst"], f"{path}.dst"),
                _enum(EdgeKind, d["kind"], f"{path}.kind"), channel)


def parse_model(document: bytes | str | dict) -> Gim:
    """Parse a GIM document without checking cross-field invariants."""
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
    d = _obj(document, "$", {"nodes", "edges", "meta"}, set())
    m = _obj(d["meta"], "$.meta", {"model_id"}, {"version", "created"})
    meta = Meta(_str(m["model_id"], "$.meta.model_id"), str(m.get("version", "1")), str(m.get("created", "")))
    nodes = tuple(_parse_node(n, f"$.nodes[{i}]") for i, n in enumerate(_list(d["nodes"], "$.nodes")))
    edges = tuple(_parse_edge(e, f"$.edges[{i}]") for i, e in enumerate(_list(d["edges"], "$.edges")))
    return Gim(nodes, edges, meta)


def validate_model(gim: Gim) -> list[ModelError]:
    """Return every invariant violation; an empty list means the model is valid.

    The result is sorted, so it does not depend on node or edge order.
    """
    diags: set[ModelError] = set()
    seen: set[str] = set()
    for node in gim.nodes:
        if node.id in seen:
            diags.add(InvariantError(node.id, "unique-node-id"))
        seen.add(node.id)
        if node.kind in ADDRESSABLE_KINDS:
            if node.ip is None:
                diags.add(InvariantError(node.id, "addressable-asset-needs-ip"))
            if node.mac is None:
                diags.add(InvariantError(node.id, "addressable-asset-needs-mac"))
        if node.data_points and node.kind not in FIELD_KINDS:
            diags.add(InvariantError(node.id, "data-points-only-on-field-assets"))
        lim = node.op_limits
        if lim is not None and (lim.cos_phi_min is not None or lim.cos_phi_max is not None):
            lo = lim.cos_phi_min if lim.cos_phi_min is not None else -1.0
            hi = lim.cos_phi_max if lim.cos_phi_max is not None else 1.0
            if not -1.0 <= lo <= hi <= 1.0:
                diags.add(InvariantError(node.id, "cos-phi-bounds"))
        addresses = set()
        for dp in node.data_points:
            key = (dp.ioa, dp.common_address)
            if key in addresses:
                diags.add(InvariantError(node.id, f"unique-data-point-address:{dp.common_address}/{dp.ioa}"))
            addresses.add(key)
            if direction_of_type(dp.asdu_type) is not dp.direction:
                rule = "monitor-type-range" if dp.direction is Direction.MONITOR else "control-type-range"
                diags.add(InvariantError(node.id, f"{rule}:{dp.ioa}"))
            if dp.min_value is not None and dp.max_value is not None and dp.min_value > dp.max_value:
                diags.add(InvariantError(node.id, f"min-not-above-max:{dp.ioa}"))

    for i, edge in enumerate(gim.edges):
        edge_id = f"edges[{i}]:{edge.src}->{edge.dst}"
        if edge.src not in seen or edge.dst not in seen:
            diags.add(ReferentialError(edge_id))
        if edge.kind is EdgeKind.COMM_CHANNEL:
            ch = edge.channel
            if ch is None:
                diags.add(InvariantError(edge_id, "channel-descriptor-required"))
            elif {ch.client, ch.server} != {edge.src, edge.dst} or ch.client == ch.server:
                diags.add(InvariantError(edge_id, "channel-endpoints-match"))
        elif edge.channel is not None:
            diags.add(InvariantError(edge_id, "channel-only-on-comm-channel"))
    return sorted(diags, key=lambda d: (type(d).__name__, [str(a) for a in d.args]))


def load_model(document: bytes | str | dict) -> Gim:
    """Parse and fully validate a GIM; raises the first diagnostic found."""
    gim = parse_model(document)
    diags = validate_model(gim)
    if diags:
        # referential problems first: they make other rules meaningless
        diags.sort(key=lambda d: not isinstance(d, ReferentialError))
        raise diags[0]
    return gim


def _prune(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _prune(v) for k, v in value.items() if v is not None and v != () and v != []}
    if isinstance(value, (list, tuple)):
        return [_prune(v) for v in value]
    return value


def model_to_dict(gim: Gim) -> dict:
    return _prune(asdict(gim))


def serialize_model(gim: Gim) -> str:
    return json.dumps(model_to_dict(gim), indent=2, sort_keys=True) + "\n"

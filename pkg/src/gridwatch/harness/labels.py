"""Ground-truth labels and the labeled capture container."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable

from ..codec import RawPacket
from ..pcap import write_pcap


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class Label:
    index: int
    malicious: bool
    scenario_tag: str


@dataclass
class LabeledCapture:
    packets: list[RawPacket]
    labels: list[Label]

    def __post_init__(self):
        if [lb.index for lb in self.labels] != list(range(len(self.packets))):
            raise LabelError("labels must cover every packet index exactly once, in order")

    @property
    def capture(self) -> bytes:
        return write_pcap(self.packets)

    def count(self, malicious: bool | None = None, tag: str | None = None) -> int:
        return sum(1 for lb in self.labels
                   if (malicious is None or lb.malicious == malicious) and (tag is None or lb.scenario_tag == tag))


def dump_labels(labels: Iterable[Label]) -> str:
    return "".join(json.dumps(asdict(lb), sort_keys=True) + "\n" for lb in labels)


def load_labels(text: str) -> list[Label]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append(Label(int(rec["index"]), bool(rec["malicious"]), str(rec["scenario_tag"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise LabelError(f"line {lineno}: {exc}") from None
    seen = [lb.index for lb in out]
    if sorted(seen) != list(range(len(out))):
        raise LabelError("label indices must be exactly 0..n-1")
    return sorted(out, key=lambda lb: lb.index)

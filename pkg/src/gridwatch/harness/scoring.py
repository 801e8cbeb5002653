"""Per-packet confusion matrix against ground-truth labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .labels import Label


class LabelMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def as_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}

    def __str__(self):
        return f"tp={self.tp} tn={self.tn} fp={self.fp} fn={self.fn}"


def score(alerted: Iterable[int], labels: list[Label], tags: Iterable[str] | None = None) -> ConfusionMatrix:
    """Classify each labeled packet as predicted-malicious iff some alert references it.

    ``alerted`` holds the packet index of every alert. With ``tags`` only the
    packets carrying one of those scenario tags are scored.
    """
    by_index = {lb.index: lb for lb in labels}
    hit = set()
    for idx in alerted:
        if idx not in by_index:
            raise LabelMismatch(f"alert references unlabeled packet index {idx}")
        hit.add(idx)
    wanted = None if tags is None else set(tags)
    tp = tn = fp = fn = 0
    for lb in labels:
        if wanted is not None and lb.scenario_tag not in wanted:
            continue
        predicted = lb.index in hit
        if lb.malicious:
            tp += predicted
            fn += not predicted
        else:
            fp += predicted
            tn += not predicted
    return ConfusionMatrix(tp, tn, fp, fn)

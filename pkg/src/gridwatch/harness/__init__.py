"""Scenario generation, replay and scoring."""

from .labels import Label, LabeledCapture, LabelError, dump_labels, load_labels
from .replay import ReplayResult, observed_rtts, replay
from .scenarios import SCENARIOS, FixtureError, ScenarioParams, gateway_capture, generate_scenario
from .scoring import ConfusionMatrix, LabelMismatch, score

__all__ = [
    "SCENARIOS", "ConfusionMatrix", "FixtureError", "Label", "LabelError", "LabelMismatch",
    "LabeledCapture", "ReplayResult", "ScenarioParams", "dump_labels", "generate_scenario",
    "gateway_capture", "load_labels", "observed_rtts", "replay", "score",
]

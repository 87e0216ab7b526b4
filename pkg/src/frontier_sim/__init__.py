"""Deterministic discrete-event simulator for disaggregated and MoE LLM inference."""

from frontier_sim.core import EventKind, EventTrace, SimEvent, Simulator

__all__ = ["EventKind", "EventTrace", "SimEvent", "Simulator"]

__version__ = "0.1.0"

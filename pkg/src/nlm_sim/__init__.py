"""Deterministic multi-agent simulation kernel with a supply-chain pack.

Layers, bottom up: :mod:`~nlm_sim.core` (systems, channels, flows),
:mod:`~nlm_sim.regulation` (sensing, memory, forecasts, rules),
:mod:`~nlm_sim.engine` (the tick loop and traces),
:mod:`~nlm_sim.supplychain` (beer-game chains) and
:mod:`~nlm_sim.scenario` / :mod:`~nlm_sim.cli` (files and the ``nlm-sim`` command).
"""

from .core import Channel, Emission, Event, Flow, FlowKind, SystemNode, World
from .engine import Engine, MetricSpec, Status, Summary, Trace, collect, run, summarize
from .errors import (ConfigurationError, ControlError, InvariantViolation, NLMError,
                     ScenarioError, TerminalStateError)
from .regulation import (ClosureMode, EmitFlow, EssentialVariable, ForecastSpec, Memory,
                         RegulationUnit, Rule, Sensor, SetState)
from .rng import SplitMix64
from .scenario import ScenarioFile, load_scenario, parse_scenario, serialize_scenario
from .supplychain import (ChainConfig, Constant, Link, NodeConfig, NodeRole, OrderUpTo, Ss,
                          UniformInt, build_chain, bullwhip_ratio, fill_rate, make_engine,
                          run_chain, validate)

__version__ = "0.1.0"

__all__ = [
    "Channel", "Emission", "Event", "Flow", "FlowKind", "SystemNode", "World",
    "Engine", "MetricSpec", "Status", "Summary", "Trace", "collect", "run", "summarize",
    "ConfigurationError", "ControlError", "InvariantViolation", "NLMError", "ScenarioError",
    "TerminalStateError",
    "ClosureMode", "EmitFlow", "EssentialVariable", "ForecastSpec", "Memory",
    "RegulationUnit", "Rule", "Sensor", "SetState",
    "SplitMix64",
    "ScenarioFile", "load_scenario", "parse_scenario", "serialize_scenario",
    "ChainConfig", "Constant", "Link", "NodeConfig", "NodeRole", "OrderUpTo", "Ss",
    "UniformInt", "build_chain", "bullwhip_ratio", "fill_rate", "make_engine", "run_chain",
    "validate",
]

"""Regulation units: sensing, memory, imagination and rule-based decisions.

A :class:`RegulationUnit` attached to a node runs once per tick, before the
node's operational behavior::

    sense -> memory -> essential variables -> forecasts
          -> evaluate_rules -> coordinate -> close

and returns the resolved actions (state updates and emissions) for the
engine to apply. Nodes without a unit skip this entirely.
"""

from __future__ import annotations

import enum
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator, NamedTuple, Sequence, Union

from .core import Emission, Event, Flow, FlowKind, Scalar, format_scalar
from .errors import ConfigurationError, InvariantViolation
from .expr import PURE_FUNCTIONS, Expr, as_expr

if TYPE_CHECKING:
    from .core import SystemNode

__all__ = [
    "MemoryRecord", "Memory", "Sensor", "EssentialVariable", "ForecastSpec",
    "Forecast", "EmitFlow", "SetState", "Noop", "Rule", "Decision",
    "StateUpdate", "ClosureMode", "RegulationUnit", "sense", "query",
    "forecast_moving_average", "forecast_linear_trend", "evaluate_rules",
    "coordinate", "close", "regulate",
]


# --------------------------------------------------------------------------
# memory (level 6)

class MemoryRecord(NamedTuple):
    tick: int
    key: str
    value: Scalar


class Memory:
    """Append-only record store, ordered by (tick, insertion)."""

    def __init__(self, records: Iterable[MemoryRecord] = ()):
        self._records: list[MemoryRecord] = []
        # key -> (ticks, values), parallel lists in store order
        self._index: dict[str, tuple[list[int], list[Scalar]]] = {}
        for rec in records:
            self.append(*rec)

    def append(self, tick: int, key: str, value: Scalar) -> MemoryRecord:
        if self._records and tick < self._records[-1].tick:
            raise InvariantViolation(
                f"memory is append-only in tick order: {tick} after {self._records[-1].tick}")
        rec = MemoryRecord(tick, key, value)
        self._records.append(rec)
        ticks, values = self._index.setdefault(key, ([], []))
        ticks.append(tick)
        values.append(value)
        return rec

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[MemoryRecord]:
        return iter(tuple(self._records))

    @property
    def records(self) -> tuple[MemoryRecord, ...]:
        return tuple(self._records)

    def keys(self) -> list[str]:
        return list(self._index)

    def query(self, key: str, t0: int, t1: int) -> list[MemoryRecord]:
        if t0 > t1:
            raise ValueError(f"empty window [{t0}, {t1}]")
        entry = self._index.get(key)
        if entry is None:
            return []
        ticks, values = entry
        lo = bisect_left(ticks, t0)
        hi = bisect_right(ticks, t1)
        return [MemoryRecord(ticks[i], key, values[i]) for i in range(lo, hi)]

    def history(self, key: str, before: int, n: int | None = None) -> tuple[list[int], list[Scalar]]:
        """The last ``n`` (tick, value) pairs of ``key`` strictly before ``before``."""
        entry = self._index.get(key)
        if entry is None:
            return [], []
        ticks, values = entry
        end = bisect_left(ticks, before)
        start = 0 if n is None else max(0, end - n)
        return ticks[start:end], values[start:end]

    def values(self, key: str) -> list[Scalar]:
        entry = self._index.get(key)
        return list(entry[1]) if entry else []

    def log_lines(self) -> Iterator[str]:
        for tick, key, value in self._records:
            yield f"{tick}\t{key}\t{format_scalar(value)}\n"

    def write_log(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(self.log_lines())


def query(memory: Memory, key: str, window: tuple[int, int]) -> list[MemoryRecord]:
    t0, t1 = window
    return memory.query(key, t0, t1)


# --------------------------------------------------------------------------
# sensors (level 4)

@dataclass(frozen=True)
class Sensor:
    id: str
    extraction: tuple[tuple[str, str], ...]
    kind: FlowKind | None = None

    def __post_init__(self):
        object.__setattr__(self, "extraction", tuple(tuple(p) for p in self.extraction))
        keys = [key for _, key in self.extraction]
        if len(set(keys)) != len(keys):
            raise ConfigurationError(f"sensor {self.id!r} maps two attributes to one memory key")

    def matches(self, flow: Flow) -> bool:
        return self.kind is None or flow.kind is self.kind


# --------------------------------------------------------------------------
# essential variables, forecasts

@dataclass
class EssentialVariable:
    name: str
    lo: float
    hi: float
    binding: Expr
    value: float = math.nan

    def __post_init__(self):
        self.binding = as_expr(self.binding)
        if not self.lo <= self.hi:
            raise ConfigurationError(f"essential variable {self.name!r}: lo {self.lo} > hi {self.hi}")

    @property
    def in_margin(self) -> bool:
        return self.lo <= self.value <= self.hi


class ForecastMethod(str, enum.Enum):
    MOVING_AVERAGE = "moving_average"
    LINEAR_TREND = "linear_trend"


@dataclass(frozen=True)
class ForecastSpec:
    name: str
    key: str
    method: ForecastMethod = ForecastMethod.MOVING_AVERAGE
    window: int = 1
    default: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "method", ForecastMethod(self.method))
        minimum = 2 if self.method is ForecastMethod.LINEAR_TREND else 1
        if self.window < minimum:
            raise ConfigurationError(f"forecast {self.name!r}: window must be ≥ {minimum}")

    def compute(self, memory: Memory, tick: int) -> "Forecast":
        if self.method is ForecastMethod.MOVING_AVERAGE:
            return forecast_moving_average(memory, self.key, self.window, tick, self.default)
        return forecast_linear_trend(memory, self.key, self.window, tick, self.default)


@dataclass(frozen=True)
class Forecast:
    key: str
    method: ForecastMethod
    window: int
    value: float
    at_tick: int


def forecast_moving_average(memory: Memory, key: str, n: int, tick: int,
                            default: float = 0.0) -> Forecast:
    """Mean of the last ``min(n, available)`` values recorded before ``tick``."""
    if n < 1:
        raise ValueError("moving average window must be ≥ 1")
    _, values = memory.history(key, tick, n)
    value = sum(values) / len(values) if values else default
    return Forecast(key, ForecastMethod.MOVING_AVERAGE, n, value, tick)


def forecast_linear_trend(memory: Memory, key: str, n: int, tick: int,
                          default: float = 0.0) -> Forecast:
    """Least-squares line through the last ``min(n, available)`` points, read at ``tick``.

    Fewer than two points (or all points on one tick) fall back to the
    moving-average value of whatever points exist.
    """
    if n < 2:
        raise ValueError("linear trend window must be ≥ 2")
    ticks, values = memory.history(key, tick, n)
    m = len(values)
    if m == 0:
        return Forecast(key, ForecastMethod.LINEAR_TREND, n, default, tick)
    mean_x = sum(ticks) / m
    mean_y = sum(values) / m
    sxx = sum((x - mean_x) ** 2 for x in ticks)
    if m < 2 or sxx == 0:
        return Forecast(key, ForecastMethod.LINEAR_TREND, n, mean_y, tick)
    sxy = sum((x - mean_x) * (y - mean_y) for x, y in zip(ticks, values))
    slope = sxy / sxx
    return Forecast(key, ForecastMethod.LINEAR_TREND, n, mean_y + slope * (tick - mean_x), tick)


# --------------------------------------------------------------------------
# rules and decisions (levels 5, 7, 9)

@dataclass(frozen=True)
class EmitFlow:
    channel: int
    payload: tuple[tuple[str, Expr], ...]
    kind: FlowKind = FlowKind.INFORMATION

    def __init__(self, channel: int, payload, kind: FlowKind = FlowKind.INFORMATION):
        items = payload.items() if hasattr(payload, "items") else payload
        object.__setattr__(self, "channel", channel)
        object.__setattr__(self, "payload", tuple((k, as_expr(v)) for k, v in items))
        object.__setattr__(self, "kind", kind)

    @property
    def target(self):
        return self.channel


@dataclass(frozen=True)
class SetState:
    name: str
    expr: Expr

    def __init__(self, name: str, expr):
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "expr", as_expr(expr))

    @property
    def target(self):
        return self.name


@dataclass(frozen=True)
class Noop:
    @property
    def target(self):
        return None


Action = Union[EmitFlow, SetState, Noop]


@dataclass(frozen=True)
class Rule:
    id: str
    priority: int
    condition: Expr
    action: Action = field(default_factory=Noop)

    def __init__(self, id: str, priority: int, condition, action: Action | None = None):
        object.__setattr__(self, "id", id)
        object.__setattr__(self, "priority", int(priority))
        object.__setattr__(self, "condition", as_expr(condition))
        object.__setattr__(self, "action", action if action is not None else Noop())


@dataclass(frozen=True)
class Decision:
    rule_id: str
    priority: int
    action: Action
    target: object


class StateUpdate(NamedTuple):
    name: str
    value: Scalar


class ClosureMode(str, enum.Enum):
    FIRST_MATCH = "first_match"
    ALL_MATCH = "all_match"


# --------------------------------------------------------------------------
# the unit

class RegulationUnit:
    """Sensors, memory, essential variables, forecasts and rules for one node."""

    def __init__(self, sensors: Sequence[Sensor] = (),
                 essential_vars: Sequence[EssentialVariable] = (),
                 forecasts: Sequence[ForecastSpec] = (),
                 rules: Sequence[Rule] = (),
                 closure_mode: ClosureMode | str = ClosureMode.FIRST_MATCH,
                 memory: Memory | None = None,
                 audit: bool = True):
        self.sensors = list(sensors)
        self.essential_vars = list(essential_vars)
        self.forecasts = list(forecasts)
        self.rules = list(rules)
        self.closure_mode = ClosureMode(closure_mode)
        self.memory = memory if memory is not None else Memory()
        self.audit = audit
        self.sensed_now: dict[str, Scalar] = {}
        self.last_forecasts: dict[str, Forecast] = {}
        self.last_decisions: list[Decision] = []
        self._functions: dict | None = None
        self._bound_keys: tuple[str, ...] = ()
        self._check_ids()

    def _check_ids(self) -> None:
        for label, items in (("sensor", [s.id for s in self.sensors]),
                             ("rule", [r.id for r in self.rules]),
                             ("essential variable", [v.name for v in self.essential_vars]),
                             ("forecast", [f.name for f in self.forecasts])):
            seen = set()
            for item in items:
                if item in seen:
                    raise ConfigurationError(f"duplicate {label} id {item!r}")
                seen.add(item)

    @property
    def memory_keys(self) -> list[str]:
        keys: list[str] = []
        for sensor in self.sensors:
            for _, key in sensor.extraction:
                if key not in keys:
                    keys.append(key)
        return keys

    def bind(self, state_names: Iterable[str], out_channels: Iterable[int] = ()) -> None:
        """Resolve every name a rule, binding or forecast uses.

        Raises :class:`ConfigurationError` for an unbound name, a name that
        two sources both provide, or an emission on a foreign channel.
        """
        state_names = list(state_names)
        out_channels = set(out_channels)
        mem_keys = self.memory_keys
        sources: dict[str, str] = {"tick": "the tick counter"}
        groups = (("state", state_names), ("memory key", mem_keys),
                  ("essential variable", [v.name for v in self.essential_vars]),
                  ("forecast", [f.name for f in self.forecasts]))
        for label, names in groups:
            for name in names:
                if name in sources:
                    raise ConfigurationError(f"name {name!r} is both {sources[name]} and a {label}")
                sources[name] = f"a {label}"
        # essential variables only see state, sensed values and the tick
        base = ["tick", *state_names, *mem_keys]
        for var in self.essential_vars:
            var.binding.check(base, mem_keys)
        for spec in self.forecasts:
            if spec.key not in mem_keys:
                raise ConfigurationError(f"forecast {spec.name!r} reads unknown memory key {spec.key!r}")
        for rule in self.rules:
            rule.condition.check(sources, mem_keys)
            action = rule.action
            if isinstance(action, SetState):
                if action.name not in state_names:
                    raise ConfigurationError(f"rule {rule.id!r} sets unknown state {action.name!r}")
                action.expr.check(sources, mem_keys)
            elif isinstance(action, EmitFlow):
                if action.channel not in out_channels:
                    raise ConfigurationError(
                        f"rule {rule.id!r} emits on channel {action.channel!r}, not an output of this system")
                for _, expr in action.payload:
                    expr.check(sources, mem_keys)
        self._bound_keys = tuple(mem_keys)
        self._functions = self._make_functions()

    def _make_functions(self) -> dict:
        memory = self.memory

        def mem_last(key, default=0):
            values = memory.values(key)
            return values[-1] if values else default

        def mem_sum(key, n=None):
            values = memory.values(key)
            return sum(values if n is None else values[-n:])

        def mem_mean(key, n=None, default=0):
            values = memory.values(key)
            if n is not None:
                values = values[-n:]
            return sum(values) / len(values) if values else default

        def mem_count(key):
            return len(memory.values(key))

        return {"__builtins__": {}, **PURE_FUNCTIONS, "mem_last": mem_last,
                "mem_sum": mem_sum, "mem_mean": mem_mean, "mem_count": mem_count}

    @property
    def functions(self) -> dict:
        if self._functions is None:
            raise ConfigurationError("regulation unit used before bind()")
        return self._functions

    def namespace(self, local_state: dict, tick: int) -> dict:
        ns = dict(local_state)
        for key in self._bound_keys:
            ns[key] = self.sensed_now.get(key, 0)
        ns["tick"] = tick
        return ns


# --------------------------------------------------------------------------
# pipeline steps

def sense(unit: RegulationUnit, inbox: Sequence[Flow], tick: int,
          events: list | None = None, system: str = "") -> list[MemoryRecord]:
    """Copy sensed flow attributes into memory, sensor by sensor, flow by flow."""
    unit.sensed_now = {}
    out = []
    for sensor in unit.sensors:
        for flow in inbox:
            if not sensor.matches(flow):
                continue
            for attr, key in sensor.extraction:
                if attr not in flow.payload:
                    if events is not None:
                        events.append(Event(tick, system, "SensorMiss",
                                            f"sensor={sensor.id} flow={flow.id} missing={attr}"))
                    continue
                value = flow.payload[attr]
                out.append(unit.memory.append(tick, key, value))
                unit.sensed_now[key] = value
    return out


def refresh_essentials(unit: RegulationUnit, ns: dict, tick: int,
                       events: list | None = None, system: str = "") -> None:
    functions = unit.functions
    for var in unit.essential_vars:
        var.value = float(var.binding.evaluate(ns, functions))
        if not var.in_margin and events is not None:
            events.append(Event(tick, system, "OutOfMargin",
                                f"{var.name}={format_scalar(var.value)} outside "
                                f"[{format_scalar(float(var.lo))}, {format_scalar(float(var.hi))}]"))
    for var in unit.essential_vars:
        ns[var.name] = var.value


def imagine(unit: RegulationUnit, ns: dict, tick: int) -> dict[str, Forecast]:
    out = {}
    for spec in unit.forecasts:
        forecast = spec.compute(unit.memory, tick)
        out[spec.name] = forecast
        ns[spec.name] = forecast.value
    unit.last_forecasts = out
    return out


def evaluate_rules(unit: RegulationUnit, context: dict, tick: int) -> list[Decision]:
    """One decision per rule whose condition holds, in declaration order."""
    functions = unit.functions
    out = []
    for rule in unit.rules:
        if rule.condition.evaluate(context, functions):
            out.append(Decision(rule.id, rule.priority, rule.action, rule.action.target))
    return out


def coordinate(decisions: Sequence[Decision]) -> list[Decision]:
    """Stable order: priority high to low, then rule id."""
    return sorted(decisions, key=lambda d: (-d.priority, d.rule_id))


def close(decisions: Sequence[Decision], closure_mode: ClosureMode | str) -> list[Decision]:
    """Pick the decisions that execute.

    ``first_match`` keeps the first (highest-priority) decision per target;
    ``all_match`` keeps them all. Order is preserved.
    """
    if ClosureMode(closure_mode) is ClosureMode.ALL_MATCH:
        return list(decisions)
    seen = set()
    out = []
    for decision in decisions:
        if decision.target in seen:
            continue
        seen.add(decision.target)
        out.append(decision)
    return out


def resolve(decision: Decision, ns: dict, functions: dict):
    action = decision.action
    if isinstance(action, SetState):
        return StateUpdate(action.name, action.expr.evaluate(ns, functions))
    if isinstance(action, EmitFlow):
        payload = {name: expr.evaluate(ns, functions) for name, expr in action.payload}
        return Emission(action.channel, payload, action.kind)
    return None


def regulate(node: "SystemNode", inbox: Sequence[Flow], tick: int,
             events: list | None = None) -> list:
    """Run the whole regulation pipeline and return resolved actions.

    The result holds :class:`StateUpdate` and :class:`Emission` items in
    execution order. All expressions see the same tick snapshot.
    """
    unit = node.regulation
    if unit is None:
        raise InvariantViolation(f"{node.name!r} has no regulation unit")
    sense(unit, inbox, tick, events, node.name)
    ns = unit.namespace(node.local_state, tick)
    refresh_essentials(unit, ns, tick, events, node.name)
    imagine(unit, ns, tick)
    chosen = close(coordinate(evaluate_rules(unit, ns, tick)), unit.closure_mode)
    unit.last_decisions = chosen
    functions = unit.functions
    actions = []
    for decision in chosen:
        resolved = resolve(decision, ns, functions)
        if resolved is None:
            continue
        actions.append(resolved)
        if unit.audit and events is not None:
            if isinstance(resolved, StateUpdate):
                detail = f"rule={decision.rule_id} set {resolved.name}={format_scalar(resolved.value)}"
            else:
                detail = f"rule={decision.rule_id} emit channel={resolved.channel}"
            events.append(Event(tick, node.name, "Decision", detail))
    return actions

"""Discrete-time scheduler, run control and metric collection.

Each :meth:`Engine.step` runs five phases in a fixed order:

1. deliver due flows on every channel, ascending channel id;
2. for every node in ascending id: regulate (if it has a unit), then run
   its operational behavior, collecting the outbox;
3. perform all sends in collection order;
4. sample every metric;
5. advance the tick.

Sends happen after every node has acted, so no node can observe a flow in
the tick it was sent and the node order only matters for tie-free replay.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

from .core import Event, FlowKind, World, format_scalar, operational_step, parse_scalar
from .errors import (ConfigurationError, ControlError, InvariantViolation, NLMError,
                     TerminalStateError)
from .regulation import StateUpdate, regulate
from .rng import SplitMix64, check_seed

log = logging.getLogger(__name__)

CSV_HEADER = ("tick", "system", "metric", "value")


class Status(enum.Enum):
    RUNNING = "Running"
    PAUSED = "Paused"
    STOPPED = "Stopped"


class EngineState(NamedTuple):
    tick: int
    status: Status


class TickReport(NamedTuple):
    tick: int
    delivered: int
    sent: int
    events: int


@dataclass(frozen=True)
class MetricSpec:
    """A per-tick sample of one system quantity.

    ``source`` is a local-state name (optionally written ``state:<name>``),
    ``essential:<name>`` for an essential variable, or ``queue_length`` when
    ``system`` names a channel.
    """

    name: str
    system: str
    source: str


class Row(NamedTuple):
    tick: int
    system: str
    metric: str
    value: object


class Trace:
    """Metric rows and events of one run.

    Rows are ordered by (tick, metric declaration order). The trace is
    frozen when its run completes; later mutation raises.
    """

    def __init__(self, metrics: Sequence[str] = (), meta: dict | None = None):
        self.metrics = tuple(metrics)
        self.meta = dict(meta or {})
        self._rows: list[Row] = []
        self._events: list[Event] = []
        self.frozen = False

    @property
    def rows(self) -> tuple[Row, ...]:
        return tuple(self._rows)

    @property
    def events(self) -> tuple[Event, ...]:
        return tuple(self._events)

    def _writable(self):
        if self.frozen:
            raise InvariantViolation("trace is immutable after its run completed")

    def add_row(self, row: Row) -> None:
        self._writable()
        self._rows.append(row)

    def add_event(self, event: Event) -> None:
        self._writable()
        self._events.append(event)

    def freeze(self) -> "Trace":
        self.frozen = True
        return self

    def __len__(self) -> int:
        return len(self._rows)

    # -- serialization ----------------------------------------------------

    def csv_text(self) -> str:
        buf = io.StringIO()
        self.write_csv_to(buf)
        return buf.getvalue()

    def write_csv_to(self, fh) -> None:
        fh.write(",".join(CSV_HEADER) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerows((r.tick, r.system, r.metric, format_scalar(r.value)) for r in self._rows)

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            self.write_csv_to(fh)

    def events_text(self) -> str:
        return "".join(f"{e.tick}\t{e.system}\t{e.kind}\t{e.detail}\n" for e in self._events)

    def write_events(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.events_text())

    @classmethod
    def read_csv(cls, path: Path | str) -> "Trace":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != CSV_HEADER:
                raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)!r}, got {header!r}")
            rows = []
            names: dict[str, None] = {}
            for lineno, rec in enumerate(reader, start=2):
                if len(rec) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
                rows.append(Row(int(rec[0]), rec[1], rec[2], parse_scalar(rec[3])))
                names.setdefault(rec[2])
        trace = cls(names)
        trace._rows = rows
        return trace.freeze()

    @staticmethod
    def parse_events(text: str) -> list[Event]:
        out = []
        for line in text.splitlines():
            tick, system, kind, detail = line.split("\t", 3)
            out.append(Event(int(tick), system, kind, detail))
        return out


# --------------------------------------------------------------------------
# metrics

def collect(trace: Trace, metric: str) -> list:
    """Time series of one metric, in tick order."""
    if metric not in trace.metrics:
        raise KeyError(f"unknown metric {metric!r}")
    return [r.value for r in trace._rows if r.metric == metric]


class Summary:
    """count/mean/variance/min/max of a series.

    ``variance`` is the population variance. For an empty series only
    ``count`` is defined; the other statistics raise ``ValueError``.
    """

    __slots__ = ("count", "_mean", "_variance", "_min", "_max")

    def __init__(self, count: int, mean=None, variance=None, lo=None, hi=None):
        self.count = count
        self._mean, self._variance, self._min, self._max = mean, variance, lo, hi

    def _get(self, value, name):
        if self.count == 0:
            raise ValueError(f"{name} of an empty series is undefined")
        return value

    mean = property(lambda self: self._get(self._mean, "mean"))
    variance = property(lambda self: self._get(self._variance, "variance"))
    min = property(lambda self: self._get(self._min, "min"))
    max = property(lambda self: self._get(self._max, "max"))

    def as_dict(self) -> dict:
        if self.count == 0:
            return {"count": 0}
        return {"count": self.count, "mean": self._mean, "variance": self._variance,
                "min": self._min, "max": self._max}

    def __repr__(self) -> str:
        return f"Summary({self.as_dict()})"


def summarize(series: Iterable[float]) -> Summary:
    # Welford's single-pass update
    count = 0
    mean = 0.0
    m2 = 0.0
    lo = hi = None
    for x in series:
        count += 1
        delta = x - mean
        mean += delta / count
        m2 += delta * (x - mean)
        lo = x if lo is None or x < lo else lo
        hi = x if hi is None or x > hi else hi
    if count == 0:
        return Summary(0)
    return Summary(count, mean, m2 / count, lo, hi)


# --------------------------------------------------------------------------
# the engine

Check = Callable[[World, int], None]


class Engine:
    """Drives one world tick by tick.

    ``checks`` are callables ``(world, tick)`` run at the end of every tick;
    they raise :class:`InvariantViolation` to abort the run.
    ``delivery_events`` lists flow kinds whose deliveries are logged as
    ``Delivery`` events (shipment send/receive ticks).
    """

    def __init__(self, world: World, metrics: Sequence[MetricSpec] = (),
                 seed: int | None = None, checks: Sequence[Check] = (),
                 delivery_events: Iterable[FlowKind] = (), meta: dict | None = None):
        self.world = world
        self.seed = check_seed(world.seed if seed is None else seed)
        world.seed = self.seed
        self.checks = list(checks)
        self.delivery_kinds = frozenset(delivery_events)
        self.status = Status.RUNNING
        self._bind(world)
        world.freeze()
        self._samplers = self._resolve_metrics(metrics)
        self.trace = Trace([m.name for m in metrics], meta)
        self.steps_executed = 0
        for node in world.systems.values():
            node.rng = SplitMix64.for_system(self.seed, node.id)
        self._node_order = sorted(world.systems)
        self._channel_order = sorted(world.channels)

    @staticmethod
    def _bind(world: World) -> None:
        for node in world.systems.values():
            if node.regulation is not None:
                try:
                    node.regulation.bind(node.local_state, node.out_channels)
                except ConfigurationError as exc:
                    raise ConfigurationError(f"system {node.name!r}: {exc}") from None

    def _resolve_metrics(self, metrics: Sequence[MetricSpec]):
        seen = set()
        samplers = []
        for spec in metrics:
            if spec.name in seen:
                raise ConfigurationError(f"duplicate metric name {spec.name!r}", f"metric:{spec.name}")
            seen.add(spec.name)
            try:
                samplers.append((spec, self._sampler(spec)))
            except ConfigurationError as exc:
                raise ConfigurationError(f"metric {spec.name!r}: {exc}", f"metric:{spec.name}") from None
        return samplers

    def _sampler(self, spec: MetricSpec):
        world = self.world
        sid = world.id_of(spec.system)
        source = spec.source
        if sid in world.channels:
            if source != "queue_length":
                raise ConfigurationError(f"channel {spec.system!r} only offers queue_length")
            ch = world.channels[sid]
            return lambda: len(ch.queue)
        node = world.systems[sid]
        if source.startswith("essential:"):
            var_name = source.split(":", 1)[1]
            unit = node.regulation
            match = [v for v in unit.essential_vars if v.name == var_name] if unit else []
            if not match:
                raise ConfigurationError(f"{spec.system!r} has no essential variable {var_name!r}")
            var = match[0]
            return lambda: var.value
        state_name = source.split(":", 1)[1] if source.startswith("state:") else source
        if state_name not in node.local_state:
            raise ConfigurationError(f"{spec.system!r} has no state {state_name!r}")
        state = node.local_state
        return lambda: state[state_name]

    # -- state ------------------------------------------------------------

    @property
    def tick(self) -> int:
        return self.world.tick

    @property
    def state(self) -> EngineState:
        return EngineState(self.world.tick, self.status)

    def log_event(self, event: Event) -> None:
        self.trace.add_event(event)

    # -- stepping ---------------------------------------------------------

    def step(self) -> TickReport:
        if self.status is not Status.RUNNING:
            raise ControlError(f"cannot step while {self.status.value}")
        world = self.world
        tick = world.tick
        events = self.trace._events
        n_events = len(events)
        phase, system = "deliver", None
        delivered = 0
        try:
            inboxes: dict[int, list] = {sid: [] for sid in self._node_order}
            for cid in self._channel_order:
                ch = world.channels[cid]
                system = ch.name
                flows = world.deliver_due(cid, tick)
                if not flows:
                    continue
                delivered += len(flows)
                inboxes[ch.dst].extend(flows)
                if self.delivery_kinds:
                    receiver = world.systems[ch.dst].name
                    for f in flows:
                        if f.kind in self.delivery_kinds:
                            events.append(Event(tick, receiver, "Delivery",
                                                f"channel={ch.name} flow={f.id} qty={format_scalar(f.qty)} "
                                                f"sent={f.sent_tick}"))
            outbox: list[tuple] = []
            for sid in self._node_order:
                node = world.systems[sid]
                system = node.name
                inbox = inboxes[sid]
                if node.regulation is not None:
                    phase = "regulate"
                    for action in regulate(node, inbox, tick, events):
                        if isinstance(action, StateUpdate):
                            node.local_state[action.name] = action.value
                        elif action.channel not in node.out_channels:
                            raise InvariantViolation(
                                f"regulation emitted on channel {action.channel!r}, which it does not own")
                        else:
                            outbox.append((node, action))
                phase = "operate"
                for emission in operational_step(node, inbox, tick):
                    outbox.append((node, emission))
            phase = "send"
            for node, emission in outbox:
                system = node.name
                world.send(emission.channel, emission.payload, emission.kind)
            phase, system = "sample", None
            add = self.trace._rows.append
            for spec, sample in self._samplers:
                system = spec.system
                add(Row(tick, spec.system, spec.name, sample()))
            phase, system = "check", None
            for check in self.checks:
                check(world, tick)
        except InvariantViolation as exc:
            self.status = Status.STOPPED
            raise exc.locate(tick=tick, system=system, phase=phase)
        except NLMError:
            self.status = Status.STOPPED
            raise
        except Exception as exc:
            self.status = Status.STOPPED
            raise InvariantViolation(f"{type(exc).__name__}: {exc}", tick=tick,
                                     system=system, phase=phase) from exc
        world.tick = tick + 1
        self.steps_executed += 1
        return TickReport(tick, delivered, len(outbox), len(events) - n_events)

    def run(self, ticks: int) -> Trace:
        """Step up to ``ticks`` times while running; freeze the trace when done."""
        if ticks < 0:
            raise ValueError("ticks must be ≥ 0")
        if self.status is Status.STOPPED:
            raise TerminalStateError("engine is stopped")
        done = 0
        while done < ticks and self.status is Status.RUNNING:
            self.step()
            done += 1
        if done == ticks:
            self.finish()
        return self.trace

    def finish(self) -> Trace:
        self.status = Status.STOPPED
        return self.trace.freeze()

    # -- run control ------------------------------------------------------

    def pause(self) -> EngineState:
        if self.status is Status.STOPPED:
            raise TerminalStateError("engine is stopped")
        self.status = Status.PAUSED
        return self.state

    def resume(self) -> EngineState:
        if self.status is Status.STOPPED:
            raise TerminalStateError("cannot resume a stopped engine")
        self.status = Status.RUNNING
        return self.state

    def stop(self) -> EngineState:
        self.finish()
        return self.state

    def step_n(self, k: int) -> EngineState:
        if self.status is Status.STOPPED:
            raise TerminalStateError("engine is stopped")
        if self.status is not Status.PAUSED:
            raise ControlError("step_n is only valid while paused")
        if k < 0:
            raise ControlError("step count must be ≥ 0")
        self.status = Status.RUNNING
        try:
            for _ in range(k):
                self.step()
        finally:
            if self.status is Status.RUNNING:
                self.status = Status.PAUSED
        return self.state

    def control(self, command) -> EngineState:
        """Apply ``pause``, ``resume``, ``stop``, ``step N`` or ``("step_n", k)``."""
        if isinstance(command, tuple):
            name, *args = command
        else:
            name, *args = str(command).split()
        name = name.lower()
        if name == "pause" and not args:
            return self.pause()
        if name == "resume" and not args:
            return self.resume()
        if name == "stop" and not args:
            return self.stop()
        if name in ("step", "step_n") and len(args) == 1:
            try:
                k = int(args[0])
            except (TypeError, ValueError):
                raise ControlError(f"bad step count {args[0]!r}") from None
            return self.step_n(k)
        raise ControlError(f"unknown command {command!r}")


def run(world: World, ticks: int, seed: int, metrics: Sequence[MetricSpec] = (),
        **engine_options) -> Trace:
    """Build an engine over ``world``, run ``ticks`` steps and return the frozen trace."""
    engine = Engine(world, metrics, seed, **engine_options)
    return engine.run(ticks)


"""Systems as black boxes joined by typed, delayed channels.

A :class:`World` owns every :class:`SystemNode` and every :class:`Channel`.
Channels draw their ids from the same counter as nodes, so a channel is
itself a (non-regulated) system with a fixed latency behavior. Flows sent
on a channel become visible to the receiving node ``latency`` ticks later,
never in the same tick.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Iterable, Mapping, NamedTuple, Union

from .errors import ConfigurationError, InvariantViolation

if TYPE_CHECKING:
    from .regulation import RegulationUnit
    from .rng import SplitMix64

SystemId = int
ChannelId = int
FlowId = int
Scalar = Union[int, float, str]


class FlowKind(enum.Enum):
    INFORMATION = "information"
    MATERIAL = "material"
    ENERGY = "energy"

    @classmethod
    def parse(cls, text: str) -> "FlowKind":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown flow kind {text!r}") from None


# Kinds that carry a conserved "qty" attribute.
QUANTITY_KINDS = (FlowKind.MATERIAL, FlowKind.ENERGY)


def is_scalar(value) -> bool:
    return isinstance(value, (int, float, str)) and not isinstance(value, bool)


def format_scalar(value: Scalar) -> str:
    """Canonical text form used in every output file."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_scalar(text: str) -> Scalar:
    """Inverse of :func:`format_scalar` for numbers; anything else stays text."""
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def check_payload(payload: Mapping[str, Scalar], kind: FlowKind) -> dict[str, Scalar]:
    """Validate a flow payload and return it as a fresh ordered dict."""
    out: dict[str, Scalar] = {}
    for name, value in payload.items():
        if not isinstance(name, str) or not name:
            raise InvariantViolation(f"payload attribute names must be non-empty text, got {name!r}")
        if not is_scalar(value):
            raise InvariantViolation(f"payload attribute {name!r} is not a scalar: {value!r}")
        out[name] = value
    if kind in QUANTITY_KINDS:
        qty = out.get("qty")
        if qty is None:
            raise InvariantViolation(f"{kind.value} flow without a 'qty' attribute")
        if isinstance(qty, str) or qty < 0:
            raise InvariantViolation(f"{kind.value} flow with invalid qty {qty!r}")
    return out


@dataclass(frozen=True, slots=True)
class Flow:
    id: FlowId
    kind: FlowKind
    payload: dict
    source: SystemId
    channel: ChannelId
    sent_tick: int
    due_tick: int

    @property
    def qty(self):
        return self.payload.get("qty", 0)


class Event(NamedTuple):
    """A trace event; ``system`` is the system name."""

    tick: int
    system: str
    kind: str
    detail: str


class Emission(NamedTuple):
    """One entry of an outbox: what to send, and where."""

    channel: ChannelId
    payload: dict
    kind: FlowKind


@dataclass(eq=False)
class Channel:
    """A fixed-latency FIFO pipe between two systems."""

    id: ChannelId
    name: str
    src: SystemId
    dst: SystemId
    latency: int
    queue: deque = field(default_factory=deque, repr=False)
    sent_count: int = 0
    delivered_count: int = 0
    sent_qty: float = 0
    delivered_qty: float = 0

    @property
    def queued_count(self) -> int:
        return len(self.queue)

    @property
    def queued_qty(self):
        return self.sent_qty - self.delivered_qty

    def flows(self) -> tuple[Flow, ...]:
        return tuple(self.queue)


Behavior = Callable[["SystemNode", list, int], Iterable[Emission]]


@dataclass(eq=False)
class SystemNode:
    id: SystemId
    name: str
    behavior: Behavior | None
    regulation: "RegulationUnit | None" = None
    in_channels: list[ChannelId] = field(default_factory=list)
    out_channels: list[ChannelId] = field(default_factory=list)
    local_state: dict[str, Scalar] = field(default_factory=dict)
    rng: "SplitMix64 | None" = field(default=None, repr=False)

    @property
    def regulated(self) -> bool:
        return self.regulation is not None


class World:
    """The wired system-of-systems.

    Topology is fixed once :meth:`freeze` has been called (the engine does
    this on construction).
    """

    def __init__(self, seed: int = 0):
        self.systems: dict[SystemId, SystemNode] = {}
        self.channels: dict[ChannelId, Channel] = {}
        self.tick = 0
        self.seed = seed
        self._next_id = 0
        self._next_flow = 0
        self._names: dict[str, SystemId] = {}
        self.frozen = False

    # -- construction -----------------------------------------------------

    def _allocate(self, name: str) -> SystemId:
        if self.frozen:
            raise ConfigurationError("world topology is fixed once the engine has started")
        if not isinstance(name, str) or not name:
            raise ConfigurationError("system name must be non-empty")
        if name in self._names:
            raise ConfigurationError(f"duplicate system name {name!r}")
        sid = self._next_id
        self._next_id += 1
        self._names[name] = sid
        return sid

    def add_system(self, name: str, behavior: Behavior | None = None,
                   regulation: "RegulationUnit | None" = None,
                   state: Mapping[str, Scalar] | None = None) -> SystemId:
        """Register a node and return its id. Ids grow in registration order."""
        local = dict(state or {})
        for key, value in local.items():
            if not isinstance(key, str) or not key or not is_scalar(value):
                raise ConfigurationError(f"local state entry {key!r}={value!r} is not name -> scalar")
        sid = self._allocate(name)
        self.systems[sid] = SystemNode(sid, name, behavior, regulation, local_state=local)
        return sid

    def connect(self, src: SystemId, dst: SystemId, latency_ticks: int,
                name: str | None = None) -> ChannelId:
        if src not in self.systems:
            raise ConfigurationError(f"unknown channel source {src!r}")
        if dst not in self.systems:
            raise ConfigurationError(f"unknown channel destination {dst!r}")
        if not isinstance(latency_ticks, int) or isinstance(latency_ticks, bool) or latency_ticks < 1:
            raise ConfigurationError(f"latency must be ≥ 1, got {latency_ticks!r}")
        if name is None:
            name = f"{self.systems[src].name}->{self.systems[dst].name}"
            suffix = 2
            base = name
            while name in self._names:
                name = f"{base}#{suffix}"
                suffix += 1
        cid = self._allocate(name)
        self.channels[cid] = Channel(cid, name, src, dst, latency_ticks)
        self.systems[src].out_channels.append(cid)
        self.systems[dst].in_channels.append(cid)
        return cid

    def freeze(self) -> None:
        self.frozen = True

    # -- lookup -----------------------------------------------------------

    def id_of(self, name: str) -> SystemId:
        try:
            return self._names[name]
        except KeyError:
            raise ConfigurationError(f"no system named {name!r}") from None

    def name_of(self, sid: SystemId) -> str:
        if sid in self.systems:
            return self.systems[sid].name
        if sid in self.channels:
            return self.channels[sid].name
        raise ConfigurationError(f"unknown system id {sid!r}")

    def node(self, name_or_id) -> SystemNode:
        sid = self.id_of(name_or_id) if isinstance(name_or_id, str) else name_or_id
        try:
            return self.systems[sid]
        except KeyError:
            raise ConfigurationError(f"{name_or_id!r} is not a node") from None

    def channel(self, name_or_id) -> Channel:
        cid = self.id_of(name_or_id) if isinstance(name_or_id, str) else name_or_id
        try:
            return self.channels[cid]
        except KeyError:
            raise ConfigurationError(f"{name_or_id!r} is not a channel") from None

    # -- flows ------------------------------------------------------------

    def send(self, channel: ChannelId, payload: Mapping[str, Scalar], kind: FlowKind) -> FlowId:
        """Enqueue a flow; it is due ``latency`` ticks after the current tick."""
        ch = self.channels.get(channel)
        if ch is None:
            raise InvariantViolation(f"send on unknown channel {channel!r}")
        body = check_payload(payload, kind)
        fid = self._next_flow
        self._next_flow += 1
        flow = Flow(fid, kind, body, ch.src, ch.id, self.tick, self.tick + ch.latency)
        ch.queue.append(flow)
        ch.sent_count += 1
        if kind in QUANTITY_KINDS:
            ch.sent_qty += body["qty"]
        return fid

    def deliver_due(self, channel: ChannelId, tick: int) -> list[Flow]:
        """Remove and return the flows due exactly at ``tick``, in send order.

        Latency is fixed per channel and ticks only grow, so the queue is
        already sorted by ``(due_tick, id)`` and delivery pops from the front.
        """
        if tick != self.tick:
            raise InvariantViolation(f"deliver_due at tick {tick} while the world is at {self.tick}")
        ch = self.channels[channel]
        queue = ch.queue
        out: list[Flow] = []
        while queue and queue[0].due_tick <= tick:
            flow = queue.popleft()
            if flow.due_tick < tick:
                raise InvariantViolation(
                    f"flow {flow.id} on {ch.name!r} was due at {flow.due_tick} and never delivered")
            out.append(flow)
        if out:
            ch.delivered_count += len(out)
            ch.delivered_qty += sum(f.payload["qty"] for f in out if f.kind in QUANTITY_KINDS)
        return out

    @property
    def next_flow_id(self) -> FlowId:
        return self._next_flow


def operational_step(node: SystemNode, inbox: list[Flow], tick: int) -> list[Emission]:
    """Run a node's level-2 behavior and check it only emits on its own channels."""
    if node.behavior is None:
        return []
    outbox = []
    allowed = node.out_channels
    for item in node.behavior(node, inbox, tick) or ():
        emission = item if isinstance(item, Emission) else Emission(*item)
        if emission.channel not in allowed:
            raise InvariantViolation(
                f"{node.name!r} emitted on channel {emission.channel!r}, which it does not own")
        outbox.append(emission)
    return outbox

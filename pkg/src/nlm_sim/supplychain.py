"""Multi-echelon supply chain built on the regulated-agent kernel.

Topology is a path::

    customer <-> retailer <-> distributor* <-> manufacturer

Orders travel upstream as Information flows (latency 1); goods travel
downstream as Material flows (latency = lead time of the link). The
customer is a non-regulated agent that draws demand from its own random
substream. Every other node is regulated: an order sensor feeds memory, a
moving-average forecast feeds a replenishment rule, and ``on_hand`` is
watched as an essential variable.

The manufacturer holds finished goods like any other echelon and
replenishes from unbounded raw supply. Its production lead time is the
latency of its outbound material channel; work in progress lives in its
local state as one slot per tick modulo that lead time.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

from .core import Emission, FlowKind, World
from .engine import Engine, MetricSpec, Trace, summarize
from .errors import ConfigurationError, InvariantViolation
from .regulation import (ClosureMode, EssentialVariable, ForecastSpec, RegulationUnit, Rule,
                         Sensor, SetState)

INFORMATION = FlowKind.INFORMATION
MATERIAL = FlowKind.MATERIAL

# Decimal places kept before rounding a target up. Targets are ratios with
# small denominators, so this only removes float noise such as 51.000000000000004.
TARGET_SNAP_DIGITS = 9


class NodeRole(str, enum.Enum):
    CUSTOMER = "customer"
    RETAILER = "retailer"
    DISTRIBUTOR = "distributor"
    MANUFACTURER = "manufacturer"


# --------------------------------------------------------------------------
# inventory arithmetic

@dataclass(frozen=True)
class InventoryState:
    on_hand: int = 0
    backorders: int = 0
    in_transit: int = 0

    def __post_init__(self):
        if self.on_hand < 0 or self.backorders < 0 or self.in_transit < 0:
            raise InvariantViolation(f"negative inventory component in {self}")

    @property
    def inventory_position(self) -> int:
        return self.on_hand + self.in_transit - self.backorders


def fill_orders(inventory: InventoryState, demanded: int) -> tuple[int, InventoryState]:
    """Ship what stock allows against backorders plus new demand."""
    if demanded < 0:
        raise InvariantViolation(f"negative demand {demanded}")
    owed = demanded + inventory.backorders
    shipped = min(inventory.on_hand, owed)
    return shipped, replace(inventory, on_hand=inventory.on_hand - shipped,
                            backorders=owed - shipped)


def receive_shipment(inventory: InventoryState, qty: int) -> InventoryState:
    if qty < 0:
        raise InvariantViolation(f"negative shipment {qty}")
    if qty > inventory.in_transit:
        raise InvariantViolation(
            f"received {qty} units but only {inventory.in_transit} were in transit")
    return replace(inventory, on_hand=inventory.on_hand + qty,
                   in_transit=inventory.in_transit - qty)


# --------------------------------------------------------------------------
# demand and policies

@dataclass(frozen=True)
class Constant:
    d: int

    def __post_init__(self):
        if self.d < 0:
            raise ConfigurationError(f"constant demand must be ≥ 0, got {self.d}", "demand")

    def draw(self, rng) -> int:
        return self.d


@dataclass(frozen=True)
class UniformInt:
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo < 0 or self.hi < 0:
            raise ConfigurationError("demand bounds must be ≥ 0", "demand")
        if self.lo > self.hi:
            raise ConfigurationError(f"demand lo {self.lo} > hi {self.hi}", "demand")

    def draw(self, rng) -> int:
        return rng.next_uniform_int(self.lo, self.hi)


DemandModel = Union[Constant, UniformInt]


@dataclass(frozen=True)
class OrderUpTo:
    review: int = 1
    window: int = 1
    safety: int = 0

    def __post_init__(self):
        if self.review < 1:
            raise ConfigurationError(f"review period must be ≥ 1, got {self.review}")
        if self.window < 1:
            raise ConfigurationError(f"forecast window must be ≥ 1, got {self.window}")
        if self.safety < 0:
            raise ConfigurationError(f"safety stock must be ≥ 0, got {self.safety}")


@dataclass(frozen=True)
class Ss:
    s: int
    S: int

    def __post_init__(self):
        if self.s < 0:
            raise ConfigurationError(f"reorder point s must be ≥ 0, got {self.s}")
        if self.s > self.S:
            raise ConfigurationError(f"reorder point s={self.s} exceeds order-up-to level S={self.S}")


Policy = Union[OrderUpTo, Ss]


def order_up_to_target(policy: OrderUpTo, forecast: float, lead_time: int) -> int:
    """``ceil(forecast * (L + R)) + safety``."""
    cover = round(forecast * (lead_time + policy.review), TARGET_SNAP_DIGITS)
    return math.ceil(cover) + policy.safety


def place_order(policy: Policy, inventory: InventoryState, forecast: float,
                lead_time: int, tick: int) -> int:
    """Replenishment quantity for this tick; 0 outside a review tick."""
    position = inventory.inventory_position
    if isinstance(policy, OrderUpTo):
        if tick % policy.review:
            return 0
        return max(0, order_up_to_target(policy, forecast, lead_time) - position)
    return policy.S - position if position < policy.s else 0


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class NodeConfig:
    name: str
    role: NodeRole
    initial_on_hand: int = 0
    policy: Policy | None = None
    margin_lo: float = 0.0
    margin_hi: float = math.inf
    forecast_default: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "role", NodeRole(self.role))


@dataclass(frozen=True)
class Link:
    src: str
    dst: str
    kind: FlowKind
    latency: int

    @property
    def label(self) -> str:
        return f"link:{self.src}->{self.dst}"


@dataclass(frozen=True)
class ChainConfig:
    nodes: tuple[NodeConfig, ...]
    links: tuple[Link, ...]
    demand: DemandModel
    horizon: int
    warmup: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "links", tuple(self.links))

    def node(self, name: str) -> NodeConfig:
        for node in self.nodes:
            if node.name == name:
                return node
        raise KeyError(name)

    @property
    def customer(self) -> str:
        return next(n.name for n in self.nodes if n.role is NodeRole.CUSTOMER)

    def effective_warmup(self) -> int:
        """Configured warmup, or forecast window + 2 * longest lead time."""
        if self.warmup is not None:
            return self.warmup
        windows = [n.policy.window for n in self.nodes if isinstance(n.policy, OrderUpTo)]
        window = max(windows, default=1)
        lead = max((l.latency for l in self.links if l.kind is MATERIAL), default=1)
        return window + 2 * lead


@dataclass(frozen=True)
class ChainLayout:
    """A validated chain: node names from customer to manufacturer plus lead times."""

    path: tuple[str, ...]
    lead_time: dict = field(hash=False)       # name -> inbound material lead time
    warmup: int = 0


def validate(config: ChainConfig) -> ChainLayout:
    """Check every chain invariant and return the customer-to-manufacturer path."""
    names = [n.name for n in config.nodes]
    seen = set()
    for name in names:
        if not name:
            raise ConfigurationError("node name must be non-empty")
        if name in seen:
            raise ConfigurationError(f"duplicate node name {name!r}", f"node:{name}")
        seen.add(name)
    by_name = {n.name: n for n in config.nodes}
    counts = {role: sum(1 for n in config.nodes if n.role is role) for role in NodeRole}
    for role in (NodeRole.CUSTOMER, NodeRole.RETAILER, NodeRole.MANUFACTURER):
        if counts[role] != 1:
            raise ConfigurationError(
                f"a chain needs exactly one {role.value} node, found {counts[role]}")

    for node in config.nodes:
        subject = f"node:{node.name}"
        if node.initial_on_hand < 0:
            raise ConfigurationError(f"{node.name}: initial_on_hand must be ≥ 0", subject)
        if not node.margin_lo <= node.margin_hi:
            raise ConfigurationError(f"{node.name}: margin_lo exceeds margin_hi", subject)
        if node.role is NodeRole.CUSTOMER:
            if node.policy is not None:
                raise ConfigurationError(f"{node.name}: a customer has no replenishment policy", subject)
        elif node.policy is None:
            raise ConfigurationError(f"{node.name}: a {node.role.value} needs a policy", subject)

    upstream: dict[str, Link] = {}
    downstream: dict[str, Link] = {}
    for link in config.links:
        for end in (link.src, link.dst):
            if end not in by_name:
                raise ConfigurationError(f"{link.label} refers to unknown node {end!r}", link.label)
        if link.src == link.dst:
            raise ConfigurationError(f"{link.label} is a self-loop", link.label)
        if link.latency < 1:
            raise ConfigurationError("latency must be ≥ 1", link.label)
        if link.kind is INFORMATION:
            if link.latency != 1:
                raise ConfigurationError(f"{link.label}: order links have latency 1", link.label)
            if link.src in upstream:
                raise ConfigurationError(f"{link.label}: {link.src!r} already orders from "
                                         f"{upstream[link.src].dst!r}", link.label)
            upstream[link.src] = link
        elif link.kind is MATERIAL:
            if link.dst in downstream:
                raise ConfigurationError(f"{link.label}: {link.dst!r} already receives from "
                                         f"{downstream[link.dst].src!r}", link.label)
            downstream[link.dst] = link
        else:
            raise ConfigurationError(f"{link.label}: {link.kind.value} links are not part of a chain",
                                     link.label)

    path = [config.customer]
    while path[-1] in upstream:
        nxt = upstream[path[-1]].dst
        if nxt in path:
            raise ConfigurationError(f"{upstream[path[-1]].label} closes a cycle",
                                     upstream[path[-1]].label)
        path.append(nxt)
    roles = [by_name[name].role for name in path]
    if (len(path) != len(config.nodes) or roles[1] is not NodeRole.RETAILER
            or roles[-1] is not NodeRole.MANUFACTURER
            or any(r is not NodeRole.DISTRIBUTOR for r in roles[2:-1])):
        shown = " -> ".join(path)
        raise ConfigurationError(
            f"order links must run customer -> retailer -> distributor* -> manufacturer "
            f"through every node; found {shown}")
    lead_time = {}
    for down, up in zip(path, path[1:]):
        mat = downstream.get(down)
        if mat is None or mat.src != up:
            raise ConfigurationError(f"missing material link {up}->{down}", f"link:{up}->{down}")
        lead_time[down] = mat.latency
    extra = set(downstream) - set(path[:-1])
    if extra:
        link = downstream[sorted(extra)[0]]
        raise ConfigurationError(f"{link.label} does not follow the order path", link.label)
    manufacturer = path[-1]
    outbound = downstream[path[-2]]
    lead_time[manufacturer] = outbound.latency

    warmup = config.effective_warmup()
    if config.horizon < 0:
        raise ConfigurationError("horizon must be ≥ 0", "world")
    if warmup < 0 or warmup >= config.horizon:
        raise ConfigurationError(f"warmup {warmup} must be < horizon {config.horizon}", "world")
    return ChainLayout(tuple(path), lead_time, warmup)


# --------------------------------------------------------------------------
# node construction

CUSTOMER_STATE = ("demand", "order_qty", "received", "received_total")
CUSTOMER_METRICS = ("demand", "received_total")
STOCK_STATE = ("on_hand", "backorders", "in_transit", "order_qty",
               "demanded", "shipped", "shipped_on_time", "received")

# Inventory position after this tick's demand; receipts leave it unchanged.
_POSITION = "(on_hand + in_transit - backorders - demand)"


def replenishment_rules(policy: Policy) -> list[Rule]:
    """If-then rules that set the node's order quantity for this tick.

    ``replenish`` outranks ``hold``; with first-match closure only one of
    them writes ``order_qty``.
    """
    if isinstance(policy, OrderUpTo):
        replenish = Rule(
            "replenish", 10, "tick % review == 0",
            SetState("order_qty",
                     f"max(0, ceil(round(demand_forecast * (lead + review), {TARGET_SNAP_DIGITS}))"
                     f" + safety - {_POSITION})"))
    else:
        replenish = Rule("replenish", 10, f"{_POSITION} < reorder_point",
                         SetState("order_qty", f"order_up_to_level - {_POSITION}"))
    hold = Rule("hold", 0, "tick >= 0", SetState("order_qty", 0))
    return [replenish, hold]


def _policy_state(policy: Policy, lead: int) -> dict:
    if isinstance(policy, OrderUpTo):
        return {"lead": lead, "review": policy.review, "safety": policy.safety}
    return {"lead": lead, "reorder_point": policy.s, "order_up_to_level": policy.S}


def make_regulation(node: NodeConfig) -> RegulationUnit:
    policy = node.policy
    window = policy.window if isinstance(policy, OrderUpTo) else 1
    return RegulationUnit(
        sensors=[Sensor("orders", [("qty", "demand")], INFORMATION),
                 Sensor("receipts", [("qty", "receipt")], MATERIAL)],
        essential_vars=[EssentialVariable("stock", node.margin_lo, node.margin_hi, "on_hand")],
        forecasts=[ForecastSpec("demand_forecast", "demand", "moving_average", window,
                                node.forecast_default)],
        rules=replenishment_rules(policy),
        closure_mode=ClosureMode.FIRST_MATCH,
    )


def customer_behavior(demand: DemandModel, order_channel: int):
    def behave(node, inbox, tick):
        state = node.local_state
        received = 0
        for flow in inbox:
            if flow.kind is MATERIAL:
                received += flow.payload["qty"]
        state["received"] = received
        state["received_total"] += received
        d = demand.draw(node.rng)
        state["demand"] = d
        state["order_qty"] = d
        return [Emission(order_channel, {"qty": d}, INFORMATION)]
    return behave


def stock_behavior(ship_channel: int, order_channel: int | None, production_lead: int | None):
    """Receive, fill, ship, then pass the regulated order upstream.

    With ``order_channel`` None the node is the manufacturer and its order
    goes into the production pipeline instead.
    """
    def behave(node, inbox, tick):
        state = node.local_state
        demand = 0
        receipt = 0
        for flow in inbox:
            if flow.kind is MATERIAL:
                receipt += flow.payload["qty"]
            elif flow.kind is INFORMATION:
                demand += flow.payload["qty"]
        slot = None
        if production_lead is not None:
            slot = f"wip_{tick % production_lead}"
            receipt += state[slot]
            state["produced"] += state[slot]
            state[slot] = 0
        inv = InventoryState(state["on_hand"], state["backorders"], state["in_transit"])
        inv = receive_shipment(inv, receipt)
        prior_backorders = inv.backorders
        shipped, inv = fill_orders(inv, demand)
        order = state["order_qty"]
        if order < 0:
            raise InvariantViolation(f"negative order quantity {order}")
        state["on_hand"] = inv.on_hand
        state["backorders"] = inv.backorders
        state["in_transit"] = inv.in_transit + order
        state["demanded"] = demand
        state["shipped"] = shipped
        state["shipped_on_time"] = min(demand, max(0, shipped - prior_backorders))
        state["received"] = receipt
        out = []
        if shipped:
            out.append(Emission(ship_channel, {"qty": shipped}, MATERIAL))
        if slot is not None:
            state[slot] = order
        else:
            out.append(Emission(order_channel, {"qty": order}, INFORMATION))
        return out
    return behave


def build_chain(config: ChainConfig) -> World:
    """Wire the chain: nodes first (config order), then order and material channels."""
    layout = validate(config)
    world = World()
    path = layout.path
    for node in config.nodes:
        if node.role is NodeRole.CUSTOMER:
            state = {key: 0 for key in CUSTOMER_STATE}
            world.add_system(node.name, None, None, state)
            continue
        lead = layout.lead_time[node.name]
        state = {key: 0 for key in STOCK_STATE}
        state["on_hand"] = node.initial_on_hand
        state.update(_policy_state(node.policy, lead))
        if node.role is NodeRole.MANUFACTURER:
            state["produced"] = 0
            for k in range(lead):
                state[f"wip_{k}"] = 0
        world.add_system(node.name, None, make_regulation(node), state)
    order_ch = {}
    for down, up in zip(path, path[1:]):
        order_ch[down] = world.connect(world.id_of(down), world.id_of(up), 1,
                                       name=f"order:{down}->{up}")
    ship_ch = {}
    for down, up in zip(path, path[1:]):
        ship_ch[up] = world.connect(world.id_of(up), world.id_of(down), layout.lead_time[down],
                                    name=f"material:{up}->{down}")
    for node in config.nodes:
        sys_node = world.node(node.name)
        if node.role is NodeRole.CUSTOMER:
            sys_node.behavior = customer_behavior(config.demand, order_ch[node.name])
        elif node.role is NodeRole.MANUFACTURER:
            sys_node.behavior = stock_behavior(ship_ch[node.name], None,
                                               layout.lead_time[node.name])
        else:
            sys_node.behavior = stock_behavior(ship_ch[node.name], order_ch[node.name], None)
    return world


# --------------------------------------------------------------------------
# metrics and checks

def chain_metrics(config: ChainConfig) -> list[MetricSpec]:
    """Per-node series every report relies on, named ``<node>.<state>``."""
    out = []
    for node in config.nodes:
        keys = CUSTOMER_METRICS if node.role is NodeRole.CUSTOMER else STOCK_STATE
        for key in keys:
            out.append(MetricSpec(f"{node.name}.{key}", node.name, key))
    return out


def material_balance(world: World, config: ChainConfig) -> tuple[int, int]:
    """``(initial stock + produced, on_hand + in channels + delivered to the customer)``.

    Initial stock counts as produced before tick 0.
    """
    produced = sum(n.initial_on_hand for n in config.nodes)
    accounted = 0
    for node in config.nodes:
        state = world.node(node.name).local_state
        if node.role is NodeRole.CUSTOMER:
            accounted += state["received_total"]
            continue
        accounted += state["on_hand"]
        if node.role is NodeRole.MANUFACTURER:
            produced += state["produced"]
    for ch in world.channels.values():
        if ch.name.startswith("material:"):
            accounted += ch.queued_qty
    return produced, accounted


def conservation_check(config: ChainConfig):
    def check(world: World, tick: int) -> None:
        produced, accounted = material_balance(world, config)
        if produced != accounted:
            raise InvariantViolation(
                f"material not conserved: produced {produced}, accounted {accounted}")
    return check


def make_engine(config: ChainConfig, seed: int, extra_metrics: Sequence[MetricSpec] = (),
                check_conservation: bool = True) -> Engine:
    layout = validate(config)
    world = build_chain(config)
    meta = {"seed": seed, "horizon": config.horizon, "warmup": layout.warmup,
            "customer": config.customer, "path": layout.path}
    return Engine(world, chain_metrics(config) + list(extra_metrics), seed,
                  checks=[conservation_check(config)] if check_conservation else [],
                  delivery_events=(MATERIAL,), meta=meta)


def run_chain(config: ChainConfig, seed: int, extra_metrics: Sequence[MetricSpec] = ()) -> Trace:
    engine = make_engine(config, seed, extra_metrics)
    return engine.run(config.horizon)


# --------------------------------------------------------------------------
# evaluation

def _series_in_window(trace: Trace, metric: str, window: tuple[int, int]) -> list:
    start, end = window
    if metric not in trace.metrics:
        raise KeyError(f"unknown metric {metric!r}")
    return [r.value for r in trace._rows if r.metric == metric and start <= r.tick < end]


def _check_window(trace: Trace, window: tuple[int, int]) -> None:
    start, end = window
    if start > end:
        raise ValueError(f"empty window [{start}, {end})")
    warmup = trace.meta.get("warmup")
    horizon = trace.meta.get("horizon")
    if warmup is not None and start < warmup:
        raise ValueError(f"window starts at {start}, before the warmup ends at {warmup}")
    if horizon is not None and end > horizon:
        raise ValueError(f"window ends at {end}, past the horizon {horizon}")


def fill_rate(trace: Trace, node: str, window: tuple[int, int]) -> float | None:
    """Units shipped on time over units demanded; None when nothing was demanded."""
    _check_window(trace, window)
    demanded = sum(_series_in_window(trace, f"{node}.demanded", window))
    on_time = sum(_series_in_window(trace, f"{node}.shipped_on_time", window))
    if demanded == 0:
        return None
    return on_time / demanded


def customer_name(trace: Trace) -> str:
    if "customer" in trace.meta:
        return trace.meta["customer"]
    candidates = [m[:-len(".demand")] for m in trace.metrics if m.endswith(".demand")]
    if len(candidates) != 1:
        raise KeyError("cannot tell which system is the customer")
    return candidates[0]


def bullwhip_ratio(trace: Trace, node: str, window: tuple[int, int],
                   customer: str | None = None) -> float | None:
    """Var(orders placed by ``node``) / Var(customer demand); None if demand is flat."""
    _check_window(trace, window)
    customer = customer or customer_name(trace)
    demand_var = summarize(_series_in_window(trace, f"{customer}.demand", window)).variance
    if demand_var == 0:
        return None
    order_var = summarize(_series_in_window(trace, f"{node}.order_qty", window)).variance
    return order_var / demand_var

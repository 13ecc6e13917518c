"""Line-oriented scenario files.

::

    # comments start with '#'
    [world]
    ticks = 200
    seed = 42
    warmup = 13            # optional

    [node:retailer]
    role = retailer
    initial_on_hand = 40
    policy = order_up_to   # or: ss
    review = 1
    window = 4
    safety = 5
    margin_lo = 0
    margin_hi = 200
    forecast_default = 10

    [link:customer->retailer]
    kind = information
    latency = 1

    [demand]
    model = uniform_int    # or: constant (key d)
    lo = 5
    hi = 15

    [metric:retailer_stock]
    system = retailer
    source = essential:stock

Parsing either returns a :class:`ScenarioFile` or raises
:class:`ScenarioError` naming the line and reason.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

from .core import FlowKind, format_scalar
from .engine import MetricSpec
from .errors import ConfigurationError, ScenarioError
from .rng import MASK64
from .supplychain import (ChainConfig, Constant, Link, NodeConfig, NodeRole, OrderUpTo, Ss,
                          UniformInt, make_engine)

NAME_RE = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.-]*")
SECTION_RE = re.compile(r"\[(?P<kind>[a-z]+)(?::(?P<arg>[^\]]*))?\]")


@dataclass(frozen=True)
class ScenarioFile:
    chain: ChainConfig
    seed: int = 0
    metrics: tuple[MetricSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "metrics", tuple(self.metrics))

    @property
    def ticks(self) -> int:
        return self.chain.horizon


class _Section:
    def __init__(self, kind: str, arg: str | None, line: int):
        self.kind = kind
        self.arg = arg
        self.line = line
        self.items: dict[str, tuple[str, int]] = {}

    def take(self, key: str, conv, default=..., check=None, message=None):
        if key not in self.items:
            if default is ...:
                raise ScenarioError(self.line, f"[{self.header}] is missing required key {key!r}")
            return default
        text, line = self.items.pop(key)
        try:
            value = conv(text)
        except ValueError as exc:
            raise ScenarioError(line, f"{key}: {exc}") from None
        if check is not None and not check(value):
            raise ScenarioError(line, message or f"{key}: value {text!r} out of range")
        return value

    def finish(self) -> None:
        for key, (_, line) in self.items.items():
            raise ScenarioError(line, f"unknown key {key!r} in [{self.header}]")

    @property
    def header(self) -> str:
        return self.kind if self.arg is None else f"{self.kind}:{self.arg}"


def _int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ValueError(f"expected an integer, got {text!r}") from None


def _float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"expected a number, got {text!r}") from None
    if math.isnan(value):
        raise ValueError("NaN is not allowed")
    return value


def _choice(*options):
    def conv(text: str) -> str:
        value = text.strip().lower()
        if value not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return value
    return conv


def _lex(text: str) -> list[_Section]:
    sections: list[_Section] = []
    current: _Section | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            m = SECTION_RE.fullmatch(line)
            if not m:
                raise ScenarioError(lineno, f"malformed section header {line!r}")
            current = _Section(m["kind"], m["arg"], lineno)
            sections.append(current)
            continue
        if "=" not in line:
            raise ScenarioError(lineno, f"expected 'key = value', got {line!r}")
        if current is None:
            raise ScenarioError(lineno, "key outside of any section")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ScenarioError(lineno, "empty key")
        if key in current.items:
            raise ScenarioError(lineno, f"duplicate key {key!r} in [{current.header}]")
        current.items[key] = (value, lineno)
    return sections


def _name(arg: str | None, line: int, what: str) -> str:
    if arg is None or not NAME_RE.fullmatch(arg):
        raise ScenarioError(line, f"invalid {what} name {arg!r}")
    return arg


def _policy(sec: _Section):
    policy = sec.take("policy", _choice("order_up_to", "ss"), None)
    if policy is None:
        return None
    if policy == "order_up_to":
        return OrderUpTo(
            review=sec.take("review", _int, 1, lambda v: v >= 1, "review must be ≥ 1"),
            window=sec.take("window", _int, 1, lambda v: v >= 1, "window must be ≥ 1"),
            safety=sec.take("safety", _int, 0, lambda v: v >= 0, "safety must be ≥ 0"))
    s = sec.take("s", _int, check=lambda v: v >= 0, message="s must be ≥ 0")
    big_s = sec.take("S", _int, check=lambda v: v >= 0, message="S must be ≥ 0")
    if s > big_s:
        raise ScenarioError(sec.line, f"[{sec.header}] s={s} exceeds S={big_s}")
    return Ss(s, big_s)


def parse_scenario(text: str) -> ScenarioFile:
    """Parse and fully validate a scenario document."""
    sections = _lex(text)
    world = demand = None
    nodes: list[NodeConfig] = []
    node_lines: dict[str, int] = {}
    links: list[Link] = []
    link_lines: dict[str, int] = {}
    metrics: list[MetricSpec] = []
    metric_lines: dict[str, int] = {}

    for sec in sections:
        if sec.kind == "world":
            if sec.arg is not None:
                raise ScenarioError(sec.line, "[world] takes no name")
            if world is not None:
                raise ScenarioError(sec.line, "duplicate [world] section")
            world = (
                sec.take("ticks", _int, check=lambda v: v >= 0, message="ticks must be ≥ 0"),
                sec.take("seed", _int, 0, lambda v: 0 <= v <= MASK64,
                         "seed must be an unsigned 64-bit integer"),
                sec.take("warmup", _int, None, lambda v: v >= 0, "warmup must be ≥ 0"),
                sec.line)
        elif sec.kind == "node":
            name = _name(sec.arg, sec.line, "node")
            if name in node_lines:
                raise ScenarioError(sec.line, f"duplicate node name {name!r}")
            node_lines[name] = sec.line
            role = sec.take("role", _choice(*(r.value for r in NodeRole)))
            nodes.append(NodeConfig(
                name=name,
                role=NodeRole(role),
                initial_on_hand=sec.take("initial_on_hand", _int, 0, lambda v: v >= 0,
                                         "initial_on_hand must be ≥ 0"),
                policy=_policy(sec),
                margin_lo=sec.take("margin_lo", _float, 0.0),
                margin_hi=sec.take("margin_hi", _float, math.inf),
                forecast_default=sec.take("forecast_default", _float, 0.0,
                                          math.isfinite, "forecast_default must be finite"),
            ))
        elif sec.kind == "link":
            arg = sec.arg or ""
            if "->" not in arg:
                raise ScenarioError(sec.line, f"link header must be [link:<from>-><to>], got {arg!r}")
            src, dst = (_name(part, sec.line, "node") for part in arg.split("->", 1))
            label = f"link:{src}->{dst}"
            if label in link_lines:
                raise ScenarioError(sec.line, f"duplicate link {src}->{dst}")
            link_lines[label] = sec.line
            kind = FlowKind(sec.take("kind", _choice("information", "material")))
            latency = sec.take("latency", _int, check=lambda v: v >= 1, message="latency must be ≥ 1")
            links.append(Link(src, dst, kind, latency))
        elif sec.kind == "demand":
            if sec.arg is not None:
                raise ScenarioError(sec.line, "[demand] takes no name")
            if demand is not None:
                raise ScenarioError(sec.line, "duplicate [demand] section")
            model = sec.take("model", _choice("constant", "uniform_int"))
            nonneg = lambda v: v >= 0  # noqa: E731
            if model == "constant":
                demand = Constant(sec.take("d", _int, check=nonneg, message="d must be ≥ 0"))
            else:
                lo = sec.take("lo", _int, check=nonneg, message="lo must be ≥ 0")
                hi = sec.take("hi", _int, check=nonneg, message="hi must be ≥ 0")
                if lo > hi:
                    raise ScenarioError(sec.line, f"[demand] lo={lo} exceeds hi={hi}")
                demand = UniformInt(lo, hi)
            demand_line = sec.line
        elif sec.kind == "metric":
            name = _name(sec.arg, sec.line, "metric")
            if name in metric_lines:
                raise ScenarioError(sec.line, f"duplicate metric {name!r}")
            metric_lines[name] = sec.line
            metrics.append(MetricSpec(name, sec.take("system", str), sec.take("source", str)))
        else:
            raise ScenarioError(sec.line, f"unknown section [{sec.header}]")
        sec.finish()

    last_line = sections[-1].line if sections else 1
    if world is None:
        raise ScenarioError(last_line, "missing [world] section")
    if demand is None:
        raise ScenarioError(last_line, "missing [demand] section")
    ticks, seed, warmup, world_line = world
    chain = ChainConfig(tuple(nodes), tuple(links), demand, ticks, warmup)
    lines = {"world": world_line, "demand": demand_line}
    lines.update({f"node:{k}": v for k, v in node_lines.items()})
    lines.update(link_lines)
    lines.update({f"metric:{k}": v for k, v in metric_lines.items()})
    try:
        make_engine(chain, seed, metrics, check_conservation=False)
    except ConfigurationError as exc:
        subject = exc.subject or ""
        line = lines.get(subject)
        if line is None and subject.startswith("link:"):
            # a link that is missing altogether: point at the node it should feed
            line = lines.get("node:" + subject.rsplit("->", 1)[-1])
        raise ScenarioError(line or world_line, str(exc)) from None
    return ScenarioFile(chain, seed, tuple(metrics))


def load_scenario(path: Path | str) -> ScenarioFile:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------

def _num(value) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return format_scalar(value)


def serialize_scenario(scenario: ScenarioFile) -> str:
    """Canonical text for ``scenario``; parsing it gives back an equal value."""
    chain = scenario.chain
    out = ["[world]", f"ticks = {chain.horizon}", f"seed = {scenario.seed}"]
    if chain.warmup is not None:
        out.append(f"warmup = {chain.warmup}")
    for node in chain.nodes:
        out += ["", f"[node:{node.name}]", f"role = {node.role.value}"]
        if node.initial_on_hand:
            out.append(f"initial_on_hand = {node.initial_on_hand}")
        policy = node.policy
        if isinstance(policy, OrderUpTo):
            out += ["policy = order_up_to", f"review = {policy.review}",
                    f"window = {policy.window}", f"safety = {policy.safety}"]
        elif isinstance(policy, Ss):
            out += ["policy = ss", f"s = {policy.s}", f"S = {policy.S}"]
        if node.margin_lo != 0.0:
            out.append(f"margin_lo = {_num(node.margin_lo)}")
        if node.margin_hi != math.inf:
            out.append(f"margin_hi = {_num(node.margin_hi)}")
        if node.forecast_default != 0.0:
            out.append(f"forecast_default = {_num(node.forecast_default)}")
    for link in chain.links:
        out += ["", f"[link:{link.src}->{link.dst}]", f"kind = {link.kind.value}",
                f"latency = {link.latency}"]
    demand = chain.demand
    out += ["", "[demand]"]
    if isinstance(demand, Constant):
        out += ["model = constant", f"d = {demand.d}"]
    else:
        out += ["model = uniform_int", f"lo = {demand.lo}", f"hi = {demand.hi}"]
    for metric in scenario.metrics:
        out += ["", f"[metric:{metric.name}]", f"system = {metric.system}",
                f"source = {metric.source}"]
    return "\n".join(out) + "\n"

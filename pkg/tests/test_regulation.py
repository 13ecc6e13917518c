import itertools
import math
import random
from fractions import Fraction

import pytest

from nlm_sim.core import Emission, FlowKind, World
from nlm_sim.engine import Engine, MetricSpec
from nlm_sim.errors import ConfigurationError, InvariantViolation
from nlm_sim.regulation import (ClosureMode, Decision, EmitFlow, EssentialVariable,
                                ForecastSpec, Memory, MemoryRecord, Noop, RegulationUnit,
                                Rule, Sensor, SetState, close, coordinate,
                                forecast_linear_trend, forecast_moving_average, query)


# -- memory ---------------------------------------------------------------

def linear_query(records, key, t0, t1):
    return [r for r in records if r.key == key and t0 <= r.tick <= t1]


def random_memory(rng, n, keys="abc"):
    memory = Memory()
    tick = 0
    for _ in range(n):
        tick += rng.choice([0, 0, 1, 2])
        memory.append(tick, rng.choice(keys), rng.randint(-50, 50))
    return memory


def test_query_matches_linear_scan():
    rng = random.Random(1)
    for _ in range(50):
        memory = random_memory(rng, rng.randint(0, 60))
        recs = memory.records
        for _ in range(20):
            t0 = rng.randint(-2, 40)
            t1 = t0 + rng.randint(0, 20)
            key = rng.choice("abcd")
            assert query(memory, key, (t0, t1)) == linear_query(recs, key, t0, t1)


def test_query_rejects_inverted_window():
    with pytest.raises(ValueError):
        Memory().query("a", 3, 2)


def test_memory_is_append_only_in_tick_order():
    memory = Memory([MemoryRecord(0, "a", 1), MemoryRecord(2, "a", 2)])
    memory.append(2, "b", 5)
    with pytest.raises(InvariantViolation):
        memory.append(1, "a", 3)
    assert [r.tick for r in memory] == [0, 2, 2]


def test_history_is_strictly_before():
    memory = Memory()
    for t, v in [(0, 1), (1, 2), (1, 3), (2, 4), (3, 5)]:
        memory.append(t, "d", v)
    assert memory.history("d", 2, 2) == ([1, 1], [2, 3])
    assert memory.history("d", 0) == ([], [])
    assert memory.history("zz", 9) == ([], [])


def test_log_format(tmp_path):
    memory = Memory()
    memory.append(0, "demand", 4)
    memory.append(3, "level", 2.5)
    path = tmp_path / "m" / "x.log"
    memory.write_log(path)
    assert path.read_text() == "0\tdemand\t4\n3\tlevel\t2.5\n"


# -- forecasts --------------------------------------------------------------

def exact_trend(points, at):
    xs = [Fraction(x) for x, _ in points]
    ys = [Fraction(y) for _, y in points]
    n = len(points)
    # normal equations for y = a + b x
    sx, sy = sum(xs), sum(ys)
    sxx = sum(x * x for x in xs)
    sxy = sum(x * y for x, y in zip(xs, ys))
    det = n * sxx - sx * sx
    if det == 0:
        return sy / n
    b = (n * sxy - sx * sy) / det
    a = (sy - b * sx) / n
    return a + b * at


def close_rel(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(b))


def test_moving_average_against_exact_mean():
    rng = random.Random(2)
    for _ in range(300):
        memory = random_memory(rng, rng.randint(0, 40), keys="d")
        n = rng.randint(1, 10)
        tick = rng.randint(0, 45)
        prior = [Fraction(r.value) for r in memory if r.tick < tick][-n:]
        expected = sum(prior) / len(prior) if prior else Fraction(7)
        got = forecast_moving_average(memory, "d", n, tick, default=7).value
        assert close_rel(got, float(expected))


def test_linear_trend_against_normal_equations():
    rng = random.Random(3)
    for _ in range(300):
        memory = random_memory(rng, rng.randint(0, 40), keys="d")
        n = rng.randint(2, 10)
        tick = rng.randint(0, 45)
        prior = [(r.tick, r.value) for r in memory if r.tick < tick][-n:]
        got = forecast_linear_trend(memory, "d", n, tick, default=-1).value
        expected = exact_trend(prior, tick) if prior else Fraction(-1)
        assert close_rel(got, float(expected))


def test_linear_trend_on_a_line_extrapolates():
    memory = Memory()
    for t in range(5):
        memory.append(t, "d", 3 * t + 1)
    assert forecast_linear_trend(memory, "d", 5, 7).value == pytest.approx(22)


def test_forecast_window_validation():
    with pytest.raises(ConfigurationError):
        ForecastSpec("f", "d", "linear_trend", 1)
    with pytest.raises(ConfigurationError):
        ForecastSpec("f", "d", "moving_average", 0)


# -- coordinate / close -----------------------------------------------------

def random_decisions(rng):
    ids = rng.sample(range(1000), rng.randint(0, 12))
    return [Decision(f"r{i:03d}", rng.randint(0, 3), Noop(), rng.choice("xyz"))
            for i in ids]


def test_coordinate_is_permutation_invariant_and_sorted():
    rng = random.Random(4)
    for _ in range(500):
        ds = random_decisions(rng)
        ordered = coordinate(ds)
        shuffled = ds[:]
        rng.shuffle(shuffled)
        assert coordinate(shuffled) == ordered
        assert sorted(ordered, key=id) == sorted(ds, key=id)
        keys = [(-d.priority, d.rule_id) for d in ordered]
        assert keys == sorted(keys)


def test_first_match_keeps_best_per_target():
    rng = random.Random(5)
    for _ in range(500):
        ds = random_decisions(rng)
        chosen = close(coordinate(ds), "first_match")
        assert sorted(d.target for d in chosen) == sorted({d.target for d in ds})
        for d in chosen:
            rivals = [e for e in ds if e.target == d.target]
            assert d == min(rivals, key=lambda e: (-e.priority, e.rule_id))
        assert close(coordinate(ds), ClosureMode.ALL_MATCH) == coordinate(ds)


def test_tie_break_by_rule_id():
    a = Decision("a", 5, Noop(), "t")
    b = Decision("b", 5, Noop(), "t")
    for perm in itertools.permutations([b, a]):
        assert close(coordinate(perm), "first_match") == [a]


# -- the unit inside an engine ----------------------------------------------

def regulated_world(unit, state, behavior=None, latency=1):
    world = World()
    src = world.add_system("src", behavior)
    dst = world.add_system("dst", None, unit, state)
    ch = world.connect(src, dst, latency)
    return world, ch


def feeder(values, kind=FlowKind.INFORMATION):
    def behave(node, inbox, tick):
        if tick < len(values) and values[tick] is not None:
            return [Emission(node.out_channels[0], values[tick], kind)]
        return []
    return behave


def test_bind_rejects_unbound_names():
    unit = RegulationUnit(rules=[Rule("r", 1, "nope > 0", SetState("x", 1))])
    with pytest.raises(ConfigurationError, match="unbound"):
        unit.bind(["x"])


def test_bind_rejects_unknown_targets_and_channels():
    with pytest.raises(ConfigurationError):
        RegulationUnit(rules=[Rule("r", 1, "1", SetState("y", 1))]).bind(["x"])
    with pytest.raises(ConfigurationError):
        RegulationUnit(rules=[Rule("r", 1, "1", EmitFlow(7, {"a": 1}))]).bind(["x"], [3])


def test_bind_rejects_name_collisions():
    unit = RegulationUnit(sensors=[Sensor("s", [("qty", "x")])])
    with pytest.raises(ConfigurationError, match="both"):
        unit.bind(["x"])


def test_duplicate_rule_ids():
    with pytest.raises(ConfigurationError):
        RegulationUnit(rules=[Rule("r", 1, "1"), Rule("r", 2, "1")])


def test_unbound_unit_refuses_to_run():
    with pytest.raises(ConfigurationError):
        RegulationUnit().functions


def test_pipeline_sense_forecast_decide():
    unit = RegulationUnit(
        sensors=[Sensor("s", [("qty", "demand")])],
        forecasts=[ForecastSpec("f", "demand", window=2)],
        rules=[Rule("high", 5, "demand > f", SetState("flag", "demand - f")),
               Rule("low", 1, "1", SetState("flag", 0))],
    )
    world, _ = regulated_world(unit, {"flag": 0}, feeder([{"qty": 4}, {"qty": 8}, {"qty": 2}]))
    engine = Engine(world, [MetricSpec("flag", "dst", "flag")])
    trace = engine.run(4)
    # tick 1 sees 4 (no history, f = 0), tick 2 sees 8 (f = 4), tick 3 sees 2 (f = 6)
    assert [r.value for r in trace.rows] == [0, 4, 4, 0]
    assert [r.value for r in unit.memory] == [4, 8, 2]
    decisions = [e.detail for e in trace.events if e.kind == "Decision"]
    assert decisions == ["rule=low set flag=0", "rule=high set flag=4.0",
                         "rule=high set flag=4.0", "rule=low set flag=0"]


def test_sensed_value_defaults_to_zero_and_mem_functions():
    unit = RegulationUnit(
        sensors=[Sensor("s", [("qty", "q")])],
        rules=[Rule("r", 1, "1", SetState("x", "q + 10 * mem_count('q') + 100 * mem_sum('q')"))],
    )
    world, _ = regulated_world(unit, {"x": 0}, feeder([{"qty": 1}, None, {"qty": 2}]))
    trace = Engine(world, [MetricSpec("x", "dst", "x")]).run(4)
    assert [r.value for r in trace.rows] == [0, 111, 0 + 10 + 100, 2 + 20 + 300]


def test_sensor_miss_event():
    unit = RegulationUnit(sensors=[Sensor("s", [("qty", "q")])])
    world, _ = regulated_world(unit, {}, feeder([{"other": 1}]))
    trace = Engine(world).run(2)
    assert [(e.tick, e.kind) for e in trace.events] == [(1, "SensorMiss")]


def test_out_of_margin_once_per_tick_per_variable():
    unit = RegulationUnit(
        essential_vars=[EssentialVariable("lvl", 0, 10, "level"),
                        EssentialVariable("dbl", 0, 10, "2 * level")],
        rules=[Rule("step", 1, "1", SetState("level", "level + 3"))],
    )
    world = World()
    world.add_system("n", None, unit, {"level": 0})
    trace = Engine(world).run(6)
    margins = [(e.tick, e.detail.split("=")[0]) for e in trace.events if e.kind == "OutOfMargin"]
    # level at regulate time: 0, 3, 6, 9, 12, 15
    assert margins == [(2, "dbl"), (3, "dbl"), (4, "lvl"), (4, "dbl"), (5, "lvl"), (5, "dbl")]


def test_emit_flow_action():
    unit = RegulationUnit(rules=[Rule("ping", 1, "tick % 2 == 0", EmitFlow(0, {"n": "tick"}))])
    world = World()
    a = world.add_system("a", None, unit)
    b = world.add_system("b")
    ch = world.connect(a, b, 1)
    unit.rules = [Rule("ping", 1, "tick % 2 == 0", EmitFlow(ch, {"n": "tick"}))]
    engine = Engine(world)
    engine.run(5)
    assert world.channel(ch).sent_count == 3


def test_essential_variable_margins_checked():
    with pytest.raises(ConfigurationError):
        EssentialVariable("v", 5, 1, "x")
    v = EssentialVariable("v", 0, math.inf, "x", value=3.0)
    assert v.in_margin


# -- documented examples ----------------------------------------------------

def info_flow(payload, tick=0, kind=FlowKind.INFORMATION, fid=0):
    from nlm_sim.core import Flow
    return Flow(fid, kind, dict(payload), 0, 1, tick, tick + 1)


def test_sense_examples():
    from nlm_sim.regulation import sense
    unit = RegulationUnit(sensors=[Sensor("d", [("demand", "demand")])])
    assert sense(unit, [info_flow({"demand": 10})], 3) == [MemoryRecord(3, "demand", 10)]
    assert sense(unit, [], 4) == []
    material_only = RegulationUnit(sensors=[Sensor("m", [("qty", "q")], FlowKind.MATERIAL)])
    assert sense(material_only, [info_flow({"qty": 1})], 0) == []


def test_query_examples():
    memory = Memory()
    for t in range(1, 6):
        memory.append(t, "demand", t * 10)
    assert len(query(memory, "demand", (2, 4))) == 3
    assert query(memory, "other", (0, 9)) == []


def test_forecast_examples():
    memory = Memory()
    for t, v in enumerate([10, 12, 14], start=1):
        memory.append(t, "d", v)
    assert forecast_moving_average(memory, "d", 3, 4).value == 12
    assert forecast_moving_average(memory, "d", 2, 4).value == 13
    assert forecast_moving_average(Memory(), "d", 3, 4).value == 0
    line = Memory([MemoryRecord(t, "d", t) for t in (1, 2, 3)])
    assert forecast_linear_trend(line, "d", 3, 4).value == pytest.approx(4)
    flat = Memory([MemoryRecord(t, "d", 7) for t in range(6)])
    assert forecast_linear_trend(flat, "d", 4, 50).value == 7
    # identical memories give bit-identical forecasts
    twin = Memory(line.records)
    assert forecast_linear_trend(twin, "d", 3, 9) == forecast_linear_trend(line, "d", 3, 9)


def test_evaluate_rules_examples():
    from nlm_sim.regulation import evaluate_rules
    order = SetState("order", 10)
    unit = RegulationUnit(rules=[Rule("low", 1, "inv < 5", order),
                                 Rule("any", 0, "inv >= 0", SetState("flag", 1))])
    unit.bind(["inv", "order", "flag"])
    assert [d.rule_id for d in evaluate_rules(unit, {"inv": 3, "tick": 0}, 0)] == ["low", "any"]
    assert [d.rule_id for d in evaluate_rules(unit, {"inv": 6, "tick": 0}, 0)] == ["any"]
    lone = RegulationUnit(rules=[Rule("low", 1, "inv < 5", order)])
    lone.bind(["inv", "order"])
    (decision,) = evaluate_rules(lone, {"inv": 3, "tick": 0}, 0)
    assert decision.action == order and decision.target == "order"
    assert evaluate_rules(lone, {"inv": 6, "tick": 0}, 0) == []


def test_coordinate_and_close_examples():
    ds = [Decision(f"r{p}", p, Noop(), "order") for p in (2, 5, 1)]
    assert [d.priority for d in coordinate(ds)] == [5, 2, 1]
    a, b = Decision("a", 3, Noop(), "t"), Decision("b", 3, Noop(), "t")
    assert coordinate([b, a]) == [a, b]
    assert coordinate([]) == []
    high, low = Decision("h", 5, SetState("order", 10), "order"), Decision("l", 2, SetState("order", 3), "order")
    assert close([high, low], "first_match") == [high]
    assert close([high, low], "all_match") == [high, low]
    other = Decision("o", 1, SetState("flag", 1), "flag")
    assert close([high, other], "first_match") == [high, other]


def test_regulate_without_rules_still_records():
    from nlm_sim.regulation import regulate
    world = World()
    unit = RegulationUnit(sensors=[Sensor("s", [("qty", "q")])])
    sid = world.add_system("n", None, unit)
    unit.bind([])
    events = []
    assert regulate(world.node(sid), [info_flow({"qty": 2})], 0, events) == []
    assert len(unit.memory) == 1 and events == []


def test_regulate_equals_hand_composed_pipeline():
    from nlm_sim.regulation import (evaluate_rules, imagine, refresh_essentials, regulate,
                                    resolve, sense)

    def make_unit():
        return RegulationUnit(
            sensors=[Sensor("s", [("qty", "demand")])],
            essential_vars=[EssentialVariable("stock", 5, 100, "level")],
            forecasts=[ForecastSpec("f", "demand", window=2)],
            rules=[Rule("big", 3, "demand > f", SetState("order", "ceil(f) + demand")),
                   Rule("base", 1, "1", SetState("order", "ceil(f)")),
                   Rule("tag", 0, "level < 5", SetState("flag", "tick"))],
        )

    state = {"level": 3, "order": 0, "flag": 0}
    world = World()
    sid = world.add_system("n", None, make_unit(), dict(state))
    node = world.node(sid)
    node.regulation.bind(node.local_state)
    manual = make_unit()
    manual.bind(state)
    script = [[info_flow({"qty": 4})], [info_flow({"qty": 9}), info_flow({"qty": 1}, fid=1)], []]
    for tick, inbox in enumerate(script):
        events = []
        got = regulate(node, inbox, tick, events)
        sense(manual, inbox, tick)
        ns = manual.namespace(state, tick)
        refresh_essentials(manual, ns, tick)
        imagine(manual, ns, tick)
        chosen = close(coordinate(evaluate_rules(manual, ns, tick)), manual.closure_mode)
        expected = [resolve(d, ns, manual.functions) for d in chosen]
        assert got == expected
        assert [e.kind for e in events].count("OutOfMargin") == 1
        for update in got:
            node.local_state[update.name] = update.value
            state[update.name] = update.value
    assert manual.memory.records == node.regulation.memory.records


def test_unregulated_nodes_produce_no_regulation_events():
    world = World()
    a = world.add_system("a", lambda n, inbox, t: [Emission(n.out_channels[0], {"x": t},
                                                            FlowKind.INFORMATION)])
    b = world.add_system("b")
    world.connect(a, b, 1)
    trace = Engine(world).run(5)
    assert trace.events == ()
    assert world.channel(2).sent_count == 5

import random
from fractions import Fraction

import pytest

from nlm_sim.core import Emission, Event, FlowKind, World
from nlm_sim.engine import CSV_HEADER, Engine, MetricSpec, Row, Status, Trace, run, summarize
from nlm_sim.errors import (ConfigurationError, ControlError, InvariantViolation,
                            TerminalStateError)


def counter_world():
    """Node 'b' (id 0) passes what it hears to 'a' (id 1); 'a' counts ticks."""
    world = World()

    def relay(node, inbox, tick):
        node.local_state["heard"] = sum(f.payload["n"] for f in inbox)
        return [Emission(node.out_channels[0], {"n": tick}, FlowKind.INFORMATION)]

    def count(node, inbox, tick):
        node.local_state["count"] += 1
        node.local_state["got"] = sum(f.payload["n"] for f in inbox)
        return [Emission(node.out_channels[0], {"n": 1}, FlowKind.INFORMATION)]

    b = world.add_system("b", relay, state={"heard": 0})
    a = world.add_system("a", count, state={"count": 0, "got": 0})
    world.connect(b, a, 2)
    world.connect(a, b, 1)
    return world


METRICS = [MetricSpec("a.count", "a", "count"), MetricSpec("a.got", "a", "got"),
           MetricSpec("b.heard", "b", "heard"), MetricSpec("q", "b->a", "queue_length")]


def test_latency_and_sample_order():
    trace = run(counter_world(), 5, seed=0, metrics=METRICS)
    got = [r.value for r in trace.rows if r.metric == "a.got"]
    # 'b' sends its tick at t, 'a' sees it at t + 2
    assert got == [0, 0, 0, 1, 2]
    heard = [r.value for r in trace.rows if r.metric == "b.heard"]
    assert heard == [0, 1, 1, 1, 1]
    assert [r.value for r in trace.rows if r.metric == "q"] == [1, 2, 2, 2, 2]
    assert [(r.tick, r.metric) for r in trace.rows[:4]] == [(0, m.name) for m in METRICS]


def test_run_is_deterministic():
    a = run(counter_world(), 20, seed=3, metrics=METRICS).csv_text()
    b = run(counter_world(), 20, seed=3, metrics=METRICS).csv_text()
    assert a == b
    assert a.splitlines()[0] == ",".join(CSV_HEADER)


def noisy_world(extra_draws):
    world = World()

    def draw(node, inbox, tick):
        node.local_state["x"] = node.rng.next_uniform_int(0, 1000)
        return []

    def greedy(node, inbox, tick):
        for _ in range(extra_draws):
            node.rng.next_random()
        node.local_state["x"] = node.rng.next_uniform_int(0, 1000)
        return []

    world.add_system("greedy", greedy, state={"x": 0})
    world.add_system("quiet", draw, state={"x": 0})
    return world


def test_rng_streams_are_isolated():
    series = []
    for extra in (0, 1, 7):
        trace = run(noisy_world(extra), 50, seed=11, metrics=[MetricSpec("x", "quiet", "x")])
        series.append([r.value for r in trace.rows])
    assert series[0] == series[1] == series[2]


def test_seed_changes_streams():
    metric = [MetricSpec("x", "quiet", "x")]
    a = [r.value for r in run(noisy_world(0), 20, seed=1, metrics=metric).rows]
    b = [r.value for r in run(noisy_world(0), 20, seed=2, metrics=metric).rows]
    assert a != b


def test_step_n_equals_run():
    batch = run(counter_world(), 30, seed=0, metrics=METRICS).csv_text()
    engine = Engine(counter_world(), METRICS, seed=0)
    engine.pause()
    for k in (1, 0, 7, 12, 10):
        engine.control(f"step {k}")
    assert engine.state.tick == 30 and engine.status is Status.PAUSED
    engine.finish()
    assert engine.trace.csv_text() == batch


def test_control_state_machine():
    engine = Engine(counter_world(), METRICS)
    with pytest.raises(ControlError):
        engine.step_n(1)            # only valid while paused
    assert engine.pause().status is Status.PAUSED
    with pytest.raises(ControlError):
        engine.step()
    assert engine.control(("step_n", 2)).tick == 2
    assert engine.resume().status is Status.RUNNING
    engine.step()
    assert engine.control("stop").status is Status.STOPPED
    for command in ("pause", "resume", "step 1"):
        with pytest.raises(TerminalStateError):
            engine.control(command)
    with pytest.raises(TerminalStateError):
        engine.run(1)
    assert engine.trace.frozen


@pytest.mark.parametrize("command", ["jump", "step", "step x", "step -1", "pause now"])
def test_bad_commands(command):
    engine = Engine(counter_world())
    engine.pause()
    with pytest.raises(ControlError):
        engine.control(command)


def test_pause_inside_run_stops_early():
    engine = Engine(counter_world(), METRICS)

    def pause_at_3(world, tick):
        if tick == 3:
            engine.pause()

    engine.checks.append(pause_at_3)
    engine.run(10)
    assert engine.state == (4, Status.PAUSED)
    assert not engine.trace.frozen


def test_trace_frozen_after_run():
    trace = run(counter_world(), 3, seed=0, metrics=METRICS)
    with pytest.raises(InvariantViolation):
        trace.add_row(Row(9, "a", "a.count", 1))


def test_failure_is_located():
    world = counter_world()

    def boom(node, inbox, tick):
        if tick == 2:
            raise ZeroDivisionError("bad")
        return []

    world.node("a").behavior = boom
    engine = Engine(world)
    with pytest.raises(InvariantViolation) as info:
        engine.run(5)
    assert (info.value.tick, info.value.system, info.value.phase) == (2, "a", "operate")
    assert "tick 2" in str(info.value)
    assert engine.status is Status.STOPPED


def test_check_failure_is_located():
    def check(world, tick):
        if tick == 1:
            raise InvariantViolation("broken")

    engine = Engine(counter_world(), checks=[check])
    with pytest.raises(InvariantViolation) as info:
        engine.run(3)
    assert (info.value.tick, info.value.phase) == (1, "check")


@pytest.mark.parametrize("spec", [
    MetricSpec("m", "nobody", "x"),
    MetricSpec("m", "a", "missing"),
    MetricSpec("m", "a", "essential:x"),
    MetricSpec("m", "b->a", "count"),
])
def test_metric_resolution_errors(spec):
    with pytest.raises(ConfigurationError) as info:
        Engine(counter_world(), [spec])
    assert info.value.subject == "metric:m"


def test_duplicate_metric_names():
    with pytest.raises(ConfigurationError):
        Engine(counter_world(), [MetricSpec("m", "a", "count"), MetricSpec("m", "a", "got")])


def test_csv_round_trip(tmp_path):
    trace = run(counter_world(), 6, seed=0, metrics=METRICS)
    path = tmp_path / "t.csv"
    trace.write_csv(path)
    back = Trace.read_csv(path)
    assert back.rows == trace.rows
    assert back.metrics == tuple(m.name for m in METRICS)
    path.write_text("tick,metric\n")
    with pytest.raises(ValueError):
        Trace.read_csv(path)


def test_events_text_round_trip():
    trace = Trace()
    trace.add_event(Event(0, "n", "Kind", "a=1 b=two words"))
    assert Trace.parse_events(trace.events_text()) == [(0, "n", "Kind", "a=1 b=two words")]


def two_pass(values):
    xs = [Fraction(v) for v in values]
    mean = sum(xs) / len(xs)
    return mean, sum((x - mean) ** 2 for x in xs) / len(xs)


def test_welford_matches_two_pass():
    rng = random.Random(8)
    for _ in range(200):
        values = [rng.uniform(-1e3, 1e3) + 1e6 * rng.random() for _ in range(rng.randint(1, 300))]
        stats = summarize(values)
        mean, var = two_pass(values)
        assert abs(stats.mean - float(mean)) <= 1e-12 * max(1.0, abs(float(mean)))
        assert abs(stats.variance - float(var)) <= 1e-12 * max(1.0, float(var)) + 1e-9
        assert (stats.min, stats.max) == (min(values), max(values))


def test_empty_summary():
    stats = summarize([])
    assert stats.count == 0
    assert stats.as_dict() == {"count": 0}
    with pytest.raises(ValueError):
        stats.mean


def test_empty_world_step_and_zero_run():
    world = World()
    engine = Engine(world)
    report = engine.step()
    assert report.tick == 0 and world.tick == 1 and len(engine.trace) == 0
    trace = run(counter_world(), 0, seed=0, metrics=METRICS)
    assert trace.rows == () and trace.frozen


def test_metric_rows_per_tick():
    trace = run(counter_world(), 17, seed=0, metrics=METRICS)
    assert len(trace) == 17 * len(METRICS)
    assert {r.tick for r in trace.rows} == set(range(17))


def test_control_examples():
    engine = Engine(counter_world())
    statuses = [engine.status, engine.pause().status, engine.resume().status]
    assert statuses == [Status.RUNNING, Status.PAUSED, Status.RUNNING]
    engine.pause()
    engine.step_n(10)
    assert engine.step_n(3) == (13, Status.PAUSED)
    engine.stop()
    with pytest.raises(TerminalStateError):
        engine.resume()


def test_interleaved_control_totals():
    rng = random.Random(12)
    for _ in range(20):
        engine = Engine(counter_world(), METRICS)
        engine.pause()
        requested = 0
        while requested < 40:
            k = rng.randint(0, 6)
            op = rng.choice(["step", "pause", "resume-step"])
            if op == "step":
                engine.control(("step_n", k))
                requested += k
            elif op == "pause":
                engine.pause()
            else:
                engine.resume()
                engine.step()
                requested += 1
                engine.pause()
        assert engine.steps_executed == requested == engine.tick


def test_summary_examples():
    flat = summarize([10, 10, 10])
    assert (flat.mean, flat.variance) == (10, 0)
    pair = summarize([1, 3])
    assert (pair.mean, pair.variance, pair.min, pair.max, pair.count) == (2, 1, 1, 3, 2)


def test_same_tick_sends_share_sent_tick():
    world = World()
    sink = world.add_system("sink")

    def sender(node, inbox, tick):
        return [Emission(node.out_channels[0], {"t": tick}, FlowKind.INFORMATION)]

    for name in ("x", "y"):
        world.connect(world.add_system(name, sender), sink, 1)
    engine = Engine(world)
    engine.step()
    sent = [f.sent_tick for ch in world.channels.values() for f in ch.queue]
    assert sent == [0, 0]

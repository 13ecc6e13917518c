"""Report bundle: trace table, summary table, event log and memory logs."""

from __future__ import annotations

from pathlib import Path

from .core import Event, format_scalar
from .engine import Engine, Trace, summarize
from .supplychain import bullwhip_ratio, customer_name, fill_rate

TRACE_FILE = "trace.csv"
SUMMARY_FILE = "summary.txt"
EVENTS_FILE = "events.log"
MEMORY_DIR = "memory"


def run_start_event(seed: int, ticks: int, warmup: int) -> Event:
    return Event(0, "world", "RunStart", f"seed={seed} ticks={ticks} warmup={warmup}")


def read_run_start(events_path: Path | str) -> dict[str, int] | None:
    """Settings recorded by the RunStart event, or None if there is none."""
    with open(events_path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t", 3)
            if len(parts) == 4 and parts[1] == "world" and parts[2] == "RunStart":
                return {k: int(v) for k, v in (kv.split("=", 1) for kv in parts[3].split())}
    return None


def _fmt(value) -> str:
    return "undefined" if value is None else format_scalar(value)


def _nodes_with(trace: Trace, suffix: str) -> list[str]:
    return [m[:-len(suffix)] for m in trace.metrics if m.endswith(suffix)]


def summary_text(trace: Trace, warmup: int, end: int | None = None) -> str:
    """Per-metric statistics plus fill rate and bullwhip rows over ``[warmup, end)``.

    ``end`` defaults to one past the last sampled tick. Statistics that do
    not exist for the window (empty series, flat demand) print as ``undefined``.
    """
    if end is None:
        end = max((r.tick for r in trace._rows), default=-1) + 1
    end = max(end, warmup)
    window = (warmup, end)
    by_metric: dict[str, list] = {m: [] for m in trace.metrics}
    for row in trace._rows:
        if warmup <= row.tick < end:
            by_metric[row.metric].append(row.value)

    lines = [f"window\t{warmup}\t{end}", "metric\tcount\tmean\tvariance\tmin\tmax"]
    for metric, series in by_metric.items():
        stats = summarize(series)
        if stats.count == 0:
            lines.append(f"{metric}\t0\tundefined\tundefined\tundefined\tundefined")
        else:
            lines.append("\t".join([metric, str(stats.count)] + [
                format_scalar(v) for v in (stats.mean, stats.variance, stats.min, stats.max)]))

    # the ratio helpers check windows against run metadata; a re-read trace has none
    probe = Trace(trace.metrics, {"customer": trace.meta.get("customer") or customer_name(trace)})
    probe._rows = trace._rows
    customer = probe.meta["customer"]
    for node in _nodes_with(trace, ".demanded"):
        lines.append(f"fill_rate\t{node}\t{_fmt(fill_rate(probe, node, window))}")
    demand_count = len(by_metric.get(f"{customer}.demand", ()))
    for node in _nodes_with(trace, ".order_qty"):
        ratio = bullwhip_ratio(probe, node, window) if demand_count else None
        lines.append(f"bullwhip\t{node}\t{_fmt(ratio)}")
    return "\n".join(lines) + "\n"


def write_bundle(out_dir: Path | str, engine: Engine) -> Path:
    """Write trace.csv, summary.txt, events.log and memory/<system>.log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace = engine.trace
    trace.write_csv(out / TRACE_FILE)
    warmup = int(trace.meta.get("warmup", 0))
    (out / SUMMARY_FILE).write_text(summary_text(trace, warmup, engine.steps_executed),
                                    encoding="utf-8", newline="\n")
    trace.write_events(out / EVENTS_FILE)
    for sid in sorted(engine.world.systems):
        node = engine.world.systems[sid]
        if node.regulation is not None:
            node.regulation.memory.write_log(out / MEMORY_DIR / f"{node.name}.log")
    return out

"""``nlm-sim`` command line: run, validate and report on scenario files.

Exit codes: 0 success, 2 scenario or parse error, 3 runtime invariant
violation, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import select
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .engine import Status, Trace
from .errors import ConfigurationError, ControlError, InvariantViolation
from .report import (EVENTS_FILE, read_run_start, run_start_event, summary_text,
                     write_bundle)
from .rng import MASK64
from .scenario import ScenarioFile, load_scenario
from .supplychain import make_engine

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_IO = 4

log = logging.getLogger("nlm_sim")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value <= MASK64:
        raise argparse.ArgumentTypeError(f"{text} is not an unsigned 64-bit integer")
    return value


def _nonneg(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"{text} must be ≥ 0")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text} must be ≥ 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlm-sim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write the report bundle")
    run.add_argument("--scenario", required=True, type=Path)
    run.add_argument("--out", required=True, type=Path)
    run.add_argument("--seed", type=_u64, help="override the scenario seed")
    run.add_argument("--ticks", type=_nonneg, help="override the scenario horizon")
    run.add_argument("--interactive", action="store_true",
                     help="start paused; read pause/resume/stop/step N from stdin")
    run.add_argument("--sweep", type=_positive, metavar="K",
                     help="run seeds seed..seed+K-1 concurrently into <out>/seed-<s>/")

    val = sub.add_parser("validate", help="parse a scenario and report problems")
    val.add_argument("--scenario", required=True, type=Path)

    rep = sub.add_parser("report", help="recompute the summary table from a trace")
    rep.add_argument("--trace", required=True, type=Path)
    rep.add_argument("--summary", action="store_true", required=True,
                     help="print the summary table")
    rep.add_argument("--warmup", type=_nonneg,
                     help="window start; defaults to the warmup recorded in events.log")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("NLM_SIM_LOG", "WARNING").upper()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(getattr(logging, level, logging.WARNING))
    log.propagate = False


# --------------------------------------------------------------------------
# interactive control

class LineReader:
    """Line reader that can poll for input without blocking.

    For real file descriptors this bypasses Python's buffering so that
    ``select`` reflects what has actually been consumed.
    """

    def __init__(self, stream):
        self.stream = stream
        try:
            self.fd = stream.fileno()
        except (AttributeError, OSError, ValueError):
            self.fd = None
        self._buf = b""
        self.eof = False

    def _split(self) -> str | None:
        if b"\n" in self._buf:
            line, self._buf = self._buf.split(b"\n", 1)
            return line.decode("utf-8", "replace")
        if self.eof and self._buf:
            line, self._buf = self._buf, b""
            return line.decode("utf-8", "replace")
        return None

    def readline(self, block: bool = True) -> str | None:
        """Next line without its newline; None if none is ready (or at EOF)."""
        if self.fd is None:
            if self.eof:
                return None
            line = self.stream.readline()
            if not line:
                self.eof = True
                return None
            return line.rstrip("\n")
        while True:
            line = self._split()
            if line is not None or self.eof:
                return line
            if not block and not select.select([self.fd], [], [], 0)[0]:
                return None
            chunk = os.read(self.fd, 4096)
            if not chunk:
                self.eof = True
            self._buf += chunk


def drive_interactive(engine, ticks: int, stdin, stderr=None) -> None:
    """Run ``engine`` for at most ``ticks`` steps under stdin control.

    The engine starts paused. While running, commands are polled between
    ticks. End of input while paused stops the run.
    """
    stderr = stderr or sys.stderr
    reader = LineReader(stdin)
    engine.pause()

    def apply(line: str) -> None:
        words = line.split()
        if not words:
            return
        if words[0].lower() in ("step", "step_n") and len(words) == 2:
            try:
                k = int(words[1])
            except ValueError:
                k = None
            if k is not None and k >= 0:
                words[1] = str(min(k, ticks - engine.steps_executed))
        try:
            state = engine.control(" ".join(words))
            print(f"tick {state.tick} {state.status.value}", file=stderr)
        except ControlError as exc:
            print(f"error: {exc}", file=stderr)

    while engine.status is not Status.STOPPED and engine.steps_executed < ticks:
        if engine.status is Status.RUNNING:
            line = reader.readline(block=False)
            if line is not None:
                apply(line)
            if engine.status is Status.RUNNING and engine.steps_executed < ticks:
                engine.step()
            continue
        line = reader.readline(block=True)
        if line is None:
            log.info("input closed while paused; stopping")
            engine.stop()
            break
        apply(line)
    if engine.status is not Status.STOPPED:
        engine.finish()


# --------------------------------------------------------------------------
# commands

def execute(scenario: ScenarioFile, out: Path, seed: int, interactive: bool = False,
            stdin=None) -> int:
    """Run one scenario into ``out``; returns an exit code."""
    chain = scenario.chain
    try:
        engine = make_engine(chain, seed, scenario.metrics)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    engine.log_event(run_start_event(seed, chain.horizon, engine.trace.meta["warmup"]))
    code = EXIT_OK
    try:
        if interactive:
            drive_interactive(engine, chain.horizon, stdin or sys.stdin)
        else:
            engine.run(chain.horizon)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        code = EXIT_INVARIANT
    log.info("seed %d: %d ticks executed", seed, engine.steps_executed)
    try:
        write_bundle(out, engine)
    except OSError as exc:
        print(f"error: cannot write {out}: {exc}", file=sys.stderr)
        return EXIT_IO
    return code


def _sweep_job(args: tuple) -> int:
    scenario, out, seed = args
    return execute(scenario, out, seed)


def cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.ticks is not None:
        chain = dataclasses.replace(scenario.chain, horizon=args.ticks)
        scenario = dataclasses.replace(scenario, chain=chain)
    seed = scenario.seed if args.seed is None else args.seed
    if not args.sweep:
        return execute(scenario, args.out, seed, args.interactive)
    if args.interactive:
        print("error: --interactive cannot be combined with --sweep", file=sys.stderr)
        return EXIT_CONFIG
    seeds = [(seed + i) & MASK64 for i in range(args.sweep)]
    jobs = [(scenario, args.out / f"seed-{s}", s) for s in seeds]
    with ProcessPoolExecutor(max_workers=min(len(jobs), os.cpu_count() or 1)) as pool:
        codes = list(pool.map(_sweep_job, jobs))
    return max(codes)


def cmd_validate(args) -> int:
    scenario = load_scenario(args.scenario)
    chain = scenario.chain
    print(f"ok: {len(chain.nodes)} nodes, {len(chain.links)} links, "
          f"{chain.horizon} ticks, seed {scenario.seed}")
    return EXIT_OK


def cmd_report(args) -> int:
    trace = Trace.read_csv(args.trace)
    warmup = args.warmup
    if warmup is None:
        events = args.trace.parent / EVENTS_FILE
        start = read_run_start(events) if events.exists() else None
        warmup = start["warmup"] if start else 0
    sys.stdout.write(summary_text(trace, warmup))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"{args.scenario if hasattr(args, 'scenario') else 'error'}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (OSError, UnicodeDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # malformed trace files in `report`
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

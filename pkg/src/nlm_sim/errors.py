"""Exception hierarchy shared by every layer of the simulator."""

from __future__ import annotations


class NLMError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(NLMError, ValueError):
    """A world, regulation unit or chain was described inconsistently.

    Raised at build time, never in the middle of a tick. ``subject`` names
    the offending element (``"node:<name>"``, ``"link:<from>-><to>"``, ...)
    when one is known.
    """

    def __init__(self, message: str = "", subject: str | None = None):
        self.subject = subject
        super().__init__(message)


class ScenarioError(ConfigurationError):
    """A scenario file was rejected; carries the offending line number."""

    def __init__(self, line: int | None, reason: str):
        self.line = line
        self.reason = reason
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{reason}")

    def __reduce__(self):
        return (type(self), (self.line, self.reason))


class InvariantViolation(NLMError, RuntimeError):
    """A runtime invariant broke while the engine was stepping.

    ``tick``, ``system`` and ``phase`` are filled in by the engine when the
    violation escapes a step, so the diagnostic names where it happened.
    """

    def __init__(self, message: str, *, tick: int | None = None,
                 system: str | None = None, phase: str | None = None):
        self.message = message
        self.tick = tick
        self.system = system
        self.phase = phase
        super().__init__(self._render())

    def _render(self) -> str:
        where = []
        if self.tick is not None:
            where.append(f"tick {self.tick}")
        if self.system is not None:
            where.append(f"system {self.system!r}")
        if self.phase is not None:
            where.append(f"phase {self.phase}")
        if not where:
            return self.message
        return f"{', '.join(where)}: {self.message}"

    def locate(self, *, tick: int, system: str | None, phase: str) -> "InvariantViolation":
        if self.tick is None:
            self.tick = tick
        if self.system is None:
            self.system = system
        if self.phase is None:
            self.phase = phase
        self.args = (self._render(),)
        return self


class ControlError(NLMError):
    """An engine control command is not valid in the current status."""


class TerminalStateError(ControlError):
    """The engine is stopped; no further command is accepted."""

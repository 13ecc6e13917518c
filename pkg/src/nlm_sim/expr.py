"""Side-effect-free arithmetic/boolean expressions for rules and bindings.

Expressions use Python syntax restricted to literals, names, arithmetic,
comparisons, ``and``/``or``/``not``, conditional expressions and calls to a
fixed set of functions. Every name is checked against the names a
regulation unit can provide when the unit is built, so an unbound name is a
:class:`ConfigurationError` at build time and never a runtime surprise.
"""

from __future__ import annotations

import ast
import math
from typing import Iterable

from .errors import ConfigurationError

PURE_FUNCTIONS = {
    "min": min,
    "max": max,
    "abs": abs,
    "ceil": math.ceil,
    "floor": math.floor,
    "round": round,
}

# Memory aggregates take the memory key as a string literal first argument.
MEMORY_FUNCTIONS = ("mem_last", "mem_sum", "mem_mean", "mem_count")

_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.BoolOp, ast.Compare, ast.IfExp,
    ast.Call, ast.Name, ast.Load, ast.Constant,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.FloorDiv, ast.Mod, ast.Pow,
    ast.USub, ast.UAdd, ast.Not, ast.And, ast.Or,
    ast.Eq, ast.NotEq, ast.Lt, ast.LtE, ast.Gt, ast.GtE,
)


class Expr:
    """A compiled expression plus the names it reads."""

    __slots__ = ("source", "names", "memory_keys", "_code", "constant")

    def __init__(self, source):
        if not isinstance(source, str):
            if isinstance(source, bool) or not isinstance(source, (int, float)):
                raise ConfigurationError(f"expression must be text or a number, got {source!r}")
            self.source = repr(source)
            self.names = frozenset()
            self.memory_keys = frozenset()
            self._code = None
            self.constant = source
            return
        self.source = source
        self.constant = None
        try:
            tree = ast.parse(source.strip(), mode="eval")
        except SyntaxError as exc:
            raise ConfigurationError(f"cannot parse expression {source!r}: {exc.msg}") from None
        targets = {id(n.func) for n in ast.walk(tree) if isinstance(n, ast.Call)}
        names: set[str] = set()
        mem_keys: set[str] = set()
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED_NODES):
                raise ConfigurationError(
                    f"{type(node).__name__} is not allowed in expression {source!r}")
            if isinstance(node, ast.Constant) and (
                    isinstance(node.value, bool) or not isinstance(node.value, (int, float, str))):
                raise ConfigurationError(f"literal {node.value!r} not allowed in {source!r}")
            if isinstance(node, ast.Call):
                if node.keywords or not isinstance(node.func, ast.Name):
                    raise ConfigurationError(f"only plain positional calls are allowed in {source!r}")
                fname = node.func.id
                if fname in MEMORY_FUNCTIONS:
                    if not node.args or not (isinstance(node.args[0], ast.Constant)
                                             and isinstance(node.args[0].value, str)):
                        raise ConfigurationError(
                            f"{fname}() needs a memory key literal as first argument in {source!r}")
                    mem_keys.add(node.args[0].value)
                elif fname not in PURE_FUNCTIONS:
                    raise ConfigurationError(f"unknown function {fname!r} in {source!r}")
            elif isinstance(node, ast.Name) and id(node) not in targets:
                names.add(node.id)
        self.names = frozenset(names)
        self.memory_keys = frozenset(mem_keys)
        self._code = compile(tree, f"<expr {source!r}>", "eval")

    def check(self, available: Iterable[str], memory_keys: Iterable[str] = ()) -> None:
        available = set(available)
        missing = sorted(self.names - available)
        if missing:
            raise ConfigurationError(f"expression {self.source!r} references unbound name(s) {missing}")
        unknown = sorted(self.memory_keys - set(memory_keys))
        if unknown:
            raise ConfigurationError(f"expression {self.source!r} queries unknown memory key(s) {unknown}")

    def evaluate(self, namespace: dict, functions: dict):
        if self._code is None:
            return self.constant
        return eval(self._code, functions, namespace)

    def __repr__(self) -> str:
        return f"Expr({self.source!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Expr) and other.source == self.source

    def __hash__(self) -> int:
        return hash(self.source)


def as_expr(value) -> Expr:
    return value if isinstance(value, Expr) else Expr(value)

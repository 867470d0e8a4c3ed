"""Definition types for networks of hybrid automata and their queries.

These are plain immutable values. The DSL parser produces them, the pretty
printer consumes them, and :func:`ksmc.automata.build_network` validates and
instantiates them. Source spans are carried for error messages but excluded
from equality, so ``parse(print(defs)) == defs`` is a meaningful check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

Span = tuple[int, int]


def _span():
    return field(default=None, compare=False, repr=False)


# --- expressions ------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    value: float | int


@dataclass(frozen=True)
class Bool:
    value: bool


@dataclass(frozen=True)
class Pi:
    pass


@dataclass(frozen=True)
class Var:
    """Reference to a variable, constant, parameter or orbit, optionally indexed."""

    name: str
    index: Expr | None = None


@dataclass(frozen=True)
class Member:
    """``instance.member``: a location predicate, ``.loc`` index, or local variable (queries only)."""

    instance: str
    member: str


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "not"
    operand: Expr


@dataclass(frozen=True)
class Binary:
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple[Expr, ...]


Expr = Union[Num, Bool, Pi, Var, Member, Unary, Binary, Call]

ARITH_OPS = ("+", "-", "*", "/")
COMPARE_OPS = ("<", "<=", "==", "!=", ">=", ">")
BOOL_OPS = ("and", "or")


# --- declarations -----------------------------------------------------------

@dataclass(frozen=True)
class OrbitDecl:
    name: str
    a: float
    e: float
    T: float
    span: Span | None = _span()


@dataclass(frozen=True)
class ConstDecl:
    name: str
    value: Expr
    span: Span | None = _span()


@dataclass(frozen=True)
class ChannelDecl:
    """A broadcast channel; ``size`` is None for a scalar channel."""

    name: str
    size: int | None = None
    span: Span | None = _span()


@dataclass(frozen=True)
class VarDecl:
    kind: str  # "int" (discrete) or "continuous"
    name: str
    size: int | None = None
    init: tuple[Expr, ...] | None = None
    span: Span | None = _span()


@dataclass(frozen=True)
class RateDef:
    target: Var
    expr: Expr


@dataclass(frozen=True)
class LocationDef:
    name: str
    initial: bool = False
    accepting: bool = False
    invariant: Expr | None = None
    rates: tuple[RateDef, ...] = ()
    exp_rate: Expr | None = None
    span: Span | None = _span()


@dataclass(frozen=True)
class Sync:
    channel: str
    index: Expr | None
    direction: str  # "!" emit, "?" receive


@dataclass(frozen=True)
class Assign:
    target: Var
    value: Expr


@dataclass(frozen=True)
class EdgeDef:
    source: str
    target: str
    guard: Expr | None = None
    sync: Sync | None = None
    updates: tuple[Assign, ...] = ()
    span: Span | None = _span()


@dataclass(frozen=True)
class Template:
    name: str
    params: tuple[str, ...] = ()
    variables: tuple[VarDecl, ...] = ()
    locations: tuple[LocationDef, ...] = ()
    edges: tuple[EdgeDef, ...] = ()
    span: Span | None = _span()


@dataclass(frozen=True)
class InstanceDecl:
    name: str
    template: str
    args: tuple[Expr, ...] = ()
    span: Span | None = _span()


@dataclass(frozen=True)
class ModelDefs:
    orbits: tuple[OrbitDecl, ...] = ()
    consts: tuple[ConstDecl, ...] = ()
    channels: tuple[ChannelDecl, ...] = ()
    variables: tuple[VarDecl, ...] = ()
    templates: tuple[Template, ...] = ()
    instances: tuple[InstanceDecl, ...] = ()


# --- queries ----------------------------------------------------------------

@dataclass(frozen=True)
class NoDeadlock:
    pass


@dataclass(frozen=True)
class Eventually:
    goal: Expr


@dataclass(frozen=True)
class ProbReach:
    bound: float
    goal: Expr


@dataclass(frozen=True)
class Simulate:
    bound: float
    observables: tuple[Expr, ...]


Query = Union[NoDeadlock, Eventually, ProbReach, Simulate]

"""Networks of hybrid timed automata: validation, instantiation and semantics.

A :class:`Network` is built once from :class:`~ksmc.defs.ModelDefs` and never
mutated. Template parameters and constants are substituted at build time, so
every instance carries fully resolved expressions; those resolved forms (not
the source text) define network equality.

Semantics:

* all channels are broadcast; an emit never blocks and every instance with an
  enabled matching receive edge joins it;
* updates run emitter first, then receivers in instance declaration order;
* continuous variables evolve by the rate expressions of the locations that
  own them (rate 0 elsewhere), integrated with fixed-step RK4;
* guards compare with an absolute slack of ``GUARD_TOL``; invariants bounding
  time are located exactly by stepping then bisection.
"""

from __future__ import annotations

import itertools
import math
import operator
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Union

from ksmc import defs as D
from ksmc.errors import InvariantViolation, PreconditionError, ValidationError
from ksmc.orbital import ANGLE_TOL, Orbit, make_orbit, rate_function

GUARD_TOL = ANGLE_TOL
BISECT_TOL = 1e-13
MAX_SCAN_STEPS = 10_000_000
DEFAULT_STEP = 1e-4

Fn = Callable[[tuple, Any, Any], Any]


# --- resolved expressions ---------------------------------------------------

@dataclass(frozen=True)
class Slot:
    kind: str  # "d" discrete, "c" continuous
    offset: int
    label: str


@dataclass(frozen=True)
class DynSlot:
    kind: str
    base: int
    size: int
    index: "RExpr"
    label: str


@dataclass(frozen=True)
class KeplerRate:
    orbit: int
    arg: "RExpr"


@dataclass(frozen=True)
class LocAt:
    instance: int
    location: int
    label: str


@dataclass(frozen=True)
class LocIndex:
    instance: int
    label: str


RExpr = Union[D.Num, D.Bool, D.Unary, D.Binary, Slot, DynSlot, KeplerRate, LocAt, LocIndex]

_ARITH = {"+": operator.add, "-": operator.sub, "*": operator.mul, "/": operator.truediv}


def cont_slots(e: RExpr | None) -> frozenset[int]:
    """Continuous slots an expression reads (all of them for dynamic indexing)."""
    if e is None:
        return frozenset()
    if isinstance(e, Slot):
        return frozenset((e.offset,)) if e.kind == "c" else frozenset()
    if isinstance(e, DynSlot):
        own = frozenset(range(e.base, e.base + e.size)) if e.kind == "c" else frozenset()
        return own | cont_slots(e.index)
    if isinstance(e, KeplerRate):
        return cont_slots(e.arg)
    if isinstance(e, D.Unary):
        return cont_slots(e.operand)
    if isinstance(e, D.Binary):
        return cont_slots(e.left) | cont_slots(e.right)
    return frozenset()


# --- network structure ------------------------------------------------------

@dataclass(frozen=True)
class Location:
    name: str
    initial: bool
    accepting: bool
    invariant: RExpr | None
    rates: tuple[tuple[int, RExpr], ...]
    exp_rate: float
    invariant_text: str = field(default="", compare=False)
    inv_exact: Fn | None = field(default=None, compare=False, repr=False)
    inv_tol: Fn | None = field(default=None, compare=False, repr=False)
    inv_slots: frozenset = field(default=frozenset(), compare=False, repr=False)
    rate_fns: tuple = field(default=(), compare=False, repr=False)
    rate_sep: tuple | None = field(default=None, compare=False, repr=False)
    outputs: tuple[int, ...] = field(default=(), compare=False, repr=False)
    receives: Mapping[str, tuple[int, ...]] = field(default_factory=dict, compare=False, repr=False)


@dataclass(frozen=True)
class Edge:
    source: int
    target: int
    guard: RExpr | None
    sync: tuple[str, RExpr | None, str] | None
    updates: tuple[tuple[RExpr, RExpr], ...]
    label: str = field(default="", compare=False)
    guard_fn: Fn | None = field(default=None, compare=False, repr=False)
    guard_slots: frozenset = field(default=frozenset(), compare=False, repr=False)
    index_fn: Fn | None = field(default=None, compare=False, repr=False)
    update_fns: tuple = field(default=(), compare=False, repr=False)

    @property
    def is_receive(self) -> bool:
        return self.sync is not None and self.sync[2] == "?"


@dataclass(frozen=True)
class Instance:
    name: str
    template: str
    args: tuple[float, ...]
    locations: tuple[Location, ...]
    edges: tuple[Edge, ...]
    initial: int
    local_vars: Mapping[str, tuple[int, int | None]] = field(default_factory=dict, compare=False, repr=False)

    def location_index(self, name: str) -> int:
        for i, loc in enumerate(self.locations):
            if loc.name == name:
                return i
        raise KeyError(f"{self.name} has no location {name!r}")


@dataclass(frozen=True)
class Network:
    orbits: tuple[Orbit, ...]
    orbit_names: tuple[str, ...]
    channels: tuple[tuple[str, int | None], ...]
    discrete_names: tuple[str, ...]
    discrete_init: tuple
    continuous_names: tuple[str, ...]
    continuous_init: tuple[float, ...]
    instances: tuple[Instance, ...]
    defs: D.ModelDefs = field(compare=False, repr=False, default_factory=D.ModelDefs)
    global_vars: Mapping[str, tuple[str, int, int | None]] = field(default_factory=dict, compare=False, repr=False)

    def instance_index(self, name: str) -> int:
        for i, inst in enumerate(self.instances):
            if inst.name == name:
                return i
        raise KeyError(f"no instance named {name!r}")

    @property
    def has_dynamics(self) -> bool:
        return any(loc.rates for inst in self.instances for loc in inst.locations)

    def default_step(self) -> float:
        if self.orbits:
            return min(o.T for o in self.orbits) * 1e-4
        return DEFAULT_STEP


@dataclass(frozen=True)
class HybridState:
    locations: tuple[int, ...]
    discrete: tuple
    continuous: tuple[float, ...]
    time: float = 0.0


@dataclass(frozen=True)
class Choice:
    """One discrete step: an emitting/internal edge plus its broadcast receivers."""

    instance: int
    edge: int
    receivers: tuple[tuple[int, int], ...] = ()


# --- building ---------------------------------------------------------------

class _Scope:
    def __init__(self, net_vars, consts, orbits, params=None, locals_=None, instances=None, ctx=""):
        self.net_vars = net_vars  # name -> (kind, base, size)
        self.consts = consts
        self.orbits = orbits  # name -> index
        self.params = params or {}
        self.locals = locals_ or {}  # name -> (base, size)
        self.instances = instances  # for query binding: list of Instance
        self.ctx = ctx

    def at(self, ctx: str) -> "_Scope":
        s = _Scope(self.net_vars, self.consts, self.orbits, self.params, self.locals, self.instances, ctx)
        return s

    def fail(self, msg: str) -> ValidationError:
        return ValidationError(f"{msg} in {self.ctx}" if self.ctx else msg)


def _fmt(e) -> str:
    from ksmc.dsl import format_expr

    return format_expr(e)


def _resolve(e: D.Expr, sc: _Scope, allow_rate: bool = False) -> tuple[RExpr, str]:
    if isinstance(e, D.Num):
        return D.Num(e.value), "num"
    if isinstance(e, D.Bool):
        return D.Bool(e.value), "bool"
    if isinstance(e, D.Pi):
        return D.Num(math.pi), "num"
    if isinstance(e, D.Var):
        return _resolve_var(e, sc)
    if isinstance(e, D.Member):
        return _resolve_member(e, sc)
    if isinstance(e, D.Unary):
        x, t = _resolve(e.operand, sc, allow_rate)
        if e.op == "-":
            if t != "num":
                raise sc.fail(f"unary '-' applied to boolean '{_fmt(e.operand)}'")
            return (D.Num(-x.value) if isinstance(x, D.Num) else D.Unary("-", x)), "num"
        if e.op == "not":
            if t != "bool":
                raise sc.fail(f"'not' applied to number '{_fmt(e.operand)}'")
            return (D.Bool(not x.value) if isinstance(x, D.Bool) else D.Unary("not", x)), "bool"
        raise sc.fail(f"unknown unary operator {e.op!r}")
    if isinstance(e, D.Binary):
        l, lt = _resolve(e.left, sc, allow_rate)
        r, rt = _resolve(e.right, sc, allow_rate)
        if e.op in D.ARITH_OPS:
            if lt != "num" or rt != "num":
                raise sc.fail(f"arithmetic on boolean operand in '{_fmt(e)}'")
            if e.op == "/" and not (isinstance(r, D.Num) and r.value != 0):
                raise sc.fail(f"division only by nonzero constants: '{_fmt(e)}'")
            if isinstance(l, D.Num) and isinstance(r, D.Num):
                return D.Num(_ARITH[e.op](l.value, r.value)), "num"
            return D.Binary(e.op, l, r), "num"
        if e.op in D.COMPARE_OPS:
            if lt != "num" or rt != "num":
                raise sc.fail(f"comparison of non-numbers in '{_fmt(e)}'")
            return D.Binary(e.op, l, r), "bool"
        if e.op in D.BOOL_OPS:
            if lt != "bool" or rt != "bool":
                raise sc.fail(f"'{e.op}' needs boolean operands in '{_fmt(e)}'")
            return D.Binary(e.op, l, r), "bool"
        raise sc.fail(f"unknown operator {e.op!r}")
    if isinstance(e, D.Call):
        if e.func != "kepler_rate":
            raise sc.fail(f"unknown function {e.func!r}")
        if not allow_rate:
            raise sc.fail("kepler_rate is only allowed in rate expressions")
        if len(e.args) != 2:
            raise sc.fail("kepler_rate takes (orbit, anomaly)")
        orb = _orbit_ref(e.args[0], sc)
        arg, t = _resolve(e.args[1], sc)
        if t != "num":
            raise sc.fail("kepler_rate anomaly argument must be numeric")
        return KeplerRate(orb, arg), "num"
    raise sc.fail(f"unsupported expression {e!r}")


def _orbit_ref(e: D.Expr, sc: _Scope) -> int:
    if isinstance(e, D.Var) and e.index is None and e.name in sc.orbits and e.name not in sc.params:
        return sc.orbits[e.name]
    x, t = _resolve(e, sc)
    if not isinstance(x, D.Num) or x.value != int(x.value):
        raise sc.fail(f"orbit reference '{_fmt(e)}' is neither an orbit name nor a constant index")
    k = int(x.value)
    if not 0 <= k < len(sc.orbits):
        raise sc.fail(f"orbit index {k} out of range ({len(sc.orbits)} orbits declared)")
    return k


def _resolve_var(e: D.Var, sc: _Scope) -> tuple[RExpr, str]:
    name = e.name
    if name in sc.params:
        if e.index is not None:
            raise sc.fail(f"parameter '{name}' cannot be indexed")
        return D.Num(sc.params[name]), "num"
    if name in sc.locals:
        base, size = sc.locals[name]
        return _slot("d", base, size, e, sc, label=name), "num"
    if name in sc.net_vars:
        kind, base, size = sc.net_vars[name]
        return _slot(kind, base, size, e, sc, label=name), "num"
    if name in sc.consts:
        if e.index is not None:
            raise sc.fail(f"constant '{name}' cannot be indexed")
        return D.Num(sc.consts[name]), "num"
    if name in sc.orbits:
        raise sc.fail(f"orbit '{name}' used as a value")
    ref = name if e.index is None else f"{name}[{_fmt(e.index)}]"
    raise sc.fail(f"unknown variable '{ref}'")


def _slot(kind: str, base: int, size: int | None, e: D.Var, sc: _Scope, label: str) -> RExpr:
    if size is None:
        if e.index is not None:
            raise sc.fail(f"variable '{label}' is not an array")
        return Slot(kind, base, label)
    if e.index is None:
        raise sc.fail(f"array '{label}' used without index")
    idx, t = _resolve(e.index, sc)
    if t != "num":
        raise sc.fail(f"index of '{label}' must be numeric")
    if isinstance(idx, D.Num):
        i = idx.value
        if i != int(i) or not 0 <= i < size:
            raise sc.fail(f"unknown variable '{label}[{_fmt(idx)}]' (index out of range for {label}[{size}])")
        i = int(i)
        return Slot(kind, base + i, f"{label}[{i}]")
    return DynSlot(kind, base, size, idx, label)


def _resolve_member(e: D.Member, sc: _Scope) -> tuple[RExpr, str]:
    if sc.instances is None:
        raise sc.fail(f"'{e.instance}.{e.member}' is only valid in queries")
    for i, inst in enumerate(sc.instances):
        if inst.name == e.instance:
            break
    else:
        raise sc.fail(f"unknown instance '{e.instance}'")
    label = f"{e.instance}.{e.member}"
    if e.member == "loc":
        return LocIndex(i, label), "num"
    for j, loc in enumerate(inst.locations):
        if loc.name == e.member:
            return LocAt(i, j, label), "bool"
    if e.member in inst.local_vars:
        base, size = inst.local_vars[e.member]
        if size is not None:
            raise sc.fail(f"array '{label}' used without index")
        return Slot("d", base, label), "num"
    raise sc.fail(f"instance '{e.instance}' has no location or variable '{e.member}'")


def _const_value(e: D.Expr, sc: _Scope) -> float | int:
    x, t = _resolve(e, sc)
    if not isinstance(x, (D.Num, D.Bool)):
        raise sc.fail(f"'{_fmt(e)}' is not a constant expression")
    return x.value


def build_network(defs: D.ModelDefs) -> Network:
    """Validate ``defs`` and instantiate every template instance."""
    top = set()

    def claim(name: str, what: str) -> None:
        if name in top:
            raise ValidationError(f"duplicate declaration of '{name}' ({what})")
        top.add(name)

    orbits: dict[str, int] = {}
    orbit_objs: list[Orbit] = []
    for od in defs.orbits:
        claim(od.name, "orbit")
        try:
            orbit_objs.append(make_orbit(od.a, od.e, od.T))
        except ValueError as exc:
            raise ValidationError(f"orbit '{od.name}': {exc}") from None
        orbits[od.name] = len(orbit_objs) - 1

    consts: dict[str, float | int] = {}
    base_scope = _Scope({}, consts, orbits)
    for cd in defs.consts:
        claim(cd.name, "constant")
        consts[cd.name] = _const_value(cd.value, base_scope.at(f"constant '{cd.name}'"))

    channels: dict[str, int | None] = {}
    for ch in defs.channels:
        claim(ch.name, "channel")
        if ch.size is not None and ch.size < 1:
            raise ValidationError(f"channel '{ch.name}' must have positive arity")
        channels[ch.name] = ch.size

    d_names: list[str] = []
    d_init: list = []
    c_names: list[str] = []
    c_init: list[float] = []
    net_vars: dict[str, tuple[str, int, int | None]] = {}

    def alloc(vd: D.VarDecl, sc: _Scope, prefix: str = "") -> tuple[str, int, int | None]:
        if vd.kind not in ("int", "continuous"):
            raise sc.fail(f"unknown variable kind {vd.kind!r}")
        names, init = (d_names, d_init) if vd.kind == "int" else (c_names, c_init)
        n = 1 if vd.size is None else vd.size
        if vd.size is not None and vd.size < 1:
            raise sc.fail(f"array '{vd.name}' must have positive size")
        if vd.init is None:
            values = [0] * n
        else:
            if len(vd.init) != n:
                raise sc.fail(f"'{vd.name}' declares {n} value(s) but {len(vd.init)} initializer(s) given")
            values = [_const_value(x, sc) for x in vd.init]
        base = len(names)
        for k, v in enumerate(values):
            names.append(f"{prefix}{vd.name}" if vd.size is None else f"{prefix}{vd.name}[{k}]")
            init.append(float(v) if vd.kind == "continuous" else v)
        return ("d" if vd.kind == "int" else "c", base, vd.size)

    for vd in defs.variables:
        claim(vd.name, "variable")
        net_vars[vd.name] = alloc(vd, base_scope.at(f"declaration of '{vd.name}'"))

    templates: dict[str, D.Template] = {}
    for tp in defs.templates:
        if tp.name in templates:
            raise ValidationError(f"duplicate template '{tp.name}'")
        templates[tp.name] = tp
        _check_template_shape(tp)

    instances: list[Instance] = []
    inst_names = set()
    owners: dict[int, str] = {}
    for idecl in defs.instances:
        if idecl.name in inst_names:
            raise ValidationError(f"duplicate instance '{idecl.name}'")
        inst_names.add(idecl.name)
        tp = templates.get(idecl.template)
        if tp is None:
            raise ValidationError(f"instance '{idecl.name}' of unknown template '{idecl.template}'")
        if len(idecl.args) != len(tp.params):
            raise ValidationError(
                f"instance '{idecl.name}': template {tp.name} takes {len(tp.params)} argument(s), got {len(idecl.args)}")
        asc = _Scope(net_vars, consts, orbits, ctx=f"arguments of instance '{idecl.name}'")
        args = tuple(_const_value(a, asc) for a in idecl.args)
        params = dict(zip(tp.params, args))
        local_vars: dict[str, tuple[int, int | None]] = {}
        lsc = _Scope(net_vars, consts, orbits, params, {}, ctx=f"template {tp.name} (instance {idecl.name})")
        for vd in tp.variables:
            if vd.kind != "int":
                raise lsc.fail(f"template-local variable '{vd.name}' must be discrete")
            if vd.name in local_vars or vd.name in params:
                raise lsc.fail(f"duplicate local '{vd.name}'")
            _, base, size = alloc(vd, lsc, prefix=f"{idecl.name}.")
            local_vars[vd.name] = (base, size)
        lsc = _Scope(net_vars, consts, orbits, params, local_vars, ctx=lsc.ctx)
        inst = _instantiate(idecl.name, tp, args, lsc, local_vars, channels, tuple(orbit_objs))
        for loc in inst.locations:
            for slot, _ in loc.rates:
                prev = owners.setdefault(slot, inst.name)
                if prev != inst.name:
                    raise ValidationError(
                        f"continuous variable '{c_names[slot]}' is rated by both {prev} and {inst.name}")
        instances.append(inst)

    return Network(
        orbits=tuple(orbit_objs),
        orbit_names=tuple(orbits),
        channels=tuple(channels.items()),
        discrete_names=tuple(d_names),
        discrete_init=tuple(d_init),
        continuous_names=tuple(c_names),
        continuous_init=tuple(c_init),
        instances=tuple(instances),
        defs=defs,
        global_vars=dict(net_vars),
    )


def _check_template_shape(tp: D.Template) -> None:
    names = [loc.name for loc in tp.locations]
    seen = set()
    for n in names:
        if n in seen:
            raise ValidationError(f"template {tp.name}: duplicate location '{n}'")
        seen.add(n)
    inits = [loc.name for loc in tp.locations if loc.initial]
    if not inits:
        raise ValidationError(f"template {tp.name}: missing initial location")
    if len(inits) > 1:
        raise ValidationError(f"template {tp.name}: multiple initial locations ({', '.join(inits)})")
    for ed in tp.edges:
        for end in (ed.source, ed.target):
            if end not in seen:
                raise ValidationError(f"template {tp.name}: edge {ed.source} -> {ed.target} names unknown location '{end}'")


def _instantiate(name: str, tp: D.Template, args: tuple, sc: _Scope,
                 local_vars: dict, channels: dict[str, int | None], orbits: tuple[Orbit, ...]) -> Instance:
    loc_index = {loc.name: i for i, loc in enumerate(tp.locations)}
    edges: list[Edge] = []
    for ed in tp.edges:
        label = f"{ed.source} -> {ed.target}"
        esc = sc.at(f"edge {label} of {sc.ctx}")
        guard = None
        if ed.guard is not None:
            guard, t = _resolve(ed.guard, esc.at(f"guard of edge {label} of {sc.ctx}"))
            if t != "bool":
                raise esc.fail("ill-typed guard (expected boolean)")
        sync = None
        if ed.sync is not None:
            if ed.sync.channel not in channels:
                raise esc.fail(f"unknown channel '{ed.sync.channel}'")
            arity = channels[ed.sync.channel]
            if ed.sync.direction not in ("!", "?"):
                raise esc.fail(f"bad sync direction {ed.sync.direction!r}")
            idx = None
            if arity is None:
                if ed.sync.index is not None:
                    raise esc.fail(f"channel arity mismatch: '{ed.sync.channel}' is not an array")
            else:
                if ed.sync.index is None:
                    raise esc.fail(f"channel arity mismatch: '{ed.sync.channel}' needs an index")
                idx, t = _resolve(ed.sync.index, esc)
                if t != "num":
                    raise esc.fail("channel index must be numeric")
                if isinstance(idx, D.Num) and (idx.value != int(idx.value) or not 0 <= idx.value < arity):
                    raise esc.fail(f"channel arity mismatch: index {_fmt(idx)} outside {ed.sync.channel}[{arity}]")
            sync = (ed.sync.channel, idx, ed.sync.direction)
        updates = []
        for asg in ed.updates:
            target, _ = _resolve_var(asg.target, esc)
            if not isinstance(target, (Slot, DynSlot)):
                raise esc.fail(f"cannot assign to '{_fmt(asg.target)}'")
            value, t = _resolve(asg.value, esc)
            if t != "num":
                raise esc.fail(f"assignment of boolean to '{_fmt(asg.target)}'")
            updates.append((target, value))
        edges.append(_compile_edge(Edge(loc_index[ed.source], loc_index[ed.target], guard, sync, tuple(updates), label=label)))

    locations: list[Location] = []
    for li, ld in enumerate(tp.locations):
        lsc = sc.at(f"location {ld.name} of {sc.ctx}")
        inv = None
        if ld.invariant is not None:
            inv, t = _resolve(ld.invariant, lsc.at(f"invariant of location {ld.name} of {sc.ctx}"))
            if t != "bool":
                raise lsc.fail("ill-typed invariant (expected boolean)")
        rates = []
        for rd in ld.rates:
            target, _ = _resolve_var(rd.target, lsc)
            if not (isinstance(target, Slot) and target.kind == "c"):
                raise lsc.fail(f"rate target '{_fmt(rd.target)}' is not a continuous variable with constant index")
            if any(s == target.offset for s, _ in rates):
                raise lsc.fail(f"duplicate rate for '{target.label}'")
            rexpr, t = _resolve(rd.expr, lsc, allow_rate=True)
            if t != "num":
                raise lsc.fail("rate expression must be numeric")
            rates.append((target.offset, rexpr))
        exp_rate = 1.0
        if ld.exp_rate is not None:
            exp_rate = float(_const_value(ld.exp_rate, lsc))
            if not exp_rate > 0:
                raise lsc.fail("exponential rate must be positive")
        outputs = tuple(k for k, e in enumerate(edges) if e.source == li and not e.is_receive)
        receives: dict[str, list[int]] = {}
        for k, e in enumerate(edges):
            if e.source == li and e.is_receive:
                receives.setdefault(e.sync[0], []).append(k)
        loc = Location(ld.name, ld.initial, ld.accepting, inv, tuple(rates), exp_rate,
                       invariant_text=_fmt(ld.invariant) if ld.invariant is not None else "",
                       outputs=outputs, receives={k: tuple(v) for k, v in receives.items()})
        locations.append(_compile_location(loc, orbits))
    initial = next(i for i, ld in enumerate(tp.locations) if ld.initial)
    return Instance(name, tp.name, tuple(args), tuple(locations), tuple(edges), initial, local_vars=dict(local_vars))


# --- compilation to closures ------------------------------------------------

def compile_expr(e: RExpr, tol: float = 0.0) -> Fn:
    """Turn a resolved expression into ``f(locations, discrete, continuous)``."""
    if isinstance(e, (D.Num, D.Bool)):
        v = e.value
        return lambda L, d, c: v
    if isinstance(e, Slot):
        o = e.offset
        if e.kind == "d":
            return lambda L, d, c: d[o]
        return lambda L, d, c: c[o]
    if isinstance(e, DynSlot):
        idx = compile_expr(e.index)
        base, size, label, kind = e.base, e.size, e.label, e.kind

        def dyn(L, d, c):
            return (d if kind == "d" else c)[base + _checked_index(idx(L, d, c), size, label)]

        return dyn
    if isinstance(e, KeplerRate):
        raise TypeError("KeplerRate needs the network's orbits; use Network-aware compilation")
    if isinstance(e, LocAt):
        i, j = e.instance, e.location
        return lambda L, d, c: L[i] == j
    if isinstance(e, LocIndex):
        i = e.instance
        return lambda L, d, c: L[i]
    if isinstance(e, D.Unary):
        x = compile_expr(e.operand, tol)
        if e.op == "-":
            return lambda L, d, c: -x(L, d, c)
        return lambda L, d, c: not x(L, d, c)
    if isinstance(e, D.Binary):
        return _compile_binary(e, tol)
    raise TypeError(f"cannot compile {e!r}")


def _checked_index(i, size: int, label: str) -> int:
    if i != int(i) or not 0 <= i < size:
        raise PreconditionError(f"index {i} out of range for {label}[{size}]")
    return int(i)


def _compile_binary(e: D.Binary, tol: float) -> Fn:
    op = e.op
    if op == "and":
        l, r = compile_expr(e.left, tol), compile_expr(e.right, tol)
        return lambda L, d, c: l(L, d, c) and r(L, d, c)
    if op == "or":
        l, r = compile_expr(e.left, tol), compile_expr(e.right, tol)
        return lambda L, d, c: l(L, d, c) or r(L, d, c)
    if op in _ARITH:
        f = _ARITH[op]
        l, r = compile_expr(e.left), compile_expr(e.right)
        return lambda L, d, c: f(l(L, d, c), r(L, d, c))
    # comparisons; the common "slot against constant" shape gets a fast path
    if isinstance(e.right, D.Num) and isinstance(e.left, Slot):
        k, o = e.right.value, e.left.offset
        cont = e.left.kind == "c"
        if op == "<=":
            k2 = k + tol
            return (lambda L, d, c: c[o] <= k2) if cont else (lambda L, d, c: d[o] <= k2)
        if op == ">=":
            k2 = k - tol
            return (lambda L, d, c: c[o] >= k2) if cont else (lambda L, d, c: d[o] >= k2)
    l, r = compile_expr(e.left), compile_expr(e.right)
    if op == "<=":
        return lambda L, d, c: l(L, d, c) <= r(L, d, c) + tol
    if op == ">=":
        return lambda L, d, c: l(L, d, c) >= r(L, d, c) - tol
    if op == "==":
        return lambda L, d, c: abs(l(L, d, c) - r(L, d, c)) <= tol
    if op == "!=":
        return lambda L, d, c: abs(l(L, d, c) - r(L, d, c)) > tol
    if op == "<":
        return lambda L, d, c: l(L, d, c) < r(L, d, c)
    if op == ">":
        return lambda L, d, c: l(L, d, c) > r(L, d, c)
    raise TypeError(f"unknown operator {op!r}")


def _compile_rate(e: RExpr, orbits: tuple[Orbit, ...]) -> Fn:
    if isinstance(e, KeplerRate):
        f = rate_function(orbits[e.orbit])
        if isinstance(e.arg, Slot) and e.arg.kind == "c":
            o = e.arg.offset
            return lambda L, d, c: f(c[o])
        a = _compile_rate(e.arg, orbits)
        return lambda L, d, c: f(a(L, d, c))
    if isinstance(e, D.Unary) and e.op == "-":
        x = _compile_rate(e.operand, orbits)
        return lambda L, d, c: -x(L, d, c)
    if isinstance(e, D.Binary) and e.op in _ARITH:
        f = _ARITH[e.op]
        l, r = _compile_rate(e.left, orbits), _compile_rate(e.right, orbits)
        return lambda L, d, c: f(l(L, d, c), r(L, d, c))
    return compile_expr(e)


def _separable(slot: int, e: RExpr, orbits: tuple[Orbit, ...]):
    """Scalar form of a rate that reads at most its own variable, else None."""
    if isinstance(e, D.Num):
        return (slot, None, float(e.value))
    if isinstance(e, KeplerRate) and isinstance(e.arg, Slot) and e.arg.kind == "c" and e.arg.offset == slot:
        return (slot, rate_function(orbits[e.orbit]), 0.0)
    return None


def _compile_edge(e: Edge) -> Edge:
    guard_fn = compile_expr(e.guard, GUARD_TOL) if e.guard is not None else None
    index_fn = None
    if e.sync is not None and e.sync[1] is not None:
        index_fn = compile_expr(e.sync[1])
    ups = []
    for target, value in e.updates:
        vf = compile_expr(value)
        if isinstance(target, Slot):
            ups.append((target.kind, target.offset, None, 0, "", vf))
        else:
            ups.append((target.kind, target.base, compile_expr(target.index), target.size, target.label, vf))
    return replace(e, guard_fn=guard_fn, guard_slots=cont_slots(e.guard), index_fn=index_fn, update_fns=tuple(ups))


def _compile_location(loc: Location, orbits: tuple[Orbit, ...]) -> Location:
    rate_fns = tuple((slot, _compile_rate(expr, orbits)) for slot, expr in loc.rates
                     if not (isinstance(expr, D.Num) and expr.value == 0))
    sep = tuple(_separable(slot, expr, orbits) for slot, expr in loc.rates
                if not (isinstance(expr, D.Num) and expr.value == 0))
    loc = replace(loc, rate_fns=rate_fns, rate_sep=None if None in sep else sep)
    if loc.invariant is None:
        return loc
    return replace(loc, inv_exact=compile_expr(loc.invariant, 0.0),
                   inv_tol=compile_expr(loc.invariant, GUARD_TOL),
                   inv_slots=cont_slots(loc.invariant))


def bind_expr(net: Network, e: D.Expr, expect: str | None = None, tol: float = GUARD_TOL) -> tuple[RExpr, Fn]:
    """Resolve a query-level expression against ``net`` (``inst.loc`` sugar allowed)."""
    sc = _Scope(net.global_vars, {}, dict(zip(net.orbit_names, range(len(net.orbits)))),
                instances=net.instances, ctx=f"query expression '{_fmt(e)}'")
    consts = {}
    for cd in net.defs.consts:
        consts[cd.name] = _const_value(cd.value, _Scope({}, consts, sc.orbits))
    sc.consts = consts
    r, t = _resolve(e, sc)
    if expect is not None and t != expect:
        raise sc.fail(f"expected a {'boolean' if expect == 'bool' else 'numeric'} expression")
    return r, compile_expr(r, tol)


# --- semantics --------------------------------------------------------------

def _location(net: Network, state: HybridState, i: int) -> Location:
    return net.instances[i].locations[state.locations[i]]


def check_invariants(net: Network, locations, discrete, continuous, time: float | None = None,
                     exact: bool = False) -> None:
    for i, inst in enumerate(net.instances):
        loc = inst.locations[locations[i]]
        fn = loc.inv_exact if exact else loc.inv_tol
        if fn is not None and not fn(locations, discrete, continuous):
            raise InvariantViolation(inst.name, loc.invariant_text, time)


def initial_state(net: Network) -> HybridState:
    if not net.instances:
        raise ValidationError("no instances")
    locs = tuple(inst.initial for inst in net.instances)
    st = HybridState(locs, net.discrete_init, net.continuous_init, 0.0)
    check_invariants(net, locs, st.discrete, st.continuous, 0.0)
    return st


def _receiver_options(net: Network, state: HybridState, emitter: int, channel: str, index) -> list[list[tuple[int, int]]]:
    L, d, c = state.locations, state.discrete, state.continuous
    groups = []
    for j, inst in enumerate(net.instances):
        if j == emitter:
            continue
        cand = inst.locations[L[j]].receives.get(channel)
        if not cand:
            continue
        opts = []
        for k in cand:
            e = inst.edges[k]
            if e.index_fn is not None and e.index_fn(L, d, c) != index:
                continue
            if e.guard_fn is None or e.guard_fn(L, d, c):
                opts.append((j, k))
        if opts:
            groups.append(opts)
    return groups


def choices_for(net: Network, state: HybridState, i: int) -> list[Choice]:
    """Enabled steps initiated by instance ``i`` (internal or emitting edges)."""
    L, d, c = state.locations, state.discrete, state.continuous
    inst = net.instances[i]
    out = []
    for k in inst.locations[L[i]].outputs:
        e = inst.edges[k]
        if e.guard_fn is not None and not e.guard_fn(L, d, c):
            continue
        if e.sync is None:
            out.append(Choice(i, k))
            continue
        index = e.index_fn(L, d, c) if e.index_fn is not None else None
        groups = _receiver_options(net, state, i, e.sync[0], index)
        for combo in itertools.product(*groups):
            out.append(Choice(i, k, tuple(combo)))
    return out


def enabled_edges(net: Network, state: HybridState) -> list[Choice]:
    """All discrete steps enabled in ``state``, in instance/edge order.

    Receive edges only appear inside an emit's receiver set. An emit is listed
    even when nobody listens.
    """
    out: list[Choice] = []
    for i in range(len(net.instances)):
        out.extend(choices_for(net, state, i))
    return out


def _apply_updates(edge: Edge, L, d: list, c: list) -> None:
    for kind, base, idx_fn, size, label, vf in edge.update_fns:
        value = vf(L, d, c)
        off = base if idx_fn is None else base + _checked_index(idx_fn(L, d, c), size, label)
        if kind == "d":
            d[off] = value
        else:
            c[off] = float(value)


def fire(net: Network, state: HybridState, choice: Choice, check: bool = True) -> HybridState:
    """Execute ``choice``; time does not advance."""
    if check and choice not in enabled_edges(net, state):
        raise PreconditionError(f"choice {describe_choice(net, choice, state)} is not enabled")
    L = list(state.locations)
    d = list(state.discrete)
    c = list(state.continuous)
    pre = state.locations
    steps = [(choice.instance, choice.edge)] + sorted(choice.receivers)
    for i, k in steps:
        edge = net.instances[i].edges[k]
        _apply_updates(edge, pre, d, c)
        L[i] = edge.target
    Lt = tuple(L)
    dt, ct = tuple(d), tuple(c)
    check_invariants(net, Lt, dt, ct, state.time)
    return HybridState(Lt, dt, ct, state.time)


def event_label(net: Network, choice: Choice, state: HybridState | None = None) -> str:
    inst = net.instances[choice.instance]
    e = inst.edges[choice.edge]
    if e.sync is None:
        return f"{inst.name}.tau"
    if e.sync[1] is None:
        return e.sync[0]
    if isinstance(e.sync[1], D.Num):
        return f"{e.sync[0]}[{int(e.sync[1].value)}]"
    if state is not None:
        v = e.index_fn(state.locations, state.discrete, state.continuous)
        return f"{e.sync[0]}[{int(v)}]"
    return f"{e.sync[0]}[?]"


def describe_choice(net: Network, choice: Choice, state: HybridState | None = None) -> str:
    inst = net.instances[choice.instance]
    e = inst.edges[choice.edge]
    text = f"{inst.name}: {inst.locations[e.source].name} -> {inst.locations[e.target].name}"
    if e.sync is not None:
        text += f" [{event_label(net, choice, state)}{e.sync[2]}]"
    for j, k in choice.receivers:
        r = net.instances[j]
        re_ = r.edges[k]
        text += f"; {r.name}: {r.locations[re_.source].name} -> {r.locations[re_.target].name}"
    return text


# --- continuous evolution ---------------------------------------------------

def active_rates(net: Network, locations) -> tuple:
    out = []
    for i, inst in enumerate(net.instances):
        out.extend(inst.locations[locations[i]].rate_fns)
    return tuple(out)


def _separable_rates(net: Network, locations) -> tuple | None:
    out = []
    for i, inst in enumerate(net.instances):
        sep = inst.locations[locations[i]].rate_sep
        if sep is None:
            return None
        out.extend(sep)
    return tuple(out)


def _separable_step(sep: tuple, c: tuple, h: float) -> tuple:
    """RK4 for rates that each depend only on their own variable.

    Performs the same floating-point operations as :func:`rk4_step` on such
    systems, so results are bit-identical.
    """
    out = list(c)
    h6 = h / 6.0
    for s, f, k in sep:
        v = c[s]
        if f is None:
            out[s] = v + h6 * (k + 2.0 * k + 2.0 * k + k)
            continue
        k1 = f(v)
        k2 = f(v + 0.5 * h * k1)
        k3 = f(v + 0.5 * h * k2)
        k4 = f(v + h * k3)
        out[s] = v + h6 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return tuple(out)


def rk4_step(rates: tuple, L, d, c: tuple, h: float) -> tuple:
    """One classical RK4 step of the active rate equations."""
    k1 = [f(L, d, c) for _, f in rates]
    y = list(c)
    for (s, _), k in zip(rates, k1):
        y[s] = c[s] + 0.5 * h * k
    k2 = [f(L, d, y) for _, f in rates]
    y = list(c)
    for (s, _), k in zip(rates, k2):
        y[s] = c[s] + 0.5 * h * k
    k3 = [f(L, d, y) for _, f in rates]
    y = list(c)
    for (s, _), k in zip(rates, k3):
        y[s] = c[s] + h * k
    k4 = [f(L, d, y) for _, f in rates]
    out = list(c)
    h6 = h / 6.0
    for j, (s, _) in enumerate(rates):
        out[s] = c[s] + h6 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
    return tuple(out)


class Trajectory:
    """Lazily integrated continuous evolution from a fixed discrete state.

    Grid points sit at ``k * step`` offsets; any other offset is reached by a
    single partial RK4 step from the grid point below it, which is exactly what
    a standalone :func:`flow` of that length computes.
    """

    def __init__(self, net: Network, state: HybridState, step: float):
        if step <= 0:
            raise PreconditionError(f"integration step must be positive, got {step}")
        self.L = state.locations
        self.d = state.discrete
        self.rates = active_rates(net, state.locations)
        sep = _separable_rates(net, state.locations)
        if sep is not None:
            self.advance = lambda c, h: _separable_step(sep, c, h)
        else:
            rates, L, d = self.rates, self.L, self.d
            self.advance = lambda c, h: rk4_step(rates, L, d, c, h)
        self.step = step
        self.static = not self.rates
        self.grid: list[tuple] = [state.continuous]
        self.exact: dict[float, tuple] = {0.0: state.continuous}

    def grid_point(self, k: int) -> tuple:
        g = self.grid
        if self.static:
            return g[0]
        while len(g) <= k:
            g.append(self.advance(g[-1], self.step))
        return g[k]

    def at(self, offset: float) -> tuple:
        hit = self.exact.get(offset)
        if hit is not None:
            return hit
        if self.static:
            return self.grid[0]
        k = int(offset // self.step)
        base = self.grid_point(k)
        rest = offset - k * self.step
        if rest <= 0:
            return base
        return self.advance(base, rest)

    def refine(self, k: int, pred: Fn) -> tuple[float, tuple, float, tuple]:
        """Bisect inside grid cell ``k`` for the switch of ``pred`` from true to false.

        Returns ``(lo, state_lo, hi, state_hi)`` with ``pred`` true at ``lo``
        (or ``lo`` is the cell start) and false at ``hi``.
        """
        base = self.grid_point(k)
        L, d, advance = self.L, self.d, self.advance
        lo, hi = 0.0, self.step
        s_lo, s_hi = base, self.grid_point(k + 1)
        for _ in range(200):
            if hi - lo <= BISECT_TOL:
                break
            mid = 0.5 * (lo + hi)
            s_mid = advance(base, mid)
            if pred(L, d, s_mid):
                lo, s_lo = mid, s_mid
            else:
                hi, s_hi = mid, s_mid
        t0 = k * self.step
        a, b = t0 + lo, t0 + hi
        self.exact.setdefault(a, s_lo)
        self.exact.setdefault(b, s_hi)
        return a, s_lo, b, s_hi


def flow(net: Network, state: HybridState, dt: float, step: float | None = None) -> HybridState:
    """Let ``dt`` time units pass; invariants must hold throughout."""
    if dt < 0:
        raise PreconditionError(f"delay must be nonnegative, got {dt}")
    if step is None:
        step = net.default_step()
    if dt == 0:
        return state
    traj = Trajectory(net, state, step)
    L, d = state.locations, state.discrete
    checks = []
    for i, inst in enumerate(net.instances):
        loc = inst.locations[L[i]]
        if loc.inv_tol is not None:
            checks.append((inst.name, loc.invariant_text, loc.inv_tol))
    for name, text, fn in checks:
        if not fn(L, d, state.continuous):
            raise InvariantViolation(name, text, state.time)
    if not traj.rates:
        return replace(state, time=state.time + dt)
    n_full = int(dt // step)

    def verify(k_prev: int, c: tuple, offset_end: float) -> None:
        for name, text, fn in checks:
            if not fn(L, d, c):
                a, _, _, _ = traj.refine(k_prev, fn)
                raise InvariantViolation(name, text, state.time + min(a, offset_end))

    for k in range(1, n_full + 1):
        verify(k - 1, traj.grid_point(k), k * step)
    c = traj.at(dt)
    verify(n_full, c, dt)
    return HybridState(L, d, c, state.time + dt)


def max_delay(net: Network, state: HybridState, step: float | None = None,
              horizon: float | None = None) -> float:
    """Largest delay keeping every invariant true, or ``math.inf`` when unconstrained.

    With ``horizon`` set, returns ``math.inf`` if no invariant binds before it.
    """
    if step is None:
        step = net.default_step()
    traj = Trajectory(net, state, step)
    bound, _ = invariant_bound(net, traj, horizon)
    return bound


def invariant_bound(net: Network, traj: Trajectory, horizon: float | None) -> tuple[float, tuple | None]:
    L, d = traj.L, traj.d
    c0 = traj.grid[0]
    active = {s for s, _ in traj.rates}
    preds = []
    for i, inst in enumerate(net.instances):
        loc = inst.locations[L[i]]
        if loc.inv_exact is None:
            continue
        if not loc.inv_exact(L, d, c0):
            return 0.0, c0
        if loc.inv_slots & active:
            preds.append(loc.inv_exact)
    if not preds:
        return math.inf, None
    limit = MAX_SCAN_STEPS if horizon is None else int(horizon // traj.step) + 1
    for k in range(1, limit + 1):
        c = traj.grid_point(k)
        for p in preds:
            if not p(L, d, c):
                a, s_a, _, _ = traj.refine(k - 1, _all_true(preds))
                return a, s_a
    return math.inf, None


def _all_true(preds: list[Fn]) -> Fn:
    return lambda L, d, c: all(p(L, d, c) for p in preds)


def variable_value(net: Network, state: HybridState, label: str):
    """Look up a variable by its display label, e.g. ``nus[1]`` or ``server.cnt``."""
    if label in net.continuous_names:
        return state.continuous[net.continuous_names.index(label)]
    if label in net.discrete_names:
        return state.discrete[net.discrete_names.index(label)]
    raise KeyError(label)


def iter_edges(net: Network) -> Iterable[tuple[int, int, Edge]]:
    for i, inst in enumerate(net.instances):
        for k, e in enumerate(inst.edges):
            yield i, k, e

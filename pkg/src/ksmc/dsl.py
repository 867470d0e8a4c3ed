"""Text format for models (``.ksm``) and queries (``.ksq``).

Model files::

    orbit leo { a = 10, e = 0.2, T = 1 }
    const FLSrvId = 2;
    broadcast chan reset[2];
    int terminated = 0;
    continuous nus[2] = {PI, 0};

    template SV(nodeId, orbitId) {
        location loop init invariant nus[nodeId] <= 2 * PI
            rate nus[nodeId]' = kepler_rate(orbitId, nus[nodeId]);
        edge loop -> loop guard nus[nodeId] >= 2 * PI sync reset[nodeId]!
            update nus[nodeId] := nus[nodeId] - 2 * PI;
    }

    instance sv0 = SV(0, 0);

Query files hold one query per line; ``#`` starts a comment.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ksmc import defs as D
from ksmc.errors import ParseError

_GLYPHS = {"≤": "<=", "≥": ">=", "≠": "!=", "◊": "<>", "π": "PI", "∧": "&&", "∨": "||", "¬": "!"}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>(?:\#|//)[^\n]*)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>->|:=|<=|>=|==|!=|&&|\|\||<>|[{}()\[\],;=' !?+\-*/<>.:])
  | (?P<glyph>[≤≥≠◊π∧∨¬])
    """,
    re.VERBOSE,
)

KEYWORDS = {
    "orbit", "const", "broadcast", "chan", "int", "continuous", "template", "instance",
    "location", "edge", "init", "accepting", "invariant", "rate", "exp", "guard", "sync",
    "update", "and", "or", "not", "true", "false", "PI", "M_PI",
}


@dataclass(frozen=True)
class Token:
    kind: str  # "num", "ident", "op", "eof"
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    toks: list[Token] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        col = pos - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "num":
            toks.append(Token("num", m.group(), line, col))
        elif kind == "ident":
            toks.append(Token("ident", m.group(), line, col))
        elif kind == "op":
            toks.append(Token("op", m.group(), line, col))
        elif kind == "glyph":
            sub = _GLYPHS[m.group()]
            toks.append(Token("ident" if sub == "PI" else "op", sub, line, col))
        pos = m.end()
    toks.append(Token("eof", "", line, pos - line_start + 1))
    return toks


@dataclass(frozen=True)
class ModelSource:
    text: str
    filename: str
    defs: D.ModelDefs = field(repr=False)


class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.i = 0

    # token helpers
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def at(self, *texts: str) -> bool:
        t = self.tok
        return t.kind in ("op", "ident") and t.text in texts

    def advance(self) -> Token:
        t = self.tok
        if t.kind != "eof":
            self.i += 1
        return t

    def error(self, what: str, expected: tuple[str, ...] = ()) -> ParseError:
        t = self.tok
        found = "end of input" if t.kind == "eof" else repr(t.text)
        return ParseError(f"{what}, found {found}", t.line, t.col, expected)

    def expect(self, *texts: str) -> Token:
        if self.at(*texts):
            return self.advance()
        raise self.error(f"expected {' or '.join(repr(x) for x in texts)}", texts)

    def ident(self, what: str = "identifier") -> str:
        t = self.tok
        if t.kind == "ident" and t.text not in KEYWORDS:
            return self.advance().text
        raise self.error(f"expected {what}", (what,))

    def integer(self) -> int:
        t = self.tok
        if t.kind == "num" and t.text.isdigit():
            return int(self.advance().text)
        raise self.error("expected integer", ("integer",))

    def number(self) -> float | int:
        neg = False
        if self.at("-"):
            self.advance()
            neg = True
        t = self.tok
        if t.kind != "num":
            raise self.error("expected number", ("number",))
        self.advance()
        v = _num_value(t.text)
        return -v if neg else v

    # expressions
    def expr(self) -> D.Expr:
        left = self.and_expr()
        while self.at("or", "||"):
            self.advance()
            left = D.Binary("or", left, self.and_expr())
        return left

    def and_expr(self) -> D.Expr:
        left = self.not_expr()
        while self.at("and", "&&"):
            self.advance()
            left = D.Binary("and", left, self.not_expr())
        return left

    def not_expr(self) -> D.Expr:
        if self.at("not", "!"):
            self.advance()
            return D.Unary("not", self.not_expr())
        return self.cmp_expr()

    def cmp_expr(self) -> D.Expr:
        left = self.add_expr()
        if self.at(*D.COMPARE_OPS):
            op = self.advance().text
            left = D.Binary(op, left, self.add_expr())
        return left

    def add_expr(self) -> D.Expr:
        left = self.mul_expr()
        while self.at("+", "-"):
            op = self.advance().text
            left = D.Binary(op, left, self.mul_expr())
        return left

    def mul_expr(self) -> D.Expr:
        left = self.unary()
        while self.at("*", "/"):
            op = self.advance().text
            left = D.Binary(op, left, self.unary())
        return left

    def unary(self) -> D.Expr:
        if self.at("-"):
            self.advance()
            x = self.unary()
            if isinstance(x, D.Num):
                return D.Num(-x.value)
            return D.Unary("-", x)
        return self.atom()

    _ATOM_EXPECTED = ("number", "identifier", "(", "-", "not", "PI", "true", "false")

    def atom(self) -> D.Expr:
        t = self.tok
        if t.kind == "num":
            self.advance()
            return D.Num(_num_value(t.text))
        if self.at("("):
            self.advance()
            x = self.expr()
            self.expect(")")
            return x
        if t.kind == "ident":
            if t.text in ("PI", "M_PI"):
                self.advance()
                return D.Pi()
            if t.text in ("true", "false"):
                self.advance()
                return D.Bool(t.text == "true")
            if t.text in KEYWORDS:
                raise self.error("expected expression", self._ATOM_EXPECTED)
            name = self.advance().text
            if self.at("("):
                self.advance()
                args = []
                if not self.at(")"):
                    args.append(self.expr())
                    while self.at(","):
                        self.advance()
                        args.append(self.expr())
                self.expect(")")
                return D.Call(name, tuple(args))
            if self.at("["):
                self.advance()
                idx = self.expr()
                self.expect("]")
                return D.Var(name, idx)
            if self.at(".") and self.peek().kind == "ident":
                self.advance()
                return D.Member(name, self.advance().text)
            return D.Var(name)
        raise self.error("expected expression", self._ATOM_EXPECTED)

    def lvalue(self) -> D.Var:
        name = self.ident("variable")
        if self.at("["):
            self.advance()
            idx = self.expr()
            self.expect("]")
            return D.Var(name, idx)
        return D.Var(name)

    # declarations
    _ITEM_KEYWORDS = ("orbit", "const", "broadcast", "int", "continuous", "template", "instance")

    def model(self) -> D.ModelDefs:
        orbits, consts, channels, variables, templates, instances = [], [], [], [], [], []
        names: set[str] = set()
        template_names: set[str] = set()
        instance_names: set[str] = set()

        def claim(pool: set, name: str, tok: Token, what: str) -> None:
            if name in pool:
                raise ParseError(f"duplicate declaration of {what} '{name}'", tok.line, tok.col)
            pool.add(name)

        if self.tok.kind == "eof":
            raise ParseError("expected declaration", self.tok.line, self.tok.col, self._ITEM_KEYWORDS)
        while self.tok.kind != "eof":
            start = self.tok
            if self.at("orbit"):
                od = self.orbit_decl()
                claim(names, od.name, start, "orbit")
                orbits.append(od)
            elif self.at("const"):
                cd = self.const_decl()
                claim(names, cd.name, start, "constant")
                consts.append(cd)
            elif self.at("broadcast"):
                ch = self.channel_decl()
                claim(names, ch.name, start, "channel")
                channels.append(ch)
            elif self.at("int", "continuous"):
                vd = self.var_decl()
                claim(names, vd.name, start, "variable")
                variables.append(vd)
            elif self.at("template"):
                tp = self.template()
                claim(template_names, tp.name, start, "template")
                templates.append(tp)
            elif self.at("instance"):
                ins = self.instance_decl()
                claim(instance_names, ins.name, start, "instance")
                instances.append(ins)
            elif self.at("location", "edge"):
                # parse first so syntax errors inside are reported precisely
                what = self.tok.text
                self.location() if what == "location" else self.edge()
                raise ParseError(f"{what} declared outside a template", start.line, start.col, ("template",))
            else:
                raise self.error("expected declaration", self._ITEM_KEYWORDS)
        return D.ModelDefs(tuple(orbits), tuple(consts), tuple(channels), tuple(variables),
                           tuple(templates), tuple(instances))

    def _span(self, t: Token) -> D.Span:
        return (t.line, t.col)

    def orbit_decl(self) -> D.OrbitDecl:
        start = self.expect("orbit")
        name = self.ident("orbit name")
        self.expect("{")
        vals: dict[str, float] = {}
        while True:
            t = self.tok
            key = self.advance().text if t.kind == "ident" and t.text in ("a", "e", "T") else None
            if key is None:
                raise self.error("expected orbit element", ("a", "e", "T"))
            if key in vals:
                raise ParseError(f"duplicate orbit element '{key}'", t.line, t.col)
            self.expect("=")
            vals[key] = float(self.number())
            if self.at(","):
                self.advance()
                continue
            break
        end = self.expect("}")
        if self.at(";"):
            self.advance()
        missing = [k for k in ("a", "e", "T") if k not in vals]
        if missing:
            raise ParseError(f"orbit '{name}' missing element(s) {', '.join(missing)}", end.line, end.col)
        return D.OrbitDecl(name, vals["a"], vals["e"], vals["T"], span=self._span(start))

    def const_decl(self) -> D.ConstDecl:
        start = self.expect("const")
        name = self.ident("constant name")
        self.expect("=")
        value = self.expr()
        self.expect(";")
        return D.ConstDecl(name, value, span=self._span(start))

    def channel_decl(self) -> D.ChannelDecl:
        start = self.expect("broadcast")
        self.expect("chan")
        name = self.ident("channel name")
        size = None
        if self.at("["):
            self.advance()
            size = self.integer()
            self.expect("]")
        self.expect(";")
        return D.ChannelDecl(name, size, span=self._span(start))

    def var_decl(self) -> D.VarDecl:
        start = self.expect("int", "continuous")
        name = self.ident("variable name")
        size = None
        if self.at("["):
            self.advance()
            size = self.integer()
            self.expect("]")
        init = None
        if self.at("="):
            self.advance()
            if self.at("{"):
                self.advance()
                items = [self.expr()]
                while self.at(","):
                    self.advance()
                    items.append(self.expr())
                self.expect("}")
                if size is None:
                    raise ParseError(f"scalar '{name}' initialized with a list", start.line, start.col)
                init = tuple(items)
            else:
                if size is not None:
                    raise self.error(f"array '{name}' needs a brace-enclosed initializer", ("{",))
                init = (self.expr(),)
        self.expect(";")
        return D.VarDecl(start.text, name, size, init, span=self._span(start))

    def template(self) -> D.Template:
        start = self.expect("template")
        name = self.ident("template name")
        self.expect("(")
        params = []
        if not self.at(")"):
            params.append(self.ident("parameter name"))
            while self.at(","):
                self.advance()
                params.append(self.ident("parameter name"))
        self.expect(")")
        self.expect("{")
        variables, locations, edges = [], [], []
        local_names: set[str] = set(params)
        loc_names: set[str] = set()
        while not self.at("}"):
            t = self.tok
            if self.at("int", "continuous"):
                vd = self.var_decl()
                if vd.name in local_names:
                    raise ParseError(f"duplicate declaration of '{vd.name}' in template {name}", t.line, t.col)
                local_names.add(vd.name)
                variables.append(vd)
            elif self.at("location"):
                ld = self.location()
                if ld.name in loc_names:
                    raise ParseError(f"duplicate location '{ld.name}' in template {name}", t.line, t.col)
                loc_names.add(ld.name)
                locations.append(ld)
            elif self.at("edge"):
                edges.append(self.edge())
            else:
                raise self.error("expected template member", ("int", "continuous", "location", "edge", "}"))
        self.expect("}")
        return D.Template(name, tuple(params), tuple(variables), tuple(locations), tuple(edges),
                          span=self._span(start))

    def location(self) -> D.LocationDef:
        start = self.expect("location")
        name = self.ident("location name")
        initial = accepting = False
        invariant = None
        rates: list[D.RateDef] = []
        exp_rate = None
        while self.at("init", "accepting"):
            if self.advance().text == "init":
                initial = True
            else:
                accepting = True
        if self.at("invariant"):
            self.advance()
            invariant = self.expr()
        while self.at("rate"):
            self.advance()
            if self.at("exp"):
                self.advance()
                exp_rate = D.Num(self.number())
                continue
            target = self.lvalue()
            self.expect("'")
            self.expect("=")
            rates.append(D.RateDef(target, self.expr()))
        if not self.at(";"):
            raise self.error("expected ';'", (";", "rate") if invariant is not None or rates else
                             (";", "init", "accepting", "invariant", "rate"))
        self.advance()
        return D.LocationDef(name, initial, accepting, invariant, tuple(rates), exp_rate, span=self._span(start))

    def edge(self) -> D.EdgeDef:
        start = self.expect("edge")
        src = self.ident("location name")
        self.expect("->")
        dst = self.ident("location name")
        guard = sync = None
        updates: list[D.Assign] = []
        if self.at("guard"):
            self.advance()
            guard = self.expr()
        if self.at("sync"):
            self.advance()
            chan = self.ident("channel name")
            idx = None
            if self.at("["):
                self.advance()
                idx = self.expr()
                self.expect("]")
            direction = self.expect("!", "?").text
            sync = D.Sync(chan, idx, direction)
        if self.at("update"):
            self.advance()
            updates.append(self.assign())
            while self.at(","):
                self.advance()
                updates.append(self.assign())
        if not self.at(";"):
            raise self.error("expected ';'", (";", "guard", "sync", "update"))
        self.advance()
        return D.EdgeDef(src, dst, guard, sync, tuple(updates), span=self._span(start))

    def assign(self) -> D.Assign:
        target = self.lvalue()
        self.expect(":=", "=")
        return D.Assign(target, self.expr())

    def instance_decl(self) -> D.InstanceDecl:
        start = self.expect("instance")
        name = self.ident("instance name")
        self.expect("=")
        tname = self.ident("template name")
        self.expect("(")
        args = []
        if not self.at(")"):
            args.append(self.expr())
            while self.at(","):
                self.advance()
                args.append(self.expr())
        self.expect(")")
        self.expect(";")
        return D.InstanceDecl(name, tname, tuple(args), span=self._span(start))

    # queries
    def query(self) -> D.Query:
        t = self.tok
        if t.kind == "ident" and t.text == "A":
            self.advance()
            if self.at("["):
                self.advance()
                self.expect("]")
                self.expect("not", "!")
                if not (self.tok.kind == "ident" and self.tok.text == "deadlock"):
                    raise self.error("expected 'deadlock'", ("deadlock",))
                self.advance()
                return D.NoDeadlock()
            self.expect("<>")
            return D.Eventually(self.expr())
        if t.kind == "ident" and t.text == "Pr":
            self.advance()
            bound = self.bound()
            self.expect("(")
            self.expect("<>")
            goal = self.expr()
            self.expect(")")
            return D.ProbReach(bound, goal)
        if t.kind == "ident" and t.text == "simulate":
            self.advance()
            bound = self.bound()
            self.expect("{")
            obs = [self.expr()]
            while self.at(","):
                self.advance()
                obs.append(self.expr())
            self.expect("}")
            return D.Simulate(bound, tuple(obs))
        raise self.error("expected query", ("A[]", "A<>", "Pr", "simulate"))

    def bound(self) -> float:
        self.expect("[")
        self.expect("<=")
        t = self.tok
        value = self.number()
        self.expect("]")
        if not value > 0:
            raise ParseError("bound must be positive", t.line, t.col)
        return value


def _num_value(text: str) -> float | int:
    if re.fullmatch(r"\d+", text):
        return int(text)
    return float(text)


def parse_model(text: str, filename: str = "<string>") -> ModelSource:
    p = _Parser(text)
    return ModelSource(text, filename, p.model())


def parse_expr(text: str) -> D.Expr:
    p = _Parser(text)
    e = p.expr()
    if p.tok.kind != "eof":
        raise p.error("unexpected trailing input", ("end of input",))
    return e


def parse_query(text: str) -> D.Query:
    p = _Parser(text)
    q = p.query()
    if p.tok.kind != "eof":
        raise p.error("unexpected trailing input", ("end of input",))
    return q


def parse_query_file(text: str) -> list[tuple[int, str, D.Query]]:
    """Parse a ``.ksq`` file into ``(line number, source text, query)`` triples."""
    out = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            out.append((n, line, parse_query(line)))
        except ParseError as exc:
            raise ParseError(exc.message, n, exc.col, exc.expected) from None
    return out


# --- printing ---------------------------------------------------------------

_PREC = {"or": 1, "and": 2, "not": 3, "<": 4, "<=": 4, "==": 4, "!=": 4, ">=": 4, ">": 4,
         "+": 5, "-": 5, "*": 6, "/": 6}
_UNARY_PREC = 7
_ATOM_PREC = 8


def _fmt_num(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def _expr(e, min_prec: int = 0) -> str:
    text, prec = _expr_prec(e)
    return f"({text})" if prec < min_prec else text


def _expr_prec(e) -> tuple[str, int]:
    if isinstance(e, D.Num):
        s = _fmt_num(e.value)
        return s, (_UNARY_PREC if s.startswith("-") else _ATOM_PREC)
    if isinstance(e, D.Bool):
        return ("true" if e.value else "false"), _ATOM_PREC
    if isinstance(e, D.Pi):
        return "PI", _ATOM_PREC
    if isinstance(e, D.Var):
        if e.index is None:
            return e.name, _ATOM_PREC
        return f"{e.name}[{_expr(e.index)}]", _ATOM_PREC
    if isinstance(e, D.Member):
        return f"{e.instance}.{e.member}", _ATOM_PREC
    if isinstance(e, D.Call):
        return f"{e.func}({', '.join(_expr(a) for a in e.args)})", _ATOM_PREC
    if isinstance(e, D.Unary):
        if e.op == "not":
            return f"not {_expr(e.operand, _PREC['not'])}", _PREC["not"]
        return f"-{_expr(e.operand, _UNARY_PREC)}", _UNARY_PREC
    if isinstance(e, D.Binary):
        p = _PREC[e.op]
        left_min = p + 1 if p == 4 else p
        return f"{_expr(e.left, left_min)} {e.op} {_expr(e.right, p + 1)}", p
    # resolved forms from the network layer, for diagnostics
    label = getattr(e, "label", None)
    if label is not None:
        return label, _ATOM_PREC
    if hasattr(e, "orbit") and hasattr(e, "arg"):
        return f"kepler_rate({e.orbit}, {_expr(e.arg)})", _ATOM_PREC
    return repr(e), _ATOM_PREC


def format_expr(e) -> str:
    return _expr(e)


def _fmt_var(vd: D.VarDecl) -> str:
    s = f"{vd.kind} {vd.name}"
    if vd.size is not None:
        s += f"[{vd.size}]"
    if vd.init is not None:
        if vd.size is None:
            s += f" = {_expr(vd.init[0])}"
        else:
            s += " = {" + ", ".join(_expr(x) for x in vd.init) + "}"
    return s + ";"


def _fmt_location(ld: D.LocationDef) -> str:
    parts = ["location", ld.name]
    if ld.initial:
        parts.append("init")
    if ld.accepting:
        parts.append("accepting")
    if ld.invariant is not None:
        parts += ["invariant", _expr(ld.invariant)]
    for rd in ld.rates:
        parts += ["rate", f"{_expr(rd.target)}'", "=", _expr(rd.expr)]
    if ld.exp_rate is not None:
        parts += ["rate", "exp", _expr(ld.exp_rate)]
    return " ".join(parts) + ";"


def _fmt_edge(ed: D.EdgeDef) -> str:
    parts = ["edge", ed.source, "->", ed.target]
    if ed.guard is not None:
        parts += ["guard", _expr(ed.guard)]
    if ed.sync is not None:
        ch = ed.sync.channel if ed.sync.index is None else f"{ed.sync.channel}[{_expr(ed.sync.index)}]"
        parts += ["sync", ch + ed.sync.direction]
    if ed.updates:
        parts += ["update", ", ".join(f"{_expr(a.target)} := {_expr(a.value)}" for a in ed.updates)]
    return " ".join(parts) + ";"


def print_model(defs: D.ModelDefs | ModelSource) -> str:
    """Canonical text for a model; ``parse_model(print_model(d)).defs == d``."""
    if isinstance(defs, ModelSource):
        defs = defs.defs
    blocks: list[list[str]] = []
    blocks.append([f"orbit {o.name} {{ a = {_fmt_num(o.a)}, e = {_fmt_num(o.e)}, T = {_fmt_num(o.T)} }}"
                   for o in defs.orbits])
    blocks.append([f"const {c.name} = {_expr(c.value)};" for c in defs.consts])
    blocks.append([f"broadcast chan {c.name}" + (f"[{c.size}]" if c.size is not None else "") + ";"
                   for c in defs.channels])
    blocks.append([_fmt_var(v) for v in defs.variables])
    for tp in defs.templates:
        lines = [f"template {tp.name}({', '.join(tp.params)}) {{"]
        lines += ["    " + _fmt_var(v) for v in tp.variables]
        lines += ["    " + _fmt_location(ld) for ld in tp.locations]
        lines += ["    " + _fmt_edge(ed) for ed in tp.edges]
        lines.append("}")
        blocks.append(lines)
    blocks.append([f"instance {i.name} = {i.template}({', '.join(_expr(a) for a in i.args)});"
                   for i in defs.instances])
    return "\n\n".join("\n".join(b) for b in blocks if b) + "\n"


def format_query(q: D.Query) -> str:
    if isinstance(q, D.NoDeadlock):
        return "A[] not deadlock"
    if isinstance(q, D.Eventually):
        return f"A<> {_expr(q.goal)}"
    if isinstance(q, D.ProbReach):
        return f"Pr[<={_fmt_num(q.bound)}](<> {_expr(q.goal)})"
    if isinstance(q, D.Simulate):
        return f"simulate [<={_fmt_num(q.bound)}] {{{', '.join(_expr(o) for o in q.observables)}}}"
    raise TypeError(f"not a query: {q!r}")

import pytest
from hypothesis import given, settings, strategies as st

from ksmc import defs as D
from ksmc.cfl import bundled_text
from ksmc.dsl import (
    KEYWORDS,
    format_expr,
    format_query,
    parse_expr,
    parse_model,
    parse_query,
    parse_query_file,
    print_model,
)
from ksmc.errors import ParseError

BUNDLED = ["cfl_stochastic.ksm", "cfl_conventional.ksm"]


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_round_trip(name):
    src = parse_model(bundled_text(name), name)
    text = print_model(src.defs)
    again = parse_model(text)
    assert again.defs == src.defs
    # one normalization pass reaches a fixpoint
    assert print_model(again.defs) == text


def test_stochastic_file_shape():
    defs = parse_model(bundled_text("cfl_stochastic.ksm")).defs
    assert [t.name for t in defs.templates] == ["SV", "FlServer", "FlClient"]
    assert [i.name for i in defs.instances] == ["sv0", "sv1", "server", "client0", "client1"]
    assert defs.orbits[0] == D.OrbitDecl("leo", 10.0, 0.2, 1.0)


def test_empty_input():
    with pytest.raises(ParseError) as ei:
        parse_model("")
    assert str(ei.value).startswith("expected declaration at 1:1")
    assert "template" in ei.value.expected


def test_error_at_end_of_input():
    text = "location L1 invariant nus[0] <= "
    with pytest.raises(ParseError) as ei:
        parse_model(text)
    err = ei.value
    assert "end of input" in err.message
    assert (err.line, err.col) == (1, len(text) + 1)
    assert "number" in err.expected


def test_location_outside_template():
    with pytest.raises(ParseError, match="outside a template"):
        parse_model("location L1 init;")


@pytest.mark.parametrize("text,line,col", [
    ("int x = 0;\nint x = 1;", 2, 1),
    ("const a = 1;\nbroadcast chan a;", 2, 1),
    ("template T() { location a init; location a; }", 1, 33),
    ("template T() { location a init; }\ntemplate T() { location b init; }", 2, 1),
])
def test_duplicate_declarations(text, line, col):
    with pytest.raises(ParseError, match="duplicate") as ei:
        parse_model(text)
    assert (ei.value.line, ei.value.col) == (line, col)


@pytest.mark.parametrize("text", [
    "int x = $;", "orbit o { a = 1, e = 0.1 }", "template T( { }", "int x[2] = 3;",
    "broadcast chan c[x];", "template T() { edge a -> b sync c; }", "instance i = T(;",
    "const c = 1 +;", "\n\n   int ;", "int x = 1", "orbit o { a = 1, a = 2, T = 1 }",
])
def test_errors_carry_positions_inside_input(text):
    with pytest.raises(ParseError) as ei:
        parse_model(text)
    err = ei.value
    lines = text.split("\n")
    assert 1 <= err.line <= len(lines)
    assert 1 <= err.col <= len(lines[err.line - 1]) + 1


def test_unicode_glyphs():
    e = parse_expr("nus[1] ≤ 2 * π")
    assert e == D.Binary("<=", D.Var("nus", D.Num(1)), D.Binary("*", D.Num(2), D.Pi()))
    assert format_expr(e) == "nus[1] <= 2 * PI"
    assert parse_expr("M_PI") == D.Pi()
    assert parse_expr("x ≠ 1 ∧ ¬y ≥ 2") == parse_expr("x != 1 && !y >= 2")


def test_comments_and_aliases():
    a = parse_model("# c\nint x = 1; // trailing\n").defs
    assert a.variables == (D.VarDecl("int", "x", None, (D.Num(1),)),)
    assert parse_expr("a && b || not c") == parse_expr("(a and b) or (not c)")


def test_precedence():
    assert parse_expr("1 + 2 * 3") == D.Binary("+", D.Num(1), D.Binary("*", D.Num(2), D.Num(3)))
    assert parse_expr("a - b - c") == D.Binary("-", D.Binary("-", D.Var("a"), D.Var("b")), D.Var("c"))
    assert format_expr(parse_expr("a - (b - c)")) == "a - (b - c)"
    assert format_expr(parse_expr("(a - b) - c")) == "a - b - c"
    assert format_expr(parse_expr("-(x + 1) * 2")) == "-(x + 1) * 2"
    assert parse_expr("-3") == D.Num(-3)
    assert format_expr(parse_expr("not (a or b) and c")) == "not (a or b) and c"
    assert format_expr(parse_expr("(a < b) == c")) == "(a < b) == c"


def test_deeply_nested_expression_round_trip():
    e = D.Var("x")
    ops = ["-", "/", "+", "*", "<", "==", "and", "or"]
    for k in range(60):
        op = ops[k % len(ops)]
        e = D.Binary(op, D.Num(k), e) if k % 2 else D.Binary(op, e, D.Var(f"v{k}"))
        if k % 7 == 0:
            e = D.Unary("not" if k % 2 else "-", e)
    assert parse_expr(format_expr(e)) == e


BUNDLED_QUERIES = [
    ("A[] not deadlock", D.NoDeadlock()),
    ("A<> (terminated == 1)", D.Eventually(D.Binary("==", D.Var("terminated"), D.Num(1)))),
    ("Pr[<=3](<> server.send)", D.ProbReach(3, D.Member("server", "send"))),
    ("simulate [<=2] {nus[0], nus[1], server.loc, client0.loc, client1.loc}",
     D.Simulate(2, (D.Var("nus", D.Num(0)), D.Var("nus", D.Num(1)), D.Member("server", "loc"),
                    D.Member("client0", "loc"), D.Member("client1", "loc")))),
]


@pytest.mark.parametrize("text,expected", BUNDLED_QUERIES)
def test_bundled_queries(text, expected):
    q = parse_query(text)
    assert q == expected
    assert parse_query(format_query(q)) == q


def test_query_glyphs_and_spacing():
    assert parse_query("Pr[≤ 3](◊ server.send)") == parse_query("Pr[<=3](<> server.send)")
    assert parse_query("A <> (terminated == 1)") == parse_query("A<> terminated == 1")
    assert parse_query("A[] !deadlock") == D.NoDeadlock()


@pytest.mark.parametrize("text", ["Pr[<=0](<> server.send)", "Pr[<=-1](<> x)", "simulate [<=0] {x}"])
def test_bound_must_be_positive(text):
    with pytest.raises(ParseError, match="bound must be positive"):
        parse_query(text)


@pytest.mark.parametrize("text", ["E<> x", "A[] deadlock", "Pr[<=3](x)", "simulate [<=2] {}", "A<> x y"])
def test_bad_queries(text):
    with pytest.raises(ParseError):
        parse_query(text)


def test_query_file():
    qs = parse_query_file(bundled_text("cfl.ksq"))
    assert [q for _, _, q in qs] == [q for _, q in BUNDLED_QUERIES]
    assert all(n > 1 for n, _, _ in qs)
    with pytest.raises(ParseError) as ei:
        parse_query_file("A[] not deadlock\n\n# x\nPr[<=0](<> a)\n")
    assert ei.value.line == 4


# --- fuzzed round trip ----------------------------------------------------------

_ident = st.from_regex(r"[a-z][a-z0-9_]{0,4}", fullmatch=True).filter(lambda s: s not in KEYWORDS)


def _named(prefix):
    return _ident.map(lambda s: prefix + s)


_num = st.one_of(
    st.integers(-10 ** 6, 10 ** 6).map(D.Num),
    st.floats(allow_nan=False, allow_infinity=False, width=64).map(D.Num),
)
_leaf = st.one_of(
    _num,
    st.booleans().map(D.Bool),
    st.just(D.Pi()),
    _ident.map(D.Var),
    st.builds(D.Member, _ident, _ident),
)


def _extend(children):
    return st.one_of(
        st.builds(D.Binary, st.sampled_from(list(D.ARITH_OPS + D.COMPARE_OPS + D.BOOL_OPS)), children, children),
        st.builds(D.Unary, st.just("not"), children),
        st.builds(D.Unary, st.just("-"), children).filter(lambda u: not isinstance(u.operand, D.Num)),
        st.builds(D.Var, _ident, children),
        st.builds(D.Call, _ident, st.lists(children, max_size=3).map(tuple)),
    )


exprs = st.recursive(_leaf, _extend, max_leaves=12)
pos = st.one_of(st.integers(1, 1000), st.floats(1e-3, 1e3))


@st.composite
def var_decls(draw, prefix, kinds=("int", "continuous")):
    name = draw(_named(prefix))
    kind = draw(st.sampled_from(kinds))
    size = draw(st.one_of(st.none(), st.integers(1, 3)))
    if draw(st.booleans()):
        init = None
    else:
        init = tuple(draw(exprs) for _ in range(1 if size is None else size))
    return D.VarDecl(kind, name, size, init)


@st.composite
def locations(draw, name):
    rates = tuple(D.RateDef(D.Var(draw(_ident), draw(st.one_of(st.none(), exprs))), draw(exprs))
                  for _ in range(draw(st.integers(0, 2))))
    return D.LocationDef(
        name, draw(st.booleans()), draw(st.booleans()),
        draw(st.one_of(st.none(), exprs)), rates,
        draw(st.one_of(st.none(), pos.map(D.Num))),
    )


@st.composite
def edges(draw, locs):
    sync = None
    if draw(st.booleans()):
        sync = D.Sync(draw(_ident), draw(st.one_of(st.none(), exprs)), draw(st.sampled_from("!?")))
    ups = tuple(D.Assign(D.Var(draw(_ident), draw(st.one_of(st.none(), exprs))), draw(exprs))
                for _ in range(draw(st.integers(0, 2))))
    return D.EdgeDef(draw(st.sampled_from(locs)), draw(st.sampled_from(locs)),
                     draw(st.one_of(st.none(), exprs)), sync, ups)


@st.composite
def templates(draw, name):
    params = tuple(draw(st.lists(_named("p_"), max_size=3, unique=True)))
    local_names = draw(st.lists(_named("l_"), max_size=2, unique=True))
    variables = tuple(D.VarDecl("int", n, None, (draw(exprs),)) for n in local_names)
    loc_names = draw(st.lists(_named("q_"), min_size=1, max_size=3, unique=True))
    locs = tuple(draw(locations(n)) for n in loc_names)
    eds = tuple(draw(edges(loc_names)) for _ in range(draw(st.integers(0, 3))))
    return D.Template(name, params, variables, locs, eds)


@st.composite
def models(draw):
    orbits = tuple(D.OrbitDecl(n, draw(pos.map(float)), draw(st.floats(0, 0.99)), draw(pos.map(float)))
                   for n in draw(st.lists(_named("o_"), max_size=2, unique=True)))
    consts = tuple(D.ConstDecl(n, draw(exprs)) for n in draw(st.lists(_named("k_"), max_size=2, unique=True)))
    chans = tuple(D.ChannelDecl(n, draw(st.one_of(st.none(), st.integers(1, 9))))
                  for n in draw(st.lists(_named("c_"), max_size=2, unique=True)))
    variables = tuple(draw(st.lists(var_decls("v_"), max_size=3, unique_by=lambda v: v.name)))
    tps = tuple(draw(templates(n)) for n in draw(st.lists(_named("T_"), max_size=2, unique=True)))
    insts = tuple(D.InstanceDecl(n, draw(_ident), tuple(draw(st.lists(exprs, max_size=2))))
                  for n in draw(st.lists(_named("i_"), max_size=2, unique=True)))
    m = D.ModelDefs(orbits, consts, chans, variables, tps, insts)
    if not any((orbits, consts, chans, variables, tps, insts)):
        m = D.ModelDefs(variables=(D.VarDecl("int", "v_x"),))
    return m


@settings(max_examples=100, deadline=None)
@given(models())
def test_fuzzed_model_round_trip(defs):
    assert parse_model(print_model(defs)).defs == defs


@settings(max_examples=200, deadline=None)
@given(exprs)
def test_fuzzed_expression_round_trip(e):
    assert parse_expr(format_expr(e)) == e


@settings(max_examples=50, deadline=None)
@given(st.one_of(
    st.just(D.NoDeadlock()),
    st.builds(D.Eventually, exprs),
    st.builds(D.ProbReach, pos, exprs),
    st.builds(D.Simulate, pos, st.lists(exprs, min_size=1, max_size=4).map(tuple)),
))
def test_fuzzed_query_round_trip(q):
    assert parse_query(format_query(q)) == q

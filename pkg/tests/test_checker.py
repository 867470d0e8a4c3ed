import random
from dataclasses import replace

import numpy as np
import pytest

from ksmc.automata import bind_expr, build_network, enabled_edges, fire, initial_state
from ksmc.cfl import conventional_cfl, conventional_defs, stochastic_cfl
from ksmc.checker import check_eventually, check_no_deadlock, explore, replay
from ksmc.dsl import parse_expr, parse_model
from ksmc.errors import StateBudgetExceeded, TimedModelError

TERMINATED = parse_expr("terminated == 1")


def net_of(text):
    return build_network(parse_model(text).defs)


def test_conventional_graph_regression():
    g = explore(conventional_cfl(2))
    # recorded from this implementation; guards against silent semantic drift
    assert (len(g.states), g.n_transitions) == (7, 7)


def test_state_count_grows_with_clients():
    sizes = [len(explore(conventional_cfl(n)).states) for n in range(1, 6)]
    assert sizes == sorted(set(sizes))


def test_trivial_network():
    net = net_of("template T() { location a init accepting; } instance t = T();")
    g = explore(net)
    assert (len(g.states), g.n_transitions) == (1, 0)
    assert check_no_deadlock(net).holds


def test_lone_non_accepting_state_is_a_deadlock():
    net = net_of("template T() { location a init; } instance t = T();")
    v = check_no_deadlock(net)
    assert not v.holds and v.witness == ()


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_conventional_passes_both(n):
    net = conventional_cfl(n)
    assert check_no_deadlock(net).holds
    assert check_eventually(net, TERMINATED).holds


def _without_edge(defs, tname, k):
    tps = tuple(replace(t, edges=t.edges[:k] + t.edges[k + 1:]) if t.name == tname else t
                for t in defs.templates)
    return replace(defs, templates=tps)


def _all_deletions(defs):
    for t in defs.templates:
        for k in range(len(t.edges)):
            yield t.name, k, _without_edge(defs, t.name, k)


def test_deleting_client_reply_deadlocks_server():
    defs = conventional_defs(2)
    tp = next(t for t in defs.templates if t.name == "Client")
    k = next(i for i, e in enumerate(tp.edges) if e.sync and e.sync.channel == "ch2server")
    net = build_network(_without_edge(defs, "Client", k))
    v = check_no_deadlock(net)
    assert not v.holds
    end = replay(net, v.witness)
    assert enabled_edges(net, end) == []
    server = net.instance_index("server")
    assert net.instances[server].locations[end.locations[server]].name == "sphase2"


@pytest.mark.parametrize("n", [1, 2, 3])
def test_every_single_edge_deletion_flips_a_verdict(n):
    count = 0
    for tname, k, mutant in _all_deletions(conventional_defs(n)):
        net = build_network(mutant)
        verdicts = (check_no_deadlock(net).holds, check_eventually(net, TERMINATED).holds)
        assert verdicts != (True, True), f"deleting {tname} edge {k} goes unnoticed"
        count += 1
    assert count >= 5


def test_two_cycle_lasso():
    net = net_of("int x = 0; template T() { location a init; location b; "
                 "edge a -> b; edge b -> a; } instance t = T();")
    v = check_eventually(net, parse_expr("x == 1"))
    assert not v.holds and v.reason == "cycle"
    assert len(v.witness) == 2 and v.loop_start == 0
    assert replay(net, v.witness) == initial_state(net)


def test_goal_true_initially():
    net = net_of("template T() { location a init; location b; edge a -> b; edge b -> a; } instance t = T();")
    v = check_eventually(net, parse_expr("t.a"))
    assert v.holds and v.witness == ()


def test_budget():
    with pytest.raises(StateBudgetExceeded):
        explore(conventional_cfl(3), budget=5)


def test_timed_models_rejected():
    with pytest.raises(TimedModelError, match="timed model requires estimate/simulate"):
        check_no_deadlock(stochastic_cfl())


@pytest.mark.parametrize("seed", range(5))
def test_exploration_order_insensitive(seed):
    net = conventional_cfl(4)
    base = set(explore(net).states)
    shuffled = explore(net, rng=np.random.default_rng(seed))
    assert set(shuffled.states) == base


# --- brute-force oracle on small random networks ----------------------------------

def _random_model(r: random.Random) -> tuple[str, str]:
    lines = ["int x = 0;", "int y = 0;", "broadcast chan c;"]
    goals = []
    for t in range(2):
        nloc = r.randint(1, 3)
        locs = [f"q{i}" for i in range(nloc)]
        body = []
        for i, q in enumerate(locs):
            flags = (" init" if i == 0 else "") + (" accepting" if r.random() < 0.3 else "")
            body.append(f"location {q}{flags};")
        for _ in range(r.randint(0, 4)):
            parts = [f"edge {r.choice(locs)} -> {r.choice(locs)}"]
            g = r.choice([None, "x == 0", "x < 2", "y != 1", "x != y"])
            if g:
                parts.append(f"guard {g}")
            s = r.choice([None, None, "c!", "c?"])
            if s:
                parts.append(f"sync {s}")
            ups = r.sample(["x := %d" % r.randint(0, 2), "y := 1 - y"], r.randint(0, 2))
            if ups:
                parts.append("update " + ", ".join(ups))
            body.append(" ".join(parts) + ";")
        lines.append(f"template T{t}() {{ {' '.join(body)} }}")
        lines.append(f"instance i{t} = T{t}();")
        goals += [f"i{t}.{q}" for q in locs]
    goals += ["x == 2", "y == 1", "x == 1 and i0.q0"]
    return "\n".join(lines), r.choice(goals)


def _succ(net, st):
    return [fire(net, st, ch) for ch in enabled_edges(net, st)]


def _key(st):
    return st.locations, st.discrete


def _reachable(net):
    seen = {}
    stack = [initial_state(net)]
    while stack:
        st = stack.pop()
        if _key(st) in seen:
            continue
        seen[_key(st)] = st
        stack.extend(_succ(net, st))
    return seen


def _brute_eventually(net, goal):
    _, pred = bind_expr(net, goal, expect="bool")

    def visit(st, on_path):
        k = _key(st)
        if pred(st.locations, st.discrete, st.continuous):
            return True
        if k in on_path:
            return False
        nxt = _succ(net, st)
        return bool(nxt) and all(visit(s, on_path | {k}) for s in nxt)

    return visit(initial_state(net), frozenset())


def _brute_deadlock_free(net):
    for st in _reachable(net).values():
        if not _succ(net, st):
            if not all(inst.locations[l].accepting for inst, l in zip(net.instances, st.locations)):
                return False
    return True


def test_checker_agrees_with_brute_force():
    r = random.Random(20240601)
    tried = 0
    verdicts = set()
    while tried < 300:
        text, goal_text = _random_model(r)
        net = net_of(text)
        if len(_reachable(net)) > 12:
            continue
        tried += 1
        goal = parse_expr(goal_text)
        v = check_eventually(net, goal)
        assert v.holds == _brute_eventually(net, goal), (text, goal_text)
        dv = check_no_deadlock(net)
        assert dv.holds == _brute_deadlock_free(net), text
        assert set(explore(net).states) == set(_reachable(net))
        verdicts.add((v.holds, dv.holds))
        _, pred = bind_expr(net, goal, expect="bool")
        if not v.holds:
            _check_liveness_witness(net, v, pred)
        if not dv.holds:
            end = replay(net, dv.witness)
            assert _succ(net, end) == []
    # the generator must exercise both outcomes of both checks
    assert {h for h, _ in verdicts} == {True, False}
    assert {h for _, h in verdicts} == {True, False}


def _check_liveness_witness(net, v, pred):
    st = initial_state(net)
    seen = [st]
    for ch in v.witness:
        assert not pred(st.locations, st.discrete, st.continuous)
        st = fire(net, st, ch)
        seen.append(st)
    if v.reason == "stuck":
        assert not pred(st.locations, st.discrete, st.continuous)
        assert _succ(net, st) == []
    else:
        assert v.reason == "cycle"
        assert st == seen[v.loop_start]

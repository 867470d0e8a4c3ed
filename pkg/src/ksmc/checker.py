"""Explicit-state verification of untimed networks.

Only the discrete fragment is handled: no location may give a continuous
variable a nonzero rate and no edge may assign one. Within that fragment a
state is just the location vector plus the discrete valuation, and the
reachable graph is finite for any sensible model.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ksmc import defs as D
from ksmc.automata import (
    Choice,
    HybridState,
    Network,
    bind_expr,
    enabled_edges,
    fire,
    initial_state,
)
from ksmc.errors import InvariantViolation, StateBudgetExceeded, TimedModelError

DEFAULT_BUDGET = 1_000_000

DiscreteState = tuple[tuple[int, ...], tuple]


@dataclass
class Graph:
    """Reachable states in BFS order; ``succ[i]`` lists ``(choice, j)`` pairs."""

    states: list[DiscreteState]
    succ: list[list[tuple[Choice, int]]]
    parent: list[tuple[int, Choice] | None]
    index: dict[DiscreteState, int] = field(repr=False)

    @property
    def n_transitions(self) -> int:
        return sum(len(s) for s in self.succ)

    def path_to(self, i: int) -> list[Choice]:
        out = []
        while self.parent[i] is not None:
            i, ch = self.parent[i]
            out.append(ch)
        out.reverse()
        return out


@dataclass(frozen=True)
class Verdict:
    holds: bool
    witness: tuple[Choice, ...] = ()
    loop_start: int | None = None  # for lassos: witness[loop_start:] is the cycle
    reason: str = ""
    states: int = 0
    transitions: int = 0


def require_untimed(net: Network) -> None:
    for inst in net.instances:
        for loc in inst.locations:
            if loc.rate_fns:
                raise TimedModelError(
                    f"timed model requires estimate/simulate ({inst.name}.{loc.name} has continuous dynamics)")
        for e in inst.edges:
            if any(kind == "c" for kind, *_ in e.update_fns):
                raise TimedModelError(
                    f"timed model requires estimate/simulate ({inst.name} edge {e.label} assigns a continuous variable)")


def _key(st: HybridState) -> DiscreteState:
    return (st.locations, st.discrete)


def successors(net: Network, st: HybridState, rng: np.random.Generator | None = None) -> list[tuple[Choice, HybridState]]:
    choices = enabled_edges(net, st)
    if rng is not None:
        choices = [choices[k] for k in rng.permutation(len(choices))]
    out = []
    for ch in choices:
        try:
            out.append((ch, fire(net, st, ch, check=False)))
        except InvariantViolation:
            continue
    return out


def explore(net: Network, budget: int = DEFAULT_BUDGET, rng: np.random.Generator | None = None,
            stop=None) -> Graph:
    """Breadth-first reachability; states satisfying ``stop`` are not expanded."""
    require_untimed(net)
    init = initial_state(net)
    k0 = _key(init)
    g = Graph([k0], [[]], [None], {k0: 0})
    cont = init.continuous
    queue = deque([0])
    while queue:
        i = queue.popleft()
        locs, disc = g.states[i]
        st = HybridState(locs, disc, cont, 0.0)
        if stop is not None and stop(locs, disc, cont):
            continue
        for ch, nxt in successors(net, st, rng):
            key = _key(nxt)
            j = g.index.get(key)
            if j is None:
                if len(g.states) >= budget:
                    raise StateBudgetExceeded(budget)
                j = len(g.states)
                g.index[key] = j
                g.states.append(key)
                g.succ.append([])
                g.parent.append((i, ch))
                queue.append(j)
            g.succ[i].append((ch, j))
    return g


def _all_accepting(net: Network, locs: tuple[int, ...]) -> bool:
    return all(inst.locations[l].accepting for inst, l in zip(net.instances, locs))


def check_no_deadlock(net: Network, budget: int = DEFAULT_BUDGET) -> Verdict:
    """A[] not deadlock, with states where every instance is accepting exempt."""
    g = explore(net, budget)
    for i, (locs, _) in enumerate(g.states):
        if not g.succ[i] and not _all_accepting(net, locs):
            return Verdict(False, tuple(g.path_to(i)), reason="deadlock",
                           states=len(g.states), transitions=g.n_transitions)
    return Verdict(True, states=len(g.states), transitions=g.n_transitions)


def check_eventually(net: Network, goal: D.Expr, budget: int = DEFAULT_BUDGET) -> Verdict:
    """A<> goal: every maximal path reaches a goal state."""
    require_untimed(net)
    _, pred = bind_expr(net, goal, expect="bool")
    cont = net.continuous_init
    g = explore(net, budget, stop=pred)
    is_goal = [pred(l, d, cont) for l, d in g.states]
    stats = dict(states=len(g.states), transitions=g.n_transitions)
    if is_goal[0]:
        return Verdict(True, **stats)
    for i in range(len(g.states)):
        if not is_goal[i] and not g.succ[i]:
            return Verdict(False, tuple(g.path_to(i)), reason="stuck", **stats)
    lasso = _find_cycle(g, is_goal)
    if lasso is not None:
        witness, loop_start = lasso
        return Verdict(False, tuple(witness), loop_start, reason="cycle", **stats)
    return Verdict(True, **stats)


def _find_cycle(g: Graph, is_goal: list[bool]) -> tuple[list[Choice], int] | None:
    """Colored iterative DFS over non-goal states; returns a lasso if one exists."""
    WHITE, GREY, BLACK = 0, 1, 2
    color = [WHITE] * len(g.states)
    for root in range(len(g.states)):
        if is_goal[root] or color[root] != WHITE:
            continue
        # stack entries: (state, next successor position); edge_in[k] is the choice into stack[k]
        stack = [[root, 0]]
        edge_in: list[Choice | None] = [None]
        color[root] = GREY
        while stack:
            top = stack[-1]
            i, pos = top
            if pos >= len(g.succ[i]):
                color[i] = BLACK
                stack.pop()
                edge_in.pop()
                continue
            top[1] += 1
            ch, j = g.succ[i][pos]
            if is_goal[j]:
                continue
            if color[j] == GREY:
                k = next(k for k, (s, _) in enumerate(stack) if s == j)
                cycle = [c for c in edge_in[k + 1:]] + [ch]
                stem = g.path_to(j)
                return stem + cycle, len(stem)
            if color[j] == WHITE:
                color[j] = GREY
                stack.append([j, 0])
                edge_in.append(ch)
    return None


def replay(net: Network, witness) -> HybridState:
    """Fire ``witness`` from the initial state (each step must be enabled)."""
    st = initial_state(net)
    for ch in witness:
        st = fire(net, st, ch)
    return st

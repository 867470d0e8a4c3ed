"""Statistical model checking under race semantics.

One run repeats the following until the time bound passes or the goal holds:

1. Integrate the continuous state forward from the current discrete state and
   find ``D``, the first instant some invariant would be violated.
2. Every instance with an output edge (internal or emitting) computes the
   earliest offset ``lower`` at which one of its guards becomes true, and its
   own invariant bound ``D_i``. It draws a delay uniformly from
   ``[lower, D_i]``, or ``lower + Exp(rate)`` when ``D_i`` is unbounded.
3. The smallest delay not exceeding ``D`` wins (ties broken at random). Time
   advances by it and the winner fires one of its enabled steps, chosen
   uniformly, together with every enabled broadcast receiver.

If no instance can act before ``D`` the run is timelocked and ends.

Each run draws from its own generator derived from ``(seed, run_index)``, so
an estimate does not depend on how runs are spread over worker processes.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import betaincinv

from ksmc import defs as D
from ksmc.automata import (
    Choice,
    HybridState,
    Network,
    Trajectory,
    bind_expr,
    build_network,
    choices_for,
    cont_slots,
    event_label,
    fire,
    initial_state,
)
from ksmc.errors import DomainError, InvariantViolation, KsmcError

TIME_TOL = 1e-9
MAX_EVENTS = 1_000_000
MAX_SCAN_STEPS = 10_000_000


class SimulationError(KsmcError):
    """Internal failure while generating a run."""


@dataclass(frozen=True)
class RunConfig:
    bound: float
    step: float | None = None  # None: network default
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.bound > 0:
            raise DomainError(f"bound must be positive, got {self.bound}")
        if self.step is not None and not self.step > 0:
            raise DomainError(f"step must be positive, got {self.step}")
        if not 0 <= self.seed < 2 ** 64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def rng(self, run_index: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(run_index,)))


@dataclass(frozen=True)
class TraceSample:
    t: float
    values: tuple[float, ...]
    event: str = ""


@dataclass(frozen=True)
class Trace:
    names: tuple[str, ...]
    samples: tuple[TraceSample, ...]
    events: tuple[tuple[float, str], ...] = ()

    def column(self, name: str) -> np.ndarray:
        k = self.names.index(name)
        return np.array([s.values[k] for s in self.samples])

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.samples])


@dataclass(frozen=True)
class RunResult:
    hit_time: float | None
    end_time: float
    reason: str  # "goal", "bound", "timelock", "zeno"
    events: tuple[tuple[float, str], ...] = ()


@dataclass(frozen=True)
class CiEstimate:
    k: int
    n: int
    alpha: float
    lo: float
    hi: float
    reason: str  # "width" or "budget"
    seed: int = 0
    hits: tuple[float | None, ...] = field(default=(), repr=False)

    @property
    def width(self) -> float:
        return self.hi - self.lo


def sample_delay(lower: float, upper: float, rng: np.random.Generator, rate: float = 1.0) -> float:
    """Delay uniform on ``[lower, upper]``, or ``lower + Exp(rate)`` when ``upper`` is infinite."""
    if upper < lower:
        raise DomainError(f"empty delay window [{lower}, {upper}]")
    if math.isinf(upper):
        return lower + rng.exponential(1.0 / rate)
    if upper == lower:
        return lower
    return float(rng.uniform(lower, upper))


# --- trajectory scans ---------------------------------------------------------

def _negate(pred):
    return lambda L, d, c: not pred(L, d, c)


def _all_true(preds):
    if len(preds) == 1:
        return preds[0]
    if len(preds) == 2:
        a, b = preds
        return lambda L, d, c: a(L, d, c) and b(L, d, c)
    return lambda L, d, c: all(p(L, d, c) for p in preds)


def first_true(traj: Trajectory, pred, limit: float) -> float | None:
    """Earliest offset in ``[0, limit]`` where ``pred`` holds along ``traj``."""
    L, d = traj.L, traj.d
    if pred(L, d, traj.grid[0]):
        return 0.0
    step = traj.step
    n = min(int(limit // step), MAX_SCAN_STEPS)
    for k in range(1, n + 1):
        if pred(L, d, traj.grid_point(k)):
            return traj.refine(k - 1, _negate(pred))[2]
    if limit - n * step > 0 and pred(L, d, traj.at(limit)):
        return min(traj.refine(n, _negate(pred))[2], limit)
    return None


def first_violation(traj: Trajectory, preds, max_k: int, k0: int = 0):
    """Scan grid cells ``k0+1..max_k`` for the first failure of any of ``preds``.

    Returns ``(bound, cell)`` where ``bound`` is the last offset at which all
    hold, or ``None`` when they hold on every scanned grid point.
    """
    L, d = traj.L, traj.d
    ok = _all_true(preds)
    for k in range(k0 + 1, max_k + 1):
        if not ok(L, d, traj.grid_point(k)):
            lo, _, _, _ = traj.refine(k - 1, ok)
            return lo, k - 1
    return None


class _Run:
    """State for a single run: network, compiled goal and the run's RNG."""

    def __init__(self, net: Network, step: float, goal_fn=None, goal_slots=frozenset(), recorder=None):
        self.net = net
        self.step = step
        self.goal_fn = goal_fn
        self.goal_slots = goal_slots
        self.rec = recorder

    def _goal(self, st: HybridState) -> bool:
        return self.goal_fn is not None and bool(self.goal_fn(st.locations, st.discrete, st.continuous))

    def run(self, bound: float, rng: np.random.Generator) -> RunResult:
        net = self.net
        st = initial_state(net)
        events: list[tuple[float, str]] = []
        if self.rec:
            self.rec.point(st, "")
        if self._goal(st):
            return RunResult(0.0, 0.0, "goal", ())
        for _ in range(MAX_EVENTS):
            horizon = bound - st.time + TIME_TOL
            if horizon < 0:
                return RunResult(None, st.time, "bound", tuple(events))
            traj = Trajectory(net, st, self.step)
            winner, offset, reason, bound_here = self._race(traj, st, horizon, rng)
            limit = horizon if winner is None else min(offset, horizon)
            if self.goal_fn is not None and self.goal_slots & {s for s, _ in traj.rates}:
                hit = first_true(traj, self.goal_fn, limit)
                if hit is not None:
                    if self.rec:
                        self.rec.flow(st, traj, hit, final=True)
                    return RunResult(st.time + hit, st.time + hit, "goal", tuple(events))
            if winner is None or offset > horizon:
                span = bound_here if reason == "timelock" else max(bound - st.time, 0.0)
                if self.rec:
                    self.rec.flow(st, traj, span, final=True)
                return RunResult(None, st.time + span, reason or "bound", tuple(events))
            if self.rec:
                self.rec.flow(st, traj, offset, final=False)
            st = HybridState(st.locations, st.discrete, traj.at(offset), st.time + offset)
            nxt = self._fire(st, winner, rng)
            if nxt is None:
                continue
            choice, new = nxt
            label = event_label(net, choice, st)
            events.append((new.time, label))
            st = new
            if self.rec:
                self.rec.point(st, label)
            if self._goal(st):
                return RunResult(st.time, st.time, "goal", tuple(events))
        return RunResult(None, st.time, "zeno", tuple(events))

    def _race(self, traj: Trajectory, st: HybridState, horizon: float, rng):
        """Return ``(instance, offset, reason, D)``; instance is None when nobody can act."""
        net = self.net
        L, d, c0 = st.locations, st.discrete, st.continuous
        active = {s for s, _ in traj.rates}
        step = self.step
        max_k = int(horizon // step) + 1

        inv = {}  # instance -> (pred, time dependent)
        for i, inst in enumerate(net.instances):
            loc = inst.locations[L[i]]
            if loc.inv_exact is not None:
                if not loc.inv_exact(L, d, c0):
                    raise SimulationError(f"invariant of {inst.name}.{loc.name} fails at t={st.time}")
                if loc.inv_slots & active:
                    inv[i] = loc.inv_exact
        hit = first_violation(traj, list(inv.values()), max_k) if inv else None
        Dg = math.inf if hit is None else hit[0]
        scan_end_k = max_k if hit is None else hit[1]

        cands: list[tuple[float, int]] = []
        for i, inst in enumerate(net.instances):
            loc = inst.locations[L[i]]
            if not loc.outputs:
                continue
            lower = self._lower(traj, inst, loc, min(Dg, horizon), active)
            if lower is None or lower > Dg:
                continue
            Di = self._own_bound(traj, i, inv, Dg, scan_end_k)
            s = sample_delay(lower, max(Di, lower), rng, loc.exp_rate)
            if s <= Dg:
                cands.append((s, i))
        if not cands:
            return None, math.inf, ("timelock" if Dg <= horizon else "bound"), Dg
        best = min(s for s, _ in cands)
        tied = [i for s, i in cands if s == best]
        winner = tied[0] if len(tied) == 1 else tied[int(rng.integers(len(tied)))]
        return winner, best, "", Dg

    def _lower(self, traj: Trajectory, inst, loc, limit: float, active) -> float | None:
        L, d, c0 = traj.L, traj.d, traj.grid[0]
        best = None
        for k in loc.outputs:
            e = inst.edges[k]
            if e.guard_fn is None:
                return 0.0
            if e.guard_slots & active:
                t = first_true(traj, e.guard_fn, limit)
            else:
                t = 0.0 if e.guard_fn(L, d, c0) else None
            if t is not None and (best is None or t < best):
                best = t
                if t == 0.0:
                    break
        return best

    def _own_bound(self, traj: Trajectory, i: int, inv: dict, Dg: float, scan_end_k: int) -> float:
        pred = inv.get(i)
        if pred is None:
            return math.inf
        if math.isinf(Dg):
            k0 = scan_end_k
        else:
            # does this instance's own invariant fail right after the global bound?
            k = int(Dg // traj.step)
            probe = traj.at(min(Dg + 1e-12, (k + 1) * traj.step))
            if not pred(traj.L, traj.d, probe):
                return Dg
            k0 = k
        hit = first_violation(traj, [pred], k0 + MAX_SCAN_STEPS, k0)
        return math.inf if hit is None else hit[0]

    def _fire(self, st: HybridState, i: int, rng) -> tuple[Choice, HybridState] | None:
        choices = choices_for(self.net, st, i)
        while choices:
            k = 0 if len(choices) == 1 else int(rng.integers(len(choices)))
            ch = choices.pop(k)
            try:
                return ch, fire(self.net, st, ch, check=False)
            except InvariantViolation:
                continue
        return None


# --- run generation -----------------------------------------------------------

def _step_for(net: Network, config: RunConfig) -> float:
    return config.step if config.step is not None else net.default_step()


def _as_expr(goal) -> D.Expr:
    if isinstance(goal, str):
        from ksmc.dsl import parse_expr

        return parse_expr(goal)
    return goal


def simulate_run(net: Network, config: RunConfig, run_index: int = 0, goal=None) -> RunResult:
    """One run up to ``config.bound``; stops early when ``goal`` holds."""
    goal_fn, slots = None, frozenset()
    if goal is not None:
        rexpr, goal_fn = bind_expr(net, _as_expr(goal), expect="bool")
        slots = cont_slots(rexpr)
    runner = _Run(net, _step_for(net, config), goal_fn, slots)
    return runner.run(config.bound, config.rng(run_index))


class _Recorder:
    def __init__(self, net: Network, observables: Sequence[D.Expr], bound: float):
        self.fns = [bind_expr(net, _as_expr(o), expect="num")[1] for o in observables]
        self.bound = bound
        self.rows: list[TraceSample] = []

    def _values(self, L, d, c) -> tuple:
        return tuple(float(f(L, d, c)) for f in self.fns)

    def point(self, st: HybridState, event: str) -> None:
        values = self._values(st.locations, st.discrete, st.continuous)
        if self.rows and self.rows[-1].t == st.time:
            # several events at one instant collapse into one row
            joined = "+".join(x for x in (self.rows[-1].event, event) if x)
            self.rows[-1] = TraceSample(st.time, values, joined)
        else:
            self.rows.append(TraceSample(st.time, values, event))

    def flow(self, st: HybridState, traj: Trajectory, span: float, final: bool) -> None:
        L, d = st.locations, st.discrete
        step = traj.step
        k = 1
        while k * step < span:
            t = st.time + k * step
            if t > self.bound + TIME_TOL:
                return
            self.rows.append(TraceSample(t, self._values(L, d, traj.grid_point(k))))
            k += 1
        if final and span > 0:
            self.rows.append(TraceSample(st.time + span, self._values(L, d, traj.at(span))))


def trace(net: Network, bound: float, observables: Sequence, config: RunConfig | None = None,
          run_index: int = 0) -> Trace:
    """Samples of ``observables`` at every integration step and every event of one run."""
    if config is None:
        config = RunConfig(bound)
    elif config.bound != bound:
        config = RunConfig(bound, config.step, config.seed)
    exprs = [_as_expr(o) for o in observables]
    rec = _Recorder(net, exprs, bound)
    runner = _Run(net, _step_for(net, config), recorder=rec)
    res = runner.run(bound, config.rng(run_index))
    from ksmc.dsl import format_expr

    return Trace(tuple(format_expr(e) for e in exprs), tuple(rec.rows), res.events)


# --- Clopper-Pearson ----------------------------------------------------------

def clopper_pearson(k: int, n: int, alpha: float = 0.05) -> tuple[float, float]:
    """Exact two-sided binomial confidence interval."""
    if n < 1 or not 0 <= k <= n:
        raise DomainError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    a2 = alpha / 2
    # beta-quantile form; the k in {0, n} edges are closed form
    if k == 0:
        lo = 0.0
    elif k == n:
        lo = a2 ** (1.0 / n)
    else:
        lo = float(betaincinv(k, n - k + 1, a2))
    if k == n:
        hi = 1.0
    elif k == 0:
        hi = 1.0 - a2 ** (1.0 / n)
    else:
        hi = float(betaincinv(k + 1, n - k, 1.0 - a2))
    return lo, hi


# --- estimation ---------------------------------------------------------------

_worker: dict = {}


def _worker_init(defs: D.ModelDefs, goal: D.Expr, config: RunConfig) -> None:
    net = build_network(defs)
    rexpr, fn = bind_expr(net, goal, expect="bool")
    _worker["runner"] = _Run(net, _step_for(net, config), fn, cont_slots(rexpr))
    _worker["config"] = config


def _worker_run(run_index: int) -> float | None:
    cfg = _worker["config"]
    return _worker["runner"].run(cfg.bound, cfg.rng(run_index)).hit_time


def default_workers() -> int:
    raw = os.environ.get("KSMC_WORKERS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def estimate_probability(net: Network, goal, bound: float, alpha: float = 0.05, target_width: float = 0.05,
                         max_runs: int = 10_000, seed: int = 0, step: float | None = None,
                         workers: int | None = None) -> CiEstimate:
    """Estimate Pr[<= bound](<> goal), stopping once the interval is narrow enough.

    After each run (in run-index order) the Clopper-Pearson interval is
    recomputed; the estimate stops at the first ``n`` whose width is at most
    ``target_width``, or at ``max_runs`` with reason ``"budget"``.
    """
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    if not 0 < target_width <= 1:
        raise DomainError(f"target width must lie in (0, 1], got {target_width}")
    if max_runs < 1:
        raise DomainError(f"max_runs must be at least 1, got {max_runs}")
    config = RunConfig(bound, step, seed)
    goal = _as_expr(goal)
    rexpr, goal_fn = bind_expr(net, goal, expect="bool")
    workers = default_workers() if workers is None else max(1, workers)

    hits: list[float | None] = []
    k = 0

    def consume(h: float | None):
        nonlocal k
        hits.append(h)
        if h is not None:
            k += 1
        lo, hi = clopper_pearson(k, len(hits), alpha)
        if hi - lo <= target_width:
            return CiEstimate(k, len(hits), alpha, lo, hi, "width", seed, tuple(hits))
        if len(hits) >= max_runs:
            return CiEstimate(k, len(hits), alpha, lo, hi, "budget", seed, tuple(hits))
        return None

    if workers == 1:
        runner = _Run(net, _step_for(net, config), goal_fn, cont_slots(rexpr))
        for i in range(max_runs):
            done = consume(runner.run(bound, config.rng(i)).hit_time)
            if done is not None:
                return done
        raise AssertionError("unreachable")

    chunk = 4 * workers
    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                             initargs=(net.defs, goal, config)) as pool:
        start = 0
        while True:
            idx = range(start, min(start + chunk, max_runs))
            for h in pool.map(_worker_run, idx):
                done = consume(h)
                if done is not None:
                    return done
            start += chunk

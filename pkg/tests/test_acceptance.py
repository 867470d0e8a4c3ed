"""Acceptance suite: one PASS/FAIL line per criterion, printed uncaptured."""

import json
import math
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from scipy.special import betaincinv

from ksmc import defs as D
from ksmc.automata import build_network
from ksmc.cfl import bundled_path, bundled_text, stochastic_cfl
from ksmc.cli import main
from ksmc.dsl import parse_model, parse_query, parse_query_file, print_model
from ksmc.orbital import (
    TWO_PI,
    anomaly_at_time,
    anomaly_rate,
    areal_constant,
    make_orbit,
    propagate,
    radius,
)
from ksmc.smc import RunConfig, clopper_pearson, estimate_probability, trace
from test_dsl import BUNDLED_QUERIES, models
from test_smc import ALWAYS, RACE, brute_cp

CONVENTIONAL = str(bundled_path("cfl_conventional.ksm"))
STOCHASTIC = str(bundled_path("cfl_stochastic.ksm"))
LEO = make_orbit(10, 0.2, 1)


def report(capsys, number, title, checks):
    failed = [name for name, ok in checks if not ok]
    status = "FAIL" if failed else "PASS"
    with capsys.disabled():
        line = f"\nACCEPTANCE {number} {status}: {title}"
        if failed:
            line += " -- failed: " + "; ".join(failed)
        print(line)
    assert not failed, failed


def _timed_main(argv):
    t0 = time.perf_counter()
    code = main(argv)
    return code, time.perf_counter() - t0


# 1 -------------------------------------------------------------------------------

def test_criterion_1_conventional_check(capsys, tmp_path):
    checks = []
    for q in ("A[] not deadlock", "A<> (terminated == 1)"):
        code, took = _timed_main(["check", CONVENTIONAL, "-q", q])
        checks.append((f"{q!r} holds (exit {code})", code == 0))
        checks.append((f"{q!r} under 1 s ({took:.3f} s)", took < 1.0))
    defs = parse_model(bundled_text("cfl_conventional.ksm")).defs
    n_mutants = 0
    for t in defs.templates:
        for k in range(len(t.edges)):
            tps = tuple(D.Template(x.name, x.params, x.variables, x.locations, x.edges[:k] + x.edges[k + 1:])
                        if x.name == t.name else x for x in defs.templates)
            path = tmp_path / f"mut_{t.name}_{k}.ksm"
            path.write_text(print_model(D.ModelDefs(defs.orbits, defs.consts, defs.channels, defs.variables,
                                                    tps, defs.instances)))
            codes = [main(["check", str(path), "-q", q]) for q in ("A[] not deadlock", "A<> (terminated == 1)")]
            checks.append((f"deleting {t.name} edge {k} flips a verdict {codes}", 1 in codes))
            n_mutants += 1
    capsys.readouterr()
    checks.append((f"{n_mutants} mutants examined", n_mutants == 7))
    report(capsys, 1, "conventional model passes both checks in < 1 s; all 7 edge-deletion mutants caught", checks)


# 2 -------------------------------------------------------------------------------

def test_criterion_2_probability(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv("KSMC_WORKERS", raising=False)
    out = tmp_path / "est.json"
    code, took = _timed_main(["estimate", STOCHASTIC, "-q", "Pr[<=3](<> server.send)",
                              "--alpha", "0.05", "--width", "0.05", "--json", str(out)])
    printed = capsys.readouterr().out
    res = json.loads(out.read_text())["result"]
    lo, hi = res["interval"]
    target = 0.025 ** (1 / 72)
    checks = [
        (f"exit {code}", code == 0),
        (f"k={res['k']}, n={res['n']}", (res["k"], res["n"]) == (72, 72)),
        (f"interval [{lo}, {hi}]", round(lo, 6) == 0.950056 and hi == 1.0),
        (f"lower bound vs 0.025^(1/72) = {target}", abs(lo - target) < 5e-7),
        (f"printed {printed.strip()!r}",
         printed.strip() == "(72/72 runs) Pr(<> server.send) in [0.950056, 1] (95% CI)"),
        (f"under 30 s ({took:.2f} s)", took < 30.0),
    ]
    report(capsys, 2, f"Pr[<=3](<> server.send): (72/72 runs) in [0.950056, 1], {took:.1f} s", checks)


# 3 -------------------------------------------------------------------------------

def _entry(tr, net, column, inst, loc):
    idx = net.instances[net.instance_index(inst)].location_index(loc)
    col = tr.column(column)
    hits = np.nonzero(col == idx)[0]
    return tr.times[hits[0]] if len(hits) else math.nan


def _period_error(tr, name):
    t = tr.times
    v = np.unwrap(tr.column(name))
    err, matched = 0.0, 0
    for i in np.nonzero(t <= 1.0)[0]:
        j = np.searchsorted(t, t[i] + 1.0 - 1e-9)
        if j < len(t) and abs(t[j] - (t[i] + 1.0)) < 1e-9:
            err = max(err, abs(v[j] - v[i] - TWO_PI))
            matched += 1
    return err, matched


def test_criterion_3_trace_landmarks(capsys):
    net = stochastic_cfl()
    sim = [q for _, _, q in parse_query_file(bundled_text("cfl.ksq")) if isinstance(q, D.Simulate)][0]
    assert sim.bound == 2
    tr = trace(net, sim.bound, sim.observables, RunConfig(sim.bound))
    want = [
        ("client0.loc", "client0", "cphase2_t", 0.5),
        ("client0.loc", "client0", "cend", 1.5),
        ("client1.loc", "client1", "cphase2_t", 1.0),
        ("client1.loc", "client1", "cend", 2.0),
        ("server.loc", "server", "sphase2", 1.0),
        ("server.loc", "server", "send", 2.0),
    ]
    checks = []
    for col, inst, loc, t in want:
        got = _entry(tr, net, col, inst, loc)
        checks.append((f"{inst} enters {loc} at {got} (want {t})", abs(got - t) <= 1e-6))
    first = tr.samples[0]
    checks.append((f"nus(0) = {first.values[:2]}", first.values[0] == math.pi and first.values[1] == 0.0))
    for name in ("nus[0]", "nus[1]"):
        err, matched = _period_error(tr, name)
        checks.append((f"{name} period 1 (max error {err:.2e} over {matched} pairs)", err <= 1e-6 and matched > 1000))
    report(capsys, 3, "trace landmarks at 0.5/1.0/1.5/2.0 within 1e-6; nus start at (pi, 0); period 1", checks)


# 4 -------------------------------------------------------------------------------

def test_criterion_4_orbital_numerics(capsys):
    o = LEO
    checks = []
    for v0 in (0.0, math.pi):
        # one pass over [0, 2T], comparing at every grid point
        err, v, step = 0.0, v0, 1e-4
        for k in range(1, 20001):
            v = propagate(o, v, step, step)
            err = max(err, abs(v - anomaly_at_time(o, v0, k * step)))
        checks.append((f"v0={v0:.4f}: max |RK4 - Kepler| over [0, 2T] = {err:.2e}", err <= 1e-6))
    C = areal_constant(o)
    worst = max(abs(radius(o, v) ** 2 * anomaly_rate(o, v) - C) / C for v in np.linspace(0, TWO_PI, 1001))
    checks.append((f"r^2 v' = C, worst relative error {worst:.2e}", worst <= 1e-9))

    def err_at(step):
        return abs(propagate(o, 0.7, 1.0, step) - anomaly_at_time(o, 0.7, 1.0))

    ratios = [err_at(h) / err_at(h / 2) for h in (0.02, 0.01, 0.005)]
    checks.append((f"step-halving error ratios {[round(r, 2) for r in ratios]}", min(ratios) >= 8))
    report(capsys, 4, "RK4 within 1e-6 of Kepler oracle over 2T; areal identity to 1e-9; fourth-order convergence",
           checks)


# 5 -------------------------------------------------------------------------------

def test_criterion_5_estimator_statistics(capsys):
    checks = []
    worst = 0.0
    for alpha in (0.05, 0.01):
        a2 = alpha / 2
        for n in range(1, 201):
            lo_n, hi_n = clopper_pearson(n, n, alpha)
            lo_0, hi_0 = clopper_pearson(0, n, alpha)
            b_lo, _ = brute_cp(n, n, alpha)
            _, b_hi = brute_cp(0, n, alpha)
            worst = max(worst, abs(lo_n - a2 ** (1 / n)), abs(hi_0 - (1 - a2 ** (1 / n))),
                        abs(b_lo - a2 ** (1 / n)), abs(b_hi - (1 - a2 ** (1 / n))),
                        abs(float(betaincinv(n, 1, a2)) - a2 ** (1 / n)))
            checks.append((f"n={n} edges exact", (lo_0, hi_n) == (0.0, 1.0)))
    checks.append((f"k in {{0, n}}, n <= 200: worst deviation from closed form {worst:.1e}", worst <= 1e-9))

    net = build_network(parse_model(RACE).defs)
    covered = 0
    for seed in range(500):
        est = estimate_probability(net, "won == 1", 10.0, 0.05, 0.1, seed=seed, workers=1)
        covered += est.lo <= 0.7 <= est.hi
    checks.append((f"Bernoulli(0.7) covered in {covered}/500", covered >= 0.93 * 500))

    est = estimate_probability(build_network(parse_model(ALWAYS).defs), "x == 1", 1.0, 0.05, 0.05)
    w71 = np.subtract(*clopper_pearson(71, 71)[::-1])
    w72 = np.subtract(*clopper_pearson(72, 72)[::-1])
    checks.append((f"all-success stream stops at n={est.n}", (est.k, est.n, est.reason) == (72, 72, "width")))
    checks.append((f"widths: n=71 {w71:.7f} > 0.05 >= n=72 {w72:.7f}", w71 > 0.05 >= w72))
    report(capsys, 5, f"CP edges exact; coverage {covered / 5:.1f}% >= 93%; stops at n=72", checks)


# 6 -------------------------------------------------------------------------------

def test_criterion_6_parser(capsys):
    checks = []
    for name in ("cfl_stochastic.ksm", "cfl_conventional.ksm"):
        defs = parse_model(bundled_text(name)).defs
        text = print_model(defs)
        again = parse_model(text).defs
        checks.append((f"{name} round-trips", again == defs and print_model(again) == text))

    seen = []

    @settings(max_examples=100, deadline=None, database=None, suppress_health_check=list(HealthCheck))
    @given(models())
    def fuzz(defs):
        seen.append(parse_model(print_model(defs)).defs == defs)

    fuzz()
    checks.append((f"fuzzed ASTs: {sum(seen)}/{len(seen)} round-trip", len(seen) >= 100 and all(seen)))
    for text, expected in BUNDLED_QUERIES:
        checks.append((f"{text!r} parses to {type(expected).__name__}", parse_query(text) == expected))
    for text in ("Pr[≤ 3](◊ server.send)", "A <> (terminated == 1)"):
        checks.append((f"{text!r} glyph/spacing form", parse_query(text) in [q for _, q in BUNDLED_QUERIES]))
    report(capsys, 6, f"parse/print round trip on bundled models and {len(seen)} fuzzed ASTs; bundled queries parse",
           checks)


# 7 -------------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [1])
def test_criterion_7_determinism(capsys, tmp_path, seed):
    docs = {}
    for workers in (1, 8):
        out = tmp_path / f"w{workers}.json"
        code = main(["estimate", STOCHASTIC, "-q", "Pr[<=3](<> server.send)", "--seed", str(seed),
                     "--workers", str(workers), "--json", str(out)])
        assert code == 0
        docs[workers] = json.loads(out.read_text())
    capsys.readouterr()
    ex = {w: d.pop("execution") for w, d in docs.items()}
    checks = [
        ("workers echoed", (ex[1]["workers"], ex[8]["workers"]) == (1, 8)),
        ("documents identical apart from the execution block", docs[1] == docs[8]),
        ("hit times identical", docs[1]["result"]["hit_times"] == docs[8]["result"]["hit_times"]),
    ]
    report(capsys, 7, f"--seed {seed}: identical result documents at 1 and 8 workers", checks)

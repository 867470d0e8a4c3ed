"""Command-line interface: ``ksmc check|estimate|simulate|fmt``.

Exit codes: 0 success (property holds), 1 property fails or the interval
excludes ``--expect``, 2 usage, parse or validation error, 3 state budget
exceeded.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
import time
import xml.etree.ElementTree as ET
from pathlib import Path

from ksmc import __version__
from ksmc import defs as D
from ksmc.automata import DynSlot, LocIndex, Network, Slot, bind_expr, build_network, describe_choice, fire, initial_state
from ksmc.checker import DEFAULT_BUDGET, check_eventually, check_no_deadlock
from ksmc.dsl import format_query, parse_model, parse_query
from ksmc.errors import KsmcError, ParseError, StateBudgetExceeded
from ksmc.smc import RunConfig, Trace, default_workers, estimate_probability, trace

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_BUDGET = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _load(path: str) -> tuple[Network, dict]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"model file not found: {path}")
    raw = p.read_bytes()
    src = parse_model(raw.decode("utf-8"), str(p))
    return build_network(src.defs), {"path": str(p), "sha256": hashlib.sha256(raw).hexdigest()}


def _query(text: str) -> D.Query:
    try:
        return parse_query(text)
    except ParseError as exc:
        raise UsageError(f"query {text!r}: {exc}") from None


def _document(command: str, model: dict, query: D.Query, config: dict, result: dict,
              workers: int, started: float) -> dict:
    return {
        "tool": "ksmc",
        "version": __version__,
        "command": command,
        "model": model,
        "query": format_query(query),
        "config": config,
        "result": result,
        "execution": {"workers": workers, "duration_s": round(time.perf_counter() - started, 6)},
    }


def _emit(doc: dict, dest: str | None) -> None:
    if dest is None:
        return
    text = json.dumps(doc, indent=2, sort_keys=False) + "\n"
    if dest == "-":
        sys.stdout.write(text)
    else:
        Path(dest).write_text(text, encoding="utf-8")


def fmt_prob(x: float) -> str:
    """Probability in the style ``0.950056``; exact 0 and 1 print bare."""
    if x == 0.0 or x == 1.0:
        return str(int(x))
    return f"{x:.6f}"


def estimate_line(k: int, n: int, goal: str, lo: float, hi: float, alpha: float) -> str:
    return f"({k}/{n} runs) Pr(<> {goal}) in [{fmt_prob(lo)}, {fmt_prob(hi)}] ({(1 - alpha) * 100:g}% CI)"


# --- commands -----------------------------------------------------------------

def cmd_check(args) -> int:
    started = time.perf_counter()
    net, model = _load(args.model)
    query = _query(args.query)
    if isinstance(query, D.NoDeadlock):
        verdict = check_no_deadlock(net, args.budget)
    elif isinstance(query, D.Eventually):
        verdict = check_eventually(net, query.goal, args.budget)
    else:
        raise UsageError("check handles 'A[] not deadlock' and 'A<> expr'; use estimate or simulate")
    steps = []
    st = initial_state(net)
    for ch in verdict.witness:
        steps.append(describe_choice(net, ch, st))
        st = fire(net, st, ch, check=False)
    result = {"holds": verdict.holds, "states": verdict.states, "transitions": verdict.transitions}
    if not verdict.holds:
        result["violation"] = verdict.reason
        result["witness"] = steps
        if verdict.loop_start is not None:
            result["loop_start"] = verdict.loop_start
    doc = _document("check", model, query, {"budget": args.budget}, result, 1, started)
    if args.json != "-":
        status = "holds" if verdict.holds else f"fails ({verdict.reason})"
        print(f"{format_query(query)}: {status} [{verdict.states} states, {verdict.transitions} transitions]")
        for i, s in enumerate(steps):
            mark = "  loop> " if verdict.loop_start is not None and i >= verdict.loop_start else "  "
            print(f"{mark}{s}")
    _emit(doc, args.json)
    return EXIT_OK if verdict.holds else EXIT_FAIL


def cmd_estimate(args) -> int:
    started = time.perf_counter()
    net, model = _load(args.model)
    query = _query(args.query)
    if not isinstance(query, D.ProbReach):
        raise UsageError("estimate needs a 'Pr[<=bound](<> expr)' query")
    workers = args.workers if args.workers is not None else default_workers()
    est = estimate_probability(net, query.goal, query.bound, alpha=args.alpha, target_width=args.width,
                               max_runs=args.max_runs, seed=args.seed, step=args.step, workers=workers)
    from ksmc.dsl import format_expr

    goal = format_expr(query.goal)
    line = estimate_line(est.k, est.n, goal, est.lo, est.hi, est.alpha)
    result = {
        "k": est.k, "n": est.n, "alpha": est.alpha, "interval": [est.lo, est.hi],
        "stopping_reason": est.reason, "hit_times": list(est.hits), "summary": line,
    }
    config = {"seed": args.seed, "alpha": args.alpha, "width": args.width, "max_runs": args.max_runs,
              "step": args.step if args.step is not None else net.default_step(), "bound": query.bound}
    code = EXIT_OK
    if args.expect is not None:
        config["expect"] = args.expect
        result["expect_in_interval"] = est.lo <= args.expect <= est.hi
        if not result["expect_in_interval"]:
            code = EXIT_FAIL
    if args.json != "-":
        print(line)
        if est.reason == "budget":
            print(f"stopped after {est.n} runs (budget); interval width {est.width:.6f} > {args.width}")
    _emit(_document("estimate", model, query, config, result, workers, started), args.json)
    return code


def _fmt_cell(x: float) -> str:
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    s = f"{x:.12f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def write_csv(tr: Trace, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", *tr.names, "event"])
    for s in tr.samples:
        w.writerow([_fmt_cell(s.t), *(_fmt_cell(v) for v in s.values), s.event])


def _is_staircase(net: Network, e: D.Expr) -> bool:
    r, _ = bind_expr(net, e, expect="num")
    return isinstance(r, LocIndex) or (isinstance(r, (Slot, DynSlot)) and r.kind == "d")


def write_svg(tr: Trace, staircase: list[bool], path: str, bound: float, width: int = 900) -> None:
    """Anomaly-style curves on top, one lane per staircase series below."""
    n_stair = sum(staircase)
    n_analog = len(staircase) - n_stair
    margin, lane, plot_h = 60, 60, 240 if n_analog else 0
    height = margin * 2 + plot_h + lane * n_stair + (20 if n_analog and n_stair else 0)
    x_of = lambda t: margin + (width - 2 * margin) * (t / bound)  # noqa: E731
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height),
                     viewBox=f"0 0 {width} {height}")
    style = ET.SubElement(svg, "style")
    style.text = (".analog{fill:none;stroke-width:1.5} .staircase{fill:none;stroke-width:2}"
                  " text{font:12px sans-serif} .axis{stroke:#444}")
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    times = [s.t for s in tr.samples]
    events = {i for i, s in enumerate(tr.samples) if s.event}
    stride = max(1, len(times) // 2000)
    keep = [i for i in range(len(times)) if i % stride == 0 or i in events or i == len(times) - 1]

    ET.SubElement(svg, "line", {"class": "axis", "x1": str(margin), "x2": str(width - margin),
                                "y1": str(height - margin), "y2": str(height - margin)})
    for k in range(int(math.floor(bound)) + 1):
        lab = ET.SubElement(svg, "text", x=f"{x_of(k):.1f}", y=str(height - margin + 16))
        lab.text = f"t={k}"
    ai = si = 0
    for j, name in enumerate(tr.names):
        col = [s.values[j] for s in tr.samples]
        color = colors[j % len(colors)]
        if not staircase[j]:
            lo, hi = min(col), max(col)
            span = (hi - lo) or 1.0
            y_of = lambda v: margin + plot_h * (1 - (v - lo) / span)  # noqa: E731
            pts = " ".join(f"{x_of(times[i]):.2f},{y_of(col[i]):.2f}" for i in keep)
            ET.SubElement(svg, "polyline", {"class": "analog", "data-series": name, "stroke": color, "points": pts})
            lab = ET.SubElement(svg, "text", x=str(width - margin + 4), y=f"{margin + 14 * ai + 10}", fill=color)
            lab.text = name
            ai += 1
        else:
            top = margin + plot_h + (20 if n_analog else 0) + lane * si
            lo, hi = min(col), max(col)
            span = (hi - lo) or 1.0
            y_of = lambda v: top + (lane - 10) * (1 - (v - lo) / span)  # noqa: E731
            pts = []
            prev = None
            for i, (t, v) in enumerate(zip(times, col)):
                if prev is None or v != prev or i == len(times) - 1:
                    if prev is not None:
                        pts.append(f"{x_of(t):.2f},{y_of(prev):.2f}")
                    pts.append(f"{x_of(t):.2f},{y_of(v):.2f}")
                    prev = v
            ET.SubElement(svg, "polyline", {"class": "staircase", "data-series": name, "stroke": color,
                                            "points": " ".join(pts)})
            lab = ET.SubElement(svg, "text", x="4", y=f"{top + lane / 2:.1f}", fill=color)
            lab.text = name
            si += 1
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)


def cmd_simulate(args) -> int:
    net, _ = _load(args.model)
    query = _query(args.query)
    if not isinstance(query, D.Simulate):
        raise UsageError("simulate needs a 'simulate [<=bound] {expr, ...}' query")
    config = RunConfig(query.bound, args.step, args.seed)
    tr = trace(net, query.bound, query.observables, config, args.run_index)
    if args.out in (None, "-"):
        write_csv(tr, sys.stdout)
    else:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            write_csv(tr, fh)
    if args.svg:
        write_svg(tr, [_is_staircase(net, e) for e in query.observables], args.svg, query.bound)
    return EXIT_OK


def cmd_fmt(args) -> int:
    from ksmc.dsl import print_model

    p = Path(args.model)
    if not p.is_file():
        raise UsageError(f"model file not found: {args.model}")
    src = parse_model(p.read_text(encoding="utf-8"), str(p))
    build_network(src.defs)
    sys.stdout.write(print_model(src.defs))
    return EXIT_OK


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ksmc", description="Model checking for networks of hybrid automata.")
    ap.add_argument("--version", action="version", version=f"ksmc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("model", help="model file (.ksm)")
        p.add_argument("-q", "--query", required=True, help="query text")

    p = sub.add_parser("check", help="exhaustive check of an untimed model")
    common(p)
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="maximum number of states")
    p.add_argument("--json", metavar="PATH", help="write the result document ('-' for stdout)")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("estimate", help="estimate Pr[<=b](<> goal) by simulation")
    common(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--width", type=float, default=0.05, help="target confidence interval width")
    p.add_argument("--max-runs", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: $KSMC_WORKERS or 1)")
    p.add_argument("--step", type=float, default=None, help="integration step")
    p.add_argument("--expect", type=float, default=None, help="exit 1 if this probability lies outside the interval")
    p.add_argument("--json", metavar="PATH", help="write the result document ('-' for stdout)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="trace one run as CSV (and optionally SVG)")
    common(p)
    p.add_argument("--out", metavar="CSV", help="CSV destination (default stdout)")
    p.add_argument("--svg", metavar="PATH", help="also render an SVG chart")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run-index", type=int, default=0)
    p.add_argument("--step", type=float, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fmt", help="print a model in canonical form")
    p.add_argument("model")
    p.set_defaults(func=cmd_fmt)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except StateBudgetExceeded as exc:
        print(f"ksmc: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (UsageError, KsmcError, OSError, UnicodeDecodeError) as exc:
        where = f"{args.model}: " if getattr(args, "model", None) and not isinstance(exc, UsageError) else ""
        print(f"ksmc: {where}{exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

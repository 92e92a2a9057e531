"""Command-line front end: scenario files, runs, logs, suite tables and plots.

Scenario files are YAML documents carrying ``schema_version: 1``; see
``docs/formats.md`` for the layout of scenario files, trajectory CSVs and
run summaries.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace

import numpy as np
import yaml

from . import __version__
from .errors import PolyConeError, ScenarioError
from .geometry import PolygonObstacle
from .sim import (
    COLLIDED,
    FILTER_FAILURE,
    REACHED,
    TIMEOUT,
    Scenario,
    TrajectoryLog,
    builtin_scenarios,
    random_cluttered_scenario,
    run,
)

SCHEMA_VERSION = 1
LOG_FORMAT = "polycone-log"
LOG_VERSION = 1
SUMMARY_FORMAT = "polycone-summary/1"
SUITE_COLUMNS = ("scenario", "model", "filter", "status", "final_time", "min_clearance", "min_h",
                 "mean_intervention", "fallback_steps", "latency_mean_us", "latency_p99_us", "reason")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CODES = {REACHED: 0, COLLIDED: 2, FILTER_FAILURE: 3, TIMEOUT: 4}

_FILTERS = ("polyc2bf", "c3bf", "none")
_MODELS = ("unicycle", "pointmass", "quadrotor")

# key -> kind; kinds drive validation in _check_value
_SCENARIO_KEYS = {
    "schema_version": "int",
    "name": "str",
    "model": "str",
    "initial_state": "vector",
    "goal": "vector",
    "obstacles": "list",
    "width": "number",
    "gamma": "number",
    "dt": "number",
    "horizon": "number",
    "filter": "str",
    "model_params": "mapping",
    "gains": "mapping",
    "input_lower": "vector?",
    "input_upper": "vector?",
    "goal_tolerance": "number",
    "cull_radius": "number",
    "seed": "int",
    "description": "str",
}
_REQUIRED = ("schema_version", "name", "model", "initial_state", "goal")
_OBSTACLE_KEYS = {
    "name": "str",
    "vertices": "points",
    "velocity": "vector",
    "center": "vector",
    "height": "number?",
}


# --- scenario files -----------------------------------------------------------------

def _line(node):
    return node.start_mark.line + 1


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_value(key, kind, value, node):
    optional = kind.endswith("?")
    kind = kind.rstrip("?")
    if optional and value is None:
        return
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "number": _is_number,
        "vector": lambda v: isinstance(v, list) and all(_is_number(a) for a in v),
        "points": lambda v: isinstance(v, list) and all(
            isinstance(p, list) and len(p) == 2 and all(_is_number(a) for a in p) for p in v),
        "list": lambda v: isinstance(v, list),
        "mapping": lambda v: isinstance(v, dict),
    }[kind](value)
    if not ok:
        raise ScenarioError(f"{key!r} must be a {kind}", _line(node))


def _check_mapping(node, value, allowed, where):
    if not isinstance(node, yaml.MappingNode) or not isinstance(value, dict):
        raise ScenarioError(f"{where} must be a mapping", _line(node))
    lines = {}
    for knode, vnode in node.value:
        key = knode.value
        if key in lines:
            raise ScenarioError(f"duplicate key {key!r} in {where}", _line(knode))
        if key not in allowed:
            raise ScenarioError(f"unknown key {key!r} in {where}", _line(knode))
        lines[key] = (knode, vnode)
        _check_value(key, allowed[key], value[key], vnode)
    return lines


def _obstacle_from_dict(d):
    verts = d["vertices"]
    kw = {"name": d.get("name", "")}
    if "velocity" in d:
        kw["velocity"] = d["velocity"]
    if "center" in d:
        kw["center"] = d["center"]
    if d.get("height") is not None:
        kw["height"] = float(d["height"])
    return PolygonObstacle.from_vertices(verts, **kw)


def parse_scenario(text, source="<string>"):
    """Parse and validate scenario YAML; errors carry the offending line."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else None
        raise ScenarioError(f"{source}: {exc.problem or exc}", line) from None
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    if node is None:
        raise ScenarioError(f"{source}: empty scenario file", 1)
    lines = _check_mapping(node, data, _SCENARIO_KEYS, "scenario")
    for key in _REQUIRED:
        if key not in data:
            raise ScenarioError(f"missing required key {key!r}", _line(node))
    if data["schema_version"] != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {data['schema_version']} (expected {SCHEMA_VERSION})",
                            _line(lines["schema_version"][1]))
    if data["model"] not in _MODELS:
        raise ScenarioError(f"model must be one of {', '.join(_MODELS)}", _line(lines["model"][1]))
    if data.get("filter", "polyc2bf") not in _FILTERS:
        raise ScenarioError(f"filter must be one of {', '.join(_FILTERS)}", _line(lines["filter"][1]))

    obstacles = []
    if "obstacles" in data:
        seq = lines["obstacles"][1]
        for i, (onode, od) in enumerate(zip(seq.value, data["obstacles"])):
            olines = _check_mapping(onode, od, _OBSTACLE_KEYS, f"obstacle {i}")
            if "vertices" not in od:
                raise ScenarioError(f"obstacle {i} needs 'vertices'", _line(onode))
            try:
                obstacles.append(_obstacle_from_dict(od))
            except (PolyConeError, ValueError) as exc:
                where = olines.get("vertices", (onode, onode))[1]
                raise ScenarioError(f"obstacle {i}: {exc}", _line(where)) from None

    kw = {k: v for k, v in data.items() if k not in ("schema_version", "obstacles")}
    for key in ("model_params", "gains"):
        if key in kw:
            kw[key] = dict(kw[key])
    try:
        return Scenario(obstacles=obstacles, **kw)
    except (TypeError, ValueError) as exc:
        # best effort: point at the first key named in the message
        line = _line(node)
        msg = str(exc)
        hints = {"state": "initial_state", "goal": "goal", "dt and horizon": "dt"}
        named = [k for k in lines if k in msg or k.replace("_", " ") in msg]
        named += [k for h, k in hints.items() if h in msg and k in lines]
        if named:
            line = _line(lines[named[0]][0])
        raise ScenarioError(f"{source}: {exc}", line) from None


def load_scenario(path):
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read(), source=str(path))


def _num(a):
    return [float(v) for v in np.asarray(a, dtype=float).ravel()]


def scenario_to_dict(s):
    """Plain-data form of a :class:`Scenario` (exact floats; loads back identically)."""
    d = {"schema_version": SCHEMA_VERSION}
    for f in fields(Scenario):
        v = getattr(s, f.name)
        if f.name == "obstacles":
            d["obstacles"] = [_obstacle_to_dict(o) for o in v]
        elif f.name == "c3bf_radius":
            continue
        elif isinstance(v, np.ndarray):
            d[f.name] = _num(v)
        elif isinstance(v, dict):
            d[f.name] = {k: (_num(x) if isinstance(x, (np.ndarray, tuple, list)) else x) for k, x in v.items()}
        else:
            d[f.name] = v
    return d


def _obstacle_to_dict(o):
    d = {"name": o.name, "vertices": [_num(p) for p in o.vertices], "center": _num(o.center),
         "velocity": _num(o.center_velocity)}
    if o.height is not None:
        d["height"] = float(o.height)
    return d


def dump_scenario(s):
    return yaml.safe_dump(scenario_to_dict(s), sort_keys=False, default_flow_style=None)


# --- trajectory logs ----------------------------------------------------------------

def log_columns(nx, nu, n_obs):
    """Fixed column order of trajectory CSVs, format version 1."""
    cols = ["step", "t"]
    cols += [f"x{i}" for i in range(nx)]
    cols += [f"ref{i}" for i in range(nu)]
    cols += [f"u{i}" for i in range(nu)]
    cols += [f"h{i}" for i in range(n_obs)]
    cols += [f"psi{i}" for i in range(n_obs)]
    cols += ["clearance"]
    for i in range(n_obs):
        cols += [f"cx{i}", f"cy{i}"]
    cols += ["latency_ns", "fallback"]
    return cols


def _fmt(v):
    return repr(float(v))


def format_log(log, scenario=None):
    """CSV text of ``log``; ``scenario`` (if given) is embedded for plotting."""
    buf = io.StringIO()
    buf.write(f"# {LOG_FORMAT} {LOG_VERSION}\n")
    for key in ("scenario", "model", "filter"):
        buf.write(f"# {key}: {getattr(log, key)}\n")
    buf.write(f"# dt: {_fmt(log.dt)}\n")
    buf.write(f"# status: {log.status}\n")
    buf.write(f"# reason: {log.reason}\n")
    if scenario is not None:
        buf.write(f"# scenario_json: {json.dumps(scenario_to_dict(scenario))}\n")
    nx, nu, n_obs = log.states.shape[1], log.u.shape[1], log.h.shape[1]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(log_columns(nx, nu, n_obs))
    for k in range(log.n_steps):
        row = [str(k), _fmt(log.t[k])]
        row += [_fmt(v) for v in log.states[k]]
        row += [_fmt(v) for v in log.reference[k]]
        row += [_fmt(v) for v in log.u[k]]
        row += [_fmt(v) for v in log.h[k]]
        row += [_fmt(v) for v in log.psi[k]]
        row += [_fmt(log.clearance[k])]
        row += [_fmt(v) for v in log.obstacle_centers[k]]
        row += [str(int(log.latency_ns[k])), "1" if log.fallback[k] else "0"]
        w.writerow(row)
    return buf.getvalue()


def parse_log(text):
    """Inverse of :func:`format_log`. Returns ``(log, scenario_dict_or_None)``."""
    meta = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        body = lines[i][1:].strip()
        if i == 0:
            parts = body.split()
            if len(parts) != 2 or parts[0] != LOG_FORMAT:
                raise ValueError("not a polycone trajectory log")
            if int(parts[1]) != LOG_VERSION:
                raise ValueError(f"unsupported log version {parts[1]}")
        else:
            key, _, value = body.partition(":")
            meta[key.strip()] = value.strip()
        i += 1
    if i == 0:
        raise ValueError("not a polycone trajectory log")
    if i >= len(lines):
        raise ValueError("log has no column header")
    reader = csv.reader(lines[i:])
    header = next(reader)
    rows = [r for r in reader if r]
    if not rows:
        raise ValueError("log has no rows")
    nx = sum(1 for c in header if c.startswith("x"))
    nu = sum(1 for c in header if c.startswith("u"))
    n_obs = sum(1 for c in header if c.startswith("h"))
    if header != log_columns(nx, nu, n_obs):
        raise ValueError("unexpected column layout")
    data = np.array([[float(v) for v in r[1:-2]] for r in rows]).reshape(len(rows), -1)
    o = 0

    def take(n):
        nonlocal o
        block = data[:, o:o + n]
        o += n
        return block

    t = take(1)[:, 0]
    states, ref, u = take(nx), take(nu), take(nu)
    h, psi = take(n_obs), take(n_obs)
    clearance = take(1)[:, 0]
    centers = take(2 * n_obs)
    log = TrajectoryLog(
        scenario=meta.get("scenario", ""), model=meta.get("model", ""), filter=meta.get("filter", ""),
        dt=float(meta.get("dt", "nan")), t=t, states=states, reference=ref, u=u, h=h, psi=psi,
        clearance=clearance, obstacle_centers=centers,
        latency_ns=np.array([int(r[-2]) for r in rows], dtype=np.int64),
        fallback=np.array([r[-1] == "1" for r in rows], dtype=bool),
        status=meta.get("status", TIMEOUT), reason=meta.get("reason", ""),
    )
    scen = json.loads(meta["scenario_json"]) if "scenario_json" in meta else None
    return log, scen


def _json_safe(d):
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


def summary_document(log):
    doc = {"format": SUMMARY_FORMAT, "version": __version__}
    doc.update(_json_safe(log.summary()))
    return doc


def _atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_outputs(log, scenario, out_dir, stem=None):
    """Write ``<stem>.csv`` and ``<stem>.summary.json``; return their paths."""
    stem = stem or f"{scenario.name}-{log.filter}"
    csv_path = os.path.join(out_dir, stem + ".csv")
    json_path = os.path.join(out_dir, stem + ".summary.json")
    _atomic_write(csv_path, format_log(log, scenario))
    _atomic_write(json_path, json.dumps(summary_document(log), indent=2) + "\n")
    return csv_path, json_path


# --- scenario resolution --------------------------------------------------------------

def resolve_scenario(target, seed=None):
    """A scenario file path, a builtin name, or ``random-<model>`` (with ``seed``)."""
    if os.path.exists(target):
        s = load_scenario(target)
        return s if seed is None else replace(s, seed=seed)
    for s in builtin_scenarios():
        if s.name == target:
            return s
    if target.startswith("random"):
        model = target.partition("-")[2] or "unicycle"
        if model not in ("unicycle", "pointmass"):
            raise ScenarioError(f"random scenes support unicycle and pointmass, not {model!r}")
        return random_cluttered_scenario(0 if seed is None else seed, model)
    raise ScenarioError(f"no such scenario file or builtin: {target!r}")


# --- commands -------------------------------------------------------------------------

def cmd_run(args):
    try:
        scenario = resolve_scenario(args.scenario, args.seed)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.filter:
        scenario = scenario.with_filter(args.filter)
    log = run(scenario)
    csv_path, json_path = write_outputs(log, scenario, args.out)
    s = log.summary()
    print(f"{scenario.name} [{scenario.filter}]: {log.status} ({log.reason}); "
          f"min clearance {s['min_clearance']:.4g} m, min h {s['min_h']:.4g}")
    print(f"wrote {csv_path}\nwrote {json_path}")
    return EXIT_CODES[log.status]


def _suite_job(job):
    scenario, out = job
    log = run(scenario)
    write_outputs(log, scenario, out)
    s = log.summary()
    return {k: s[k] for k in SUITE_COLUMNS}


def cmd_suite(args):
    jobs = [(s.with_filter(kind), args.out) for s in builtin_scenarios() for kind in ("polyc2bf", "c3bf")]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_suite_job, jobs))
    else:
        rows = [_suite_job(j) for j in jobs]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUITE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in r.items()})
    path = os.path.join(args.out, "suite.csv")
    _atomic_write(path, buf.getvalue())
    lat = [r["latency_mean_us"] for r in rows if r["filter"] == "polyc2bf"]
    p99 = [r["latency_p99_us"] for r in rows if r["filter"] == "polyc2bf"]
    for r in rows:
        print(f"{r['scenario']:<16} {r['filter']:<9} {r['status']:<15} "
              f"min clr {r['min_clearance']:8.4f}  min h {r['min_h']:9.4g}")
    print(f"polyc2bf filter_step latency: mean {np.mean(lat):.1f} us, worst p99 {np.max(p99):.1f} us")
    print(f"wrote {path}")
    ok = all(r["status"] == REACHED for r in rows if r["filter"] == "polyc2bf")
    return EXIT_OK if ok else EXIT_CODES[COLLIDED]


def cmd_plot(args):
    try:
        with open(args.log, encoding="utf-8") as fh:
            log, scen = parse_log(fh.read())
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    from ._plot import plot_log

    out = args.out or os.path.splitext(args.log)[0] + ".svg"
    scenario = parse_scenario(json.dumps(scen)) if scen is not None else None
    plot_log(log, scenario, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_dump(args):
    try:
        s = resolve_scenario(args.scenario, args.seed)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    sys.stdout.write(dump_scenario(s))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="polycone", description="Polygonal cone CBF safety filter simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate one scenario and write its log")
    r.add_argument("scenario", help="scenario file, builtin name, or random-<model>")
    r.add_argument("--out", default=".", help="output directory")
    r.add_argument("--filter", choices=_FILTERS, help="override the scenario's filter")
    r.add_argument("--seed", type=int, help="scenario seed (selects the scene for random-<model>)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("suite", help="all builtin scenarios under both filters")
    s.add_argument("--out", default=".", help="output directory")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.set_defaults(func=cmd_suite)

    pl = sub.add_parser("plot", help="SVG of a trajectory log")
    pl.add_argument("log", help="trajectory CSV written by 'run'")
    pl.add_argument("--out", help="SVG path (default: next to the log)")
    pl.set_defaults(func=cmd_plot)

    d = sub.add_parser("dump", help="print a scenario as a scenario file")
    d.add_argument("scenario", help="builtin name, random-<model>, or scenario file")
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

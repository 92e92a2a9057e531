import csv
import json
import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from polycone.cli import (
    EXIT_CODES,
    SUITE_COLUMNS,
    dump_scenario,
    format_log,
    load_scenario,
    main,
    parse_log,
    parse_scenario,
    scenario_to_dict,
)
from polycone.errors import ScenarioError
from polycone.sim import builtin, builtin_scenarios, run

GOOD = """\
schema_version: 1
name: tiny
model: pointmass
initial_state: [0.0, 0.0, 0.5, 0.0]
goal: [4.0, 0.0]
width: 0.2
obstacles:
  - name: box
    vertices: [[1.5, 0.3], [2.5, 0.3], [2.5, 1.3], [1.5, 1.3]]
    velocity: [0.0, 0.1]
"""

LOG_FIELDS = ("t", "states", "reference", "u", "h", "psi", "clearance", "obstacle_centers", "latency_ns",
              "fallback")


def path_points(elem):
    pts = []
    for p in elem.iter("{http://www.w3.org/2000/svg}path"):
        for x, y in re.findall(r"[ML]\s*(-?[\d.]+)\s+(-?[\d.]+)", p.get("d", "")):
            pts.append((float(x), float(y)))
    return np.array(pts)


def find_gid(root, gid):
    for e in root.iter():
        if e.get("id") == gid:
            return e
    raise AssertionError(f"no element {gid!r}")


# --- scenario files -----------------------------------------------------------------

def test_parse_good_scenario():
    s = parse_scenario(GOOD)
    assert s.name == "tiny" and s.model == "pointmass"
    assert s.obstacles[0].center_velocity.tolist() == [0.0, 0.1]
    assert s.filter == "polyc2bf"


def test_unknown_key_reports_line():
    with pytest.raises(ScenarioError) as err:
        parse_scenario(GOOD.replace("width: 0.2", "widht: 0.2"))
    assert err.value.line == 6
    assert "widht" in str(err.value)
    bad = GOOD.replace("    velocity:", "    colour: red\n    velocity:")
    with pytest.raises(ScenarioError) as err:
        parse_scenario(bad)
    assert err.value.line == 10


def test_schema_version_and_required_keys():
    with pytest.raises(ScenarioError, match="schema_version"):
        parse_scenario(GOOD.replace("schema_version: 1", "schema_version: 2"))
    with pytest.raises(ScenarioError, match="goal"):
        parse_scenario(GOOD.replace("goal: [4.0, 0.0]\n", ""))
    with pytest.raises(ScenarioError) as err:
        parse_scenario(GOOD.replace("width: 0.2", "width: 0.2\nwidth: 0.3"))
    assert "duplicate" in str(err.value)


def test_bad_values_report_lines():
    with pytest.raises(ScenarioError) as err:
        parse_scenario(GOOD.replace("[0.0, 0.0, 0.5, 0.0]", "[0.0, 0.0, 0.5]"))
    assert err.value.line == 4
    with pytest.raises(ScenarioError) as err:
        parse_scenario(GOOD.replace("width: 0.2", "width: wide"))
    assert err.value.line == 6
    with pytest.raises(ScenarioError):
        parse_scenario(GOOD.replace("[[1.5, 0.3], [2.5, 0.3], [2.5, 1.3], [1.5, 1.3]]", "[[1.5, 0.3], [2.5, 0.3]]"))
    with pytest.raises(ScenarioError):
        parse_scenario("schema_version: [1\n")
    with pytest.raises(ScenarioError):
        parse_scenario("")


@pytest.mark.parametrize("name", [s.name for s in builtin_scenarios()])
def test_dump_round_trip(name):
    s = builtin(name)
    again = parse_scenario(dump_scenario(s))
    assert scenario_to_dict(again) == scenario_to_dict(s)


def test_load_scenario_file(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(GOOD)
    assert load_scenario(str(p)).name == "tiny"


# --- logs ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["moving-crossing", "cluttered-3d-b"])
def test_csv_round_trip_is_exact(name):
    s = builtin(name)
    s = type(s)(**{**s.__dict__, "horizon": 2.0})
    log = run(s)
    back, scen = parse_log(format_log(log, s))
    for f in LOG_FIELDS:
        assert np.array_equal(getattr(back, f), getattr(log, f), equal_nan=True), f
    assert (back.status, back.reason, back.dt, back.model, back.filter) == (
        log.status, log.reason, log.dt, log.model, log.filter)
    assert scen == json.loads(json.dumps(scenario_to_dict(s)))


def test_csv_round_trip_without_obstacles():
    s = parse_scenario(GOOD.split("obstacles:")[0])
    log = run(s)
    back, _ = parse_log(format_log(log))
    assert back.h.shape == (log.n_steps, 0)
    assert np.array_equal(back.states, log.states)


def test_parse_log_rejects_garbage():
    for text in ("", "hello\n", "# polycone-log 9\nstep\n", "# polycone-log 1\n# status: reached\n"):
        with pytest.raises(ValueError):
            parse_log(text)


# --- commands -----------------------------------------------------------------------

def test_run_exit_codes(tmp_path, capsys):
    assert main(["run", "long-wall", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "long-wall-polyc2bf.summary.json").read_text())
    assert summary["status"] == "reached" and summary["min_clearance"] > 0
    for key in ("min_h", "mean_intervention", "latency_mean_us", "latency_p99_us"):
        assert key in summary
    assert main(["run", "long-wall", "--filter", "c3bf", "--out", str(tmp_path)]) == 3
    summary = json.loads((tmp_path / "long-wall-c3bf.summary.json").read_text())
    assert summary["status"] == "filter-failure" and summary["final_time"] == 0.0
    bad = tmp_path / "bad.yaml"
    bad.write_text(GOOD.replace("model: pointmass", "model: boat"))
    assert main(["run", str(bad), "--out", str(tmp_path)]) == 1
    assert "line 3" in capsys.readouterr().err
    assert main(["run", "no-such-thing"]) == 1
    assert main(["run"]) == 1
    assert main(["frobnicate"]) == 1


def test_exit_code_table():
    assert EXIT_CODES == {"reached": 0, "collided": 2, "filter-failure": 3, "timeout": 4}


def test_run_scenario_file_and_collision(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(GOOD)
    assert main(["run", str(p), "--out", str(tmp_path)]) == 0
    # unfiltered, straight through a box
    p.write_text(GOOD.replace("[1.5, 0.3], [2.5, 0.3], [2.5, 1.3], [1.5, 1.3]",
                              "[1.5, -0.5], [2.5, -0.5], [2.5, 0.5], [1.5, 0.5]")
                 .replace("velocity: [0.0, 0.1]", "velocity: [0.0, 0.0]"))
    assert main(["run", str(p), "--filter", "none", "--out", str(tmp_path)]) == 2


def test_suite_table(tmp_path):
    code = main(["suite", "--out", str(tmp_path)])
    with open(tmp_path / "suite.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == SUITE_COLUMNS
    assert len(rows) == 12
    assert {(r["scenario"], r["filter"]) for r in rows} == {
        (s.name, f) for s in builtin_scenarios() for f in ("polyc2bf", "c3bf")}
    assert all(r["status"] == "reached" for r in rows if r["filter"] == "polyc2bf")
    assert any(r["status"] == "filter-failure" for r in rows if r["filter"] == "c3bf")
    assert code == 0
    assert len(list(tmp_path.glob("*.csv"))) == 13


def test_plot_long_wall(tmp_path):
    assert main(["run", "long-wall", "--out", str(tmp_path)]) == 0
    svg = tmp_path / "wall.svg"
    assert main(["plot", str(tmp_path / "long-wall-polyc2bf.csv"), "--out", str(svg)]) == 0
    root = ET.parse(svg).getroot()
    traj = path_points(find_gid(root, "trajectory"))
    wall = path_points(find_gid(root, "obstacle-0"))
    find_gid(root, "c3bf-0")
    find_gid(root, "min-h")
    # the path clears the right-hand end of the wall
    assert traj[:, 0].max() > wall[:, 0].max()


def test_plot_errors(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["plot", str(empty)]) == 1
    assert main(["plot", str(tmp_path / "missing.csv")]) == 1


def test_dump_command(capsys):
    assert main(["dump", "narrow-corridor"]) == 0
    out = capsys.readouterr().out
    assert parse_scenario(out).name == "narrow-corridor"
    assert main(["dump", "random-pointmass", "--seed", "3"]) == 0
    assert parse_scenario(capsys.readouterr().out).name == "random-pointmass-3"
    assert main(["dump", "random-quadrotor"]) == 1

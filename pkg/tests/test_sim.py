import numpy as np
import pytest

from polycone.barrier import batch_constraints
from polycone.dynamics import PointMass, Unicycle, UnicycleParams
from polycone.geometry import ObstacleField, distance_to_polygon
from polycone.sim import (
    COLLIDED,
    DEFAULT_GAINS,
    FILTER_FAILURE,
    REACHED,
    Scenario,
    builtin,
    builtin_scenarios,
    pd_reference,
    random_cluttered_scenario,
    run,
)


@pytest.fixture(scope="module")
def polyc2bf_runs():
    return {s.name: (s, run(s)) for s in builtin_scenarios()}


def test_suite_enumeration():
    suite = builtin_scenarios()
    assert len(suite) == 6
    assert [s.name for s in suite] == ["long-wall", "cluttered-room", "cluttered-3d-a", "cluttered-3d-b",
                                       "narrow-corridor", "moving-crossing"]
    assert {s.model for s in suite} == {"unicycle", "quadrotor", "pointmass"}
    assert any(np.any(o.center_velocity != 0) for s in suite for o in s.obstacles)
    assert builtin("long-wall").name == "long-wall"
    with pytest.raises(KeyError):
        builtin("nope")


def test_builtins_start_safe():
    for s in builtin_scenarios():
        model = s.build_model()
        field = ObstacleField(s.obstacles)
        c = model.body_center(s.initial_state)
        assert field.signed_distances(c[:2]).min() > 0 or model.space_dim == 3
        cb = batch_constraints(model, s.initial_state, field, 0.0, s.width)
        assert not np.any(cb.inside)
        assert np.all(cb.h[cb.usable] > 0), s.name


def test_long_wall_geometry():
    s = builtin("long-wall")
    wall = s.obstacles[0]
    lo, hi = wall.vertices.min(axis=0), wall.vertices.max(axis=0)
    assert np.allclose(hi - lo, [20.0, 0.5])
    c = s.build_model().body_center(s.initial_state)
    assert distance_to_polygon(c, wall) == pytest.approx(1.0)
    r = wall.circumradius() + 0.5 * s.width
    assert r == pytest.approx(np.hypot(10.0, 0.25) + 0.2)
    assert np.linalg.norm(c - wall.center) < r


def test_builtin_polyc2bf_runs_are_safe(polyc2bf_runs):
    for name, (s, log) in polyc2bf_runs.items():
        assert log.status == REACHED, (name, log.reason)
        assert log.min_clearance() > 0, name
        assert log.min_h() >= -1e-6, name


def test_minimal_intervention_bitwise(polyc2bf_runs):
    for name, (s, log) in polyc2bf_runs.items():
        ctrl = np.all(np.isfinite(log.u), axis=1)
        psi = np.where(np.isnan(log.psi), np.inf, log.psi)
        quiet = ctrl & np.all(psi >= 0, axis=1)
        assert quiet.any()
        assert np.array_equal(log.u[quiet], log.reference[quiet]), name


def test_timestamps_and_clearance(polyc2bf_runs):
    s, log = polyc2bf_runs["cluttered-room"]
    assert np.array_equal(log.t, np.arange(log.n_steps) * s.dt)
    assert np.all(np.diff(log.t) > 0)
    model = s.build_model()
    for k in range(0, log.n_steps, 97):
        c = model.body_center(log.states[k])
        want = min(distance_to_polygon(c, o.at(log.t[k])) for o in s.obstacles) - 0.5 * s.width
        assert log.clearance[k] == pytest.approx(want, abs=1e-12)


def test_moving_obstacles_have_constant_velocity(polyc2bf_runs):
    s, log = polyc2bf_runs["moving-crossing"]
    C = log.obstacle_centers
    for i, o in enumerate(s.obstacles):
        want = o.center[:2] + np.outer(log.t, o.center_velocity[:2])
        assert np.array_equal(C[:, 2 * i:2 * i + 2], want)
    assert np.abs(np.diff(C, n=2, axis=0)).max() <= 1e-12


def test_long_wall_c3bf_fails_at_start():
    log = run(builtin("long-wall").with_filter("c3bf"))
    assert log.status == FILTER_FAILURE
    assert log.t[-1] == 0.0
    assert "InsideVirtualObstacle" in log.reason


def test_unfiltered_run_passes_reference_through():
    s = builtin("cluttered-room").with_filter("none")
    log = run(s)
    assert log.status in (REACHED, COLLIDED)
    ctrl = np.all(np.isfinite(log.u), axis=1)
    assert np.array_equal(log.u[ctrl], log.reference[ctrl])


def test_empty_world_pointmass():
    s = Scenario(name="empty", model="pointmass", initial_state=[0.0, 0.0, 0.0, 0.0], goal=[3.0, 1.0],
                 obstacles=[])
    log = run(s)
    assert log.status == REACHED
    ctrl = np.all(np.isfinite(log.u), axis=1)
    assert np.array_equal(log.u[ctrl], log.reference[ctrl])
    assert log.h.shape == (log.n_steps, 0)


def test_determinism():
    s = builtin("narrow-corridor")
    a, b = run(s, record_latency=False), run(s, record_latency=False)
    for name in ("t", "states", "reference", "u", "h", "psi", "clearance", "obstacle_centers"):
        assert np.array_equal(getattr(a, name), getattr(b, name), equal_nan=True), name
    assert (a.status, a.reason) == (b.status, b.reason)


def test_numpy_backend_reproduces_compiled_run():
    s = builtin("moving-crossing")
    a, b = run(s, record_latency=False), run(s, record_latency=False, backend="numpy")
    assert a.status == b.status
    assert a.n_steps == b.n_steps
    assert np.allclose(a.states, b.states, atol=1e-7)


def test_pd_reference_examples():
    pm = PointMass()
    gains = {"k_p": 1.0, "k_d": 0.0, "max_speed": np.inf}
    assert np.array_equal(pd_reference(pm, np.zeros(4), np.array([1.0, 0.0]), gains), [1.0, 0.0])
    g = DEFAULT_GAINS["pointmass"]
    assert np.allclose(pd_reference(pm, np.array([2.0, 1.0, 0, 0]), np.array([2.0, 1.0]), g), 0.0)
    uni = Unicycle(UnicycleParams(0.2))
    gu = DEFAULT_GAINS["unicycle"]
    assert np.allclose(pd_reference(uni, np.array([1.0, 1.0, 0.3, 0.0, 0.0]), np.array([1.0, 1.0]), gu), 0.0)
    # goal straight up: turn the shorter way round
    a = pd_reference(uni, np.array([0.0, 0.0, -np.pi / 2 - 0.2, 0.5, 0.0]), np.array([0.0, 5.0]), gu)
    assert a[1] < 0
    a = pd_reference(uni, np.array([0.0, 0.0, -0.3, 0.5, 0.0]), np.array([0.0, 5.0]), gu)
    assert a[1] > 0


def test_quadrotor_pd_hovers_at_goal():
    s = builtin("cluttered-3d-a")
    q = s.build_model()
    x = np.zeros(12)
    x[:3] = s.goal
    u = pd_reference(q, x, s.goal, s.merged_gains())
    assert np.allclose(u, q.hover_thrust(), atol=1e-12)


def test_scenario_validation():
    base = dict(name="x", model="pointmass", initial_state=np.zeros(4), goal=np.ones(2), obstacles=[])
    Scenario(**base)
    for bad in ({"model": "boat"}, {"dt": 0.0}, {"width": -1.0}, {"filter": "magic"},
                {"initial_state": np.zeros(3)}, {"goal": np.zeros(3)}, {"c3bf_radius": "inscribed"}):
        with pytest.raises(ValueError):
            Scenario(**{**base, **bad})


def test_random_scenarios_start_safe_and_are_seeded():
    for seed in range(6):
        model = "unicycle" if seed % 2 == 0 else "pointmass"
        s = random_cluttered_scenario(seed, model)
        again = random_cluttered_scenario(seed, model)
        assert np.array_equal(s.initial_state, again.initial_state)
        m = s.build_model()
        cb = batch_constraints(m, s.initial_state, ObstacleField(s.obstacles), 0.0, s.width)
        assert np.all(cb.h > 0)

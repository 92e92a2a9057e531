"""Closed-loop scenario simulation: PD reference -> safety filter -> RK4."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels
from .barrier import batch_constraints
from .dynamics import MODELS, QuadrotorParams, UnicycleParams, rotation_zyx, step_rk4, wrap_angle
from .errors import (
    EgoInsidePolygon,
    Infeasible,
    InsideVirtualObstacle,
    MaxIterations,
    NonFiniteState,
    SingularAttitude,
    ZeroGradient,
)
from .filter import FilterConfig, filter_step
from .geometry import ObstacleField, PolygonObstacle

REACHED = "reached"
COLLIDED = "collided"
FILTER_FAILURE = "filter-failure"
TIMEOUT = "timeout"
STATUSES = (REACHED, COLLIDED, FILTER_FAILURE, TIMEOUT)

DEFAULT_GAINS = {
    "unicycle": {"k_v": 1.0, "k_theta": 4.0, "k_omega": 4.0, "speed": 1.0, "k_slow": 1.0},
    "pointmass": {"k_p": 1.0, "k_d": 2.0, "max_speed": 1.0},
    "quadrotor": {"k_pos": 1.0, "k_vel": 2.0, "speed": 1.0, "max_tilt": 0.35,
                  "k_att": 60.0, "k_rate": 14.0},
}


@dataclass
class Scenario:
    """Everything needed to reproduce one closed-loop run."""

    name: str
    model: str
    initial_state: np.ndarray
    goal: np.ndarray
    obstacles: list
    width: float = 0.0
    gamma: float = 1.0
    dt: float = 0.005
    horizon: float = 30.0
    filter: str = "polyc2bf"
    model_params: dict = field(default_factory=dict)
    gains: dict = field(default_factory=dict)
    input_lower: Optional[np.ndarray] = None
    input_upper: Optional[np.ndarray] = None
    goal_tolerance: float = 0.1
    cull_radius: float = 50.0
    c3bf_radius: str = "circumscribed"
    seed: int = 0
    description: str = ""

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        self.initial_state = np.asarray(self.initial_state, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        if self.dt <= 0 or self.horizon <= 0:
            raise ValueError("dt and horizon must be positive")
        if self.width < 0:
            raise ValueError("width must be non-negative")
        if self.filter not in ("polyc2bf", "c3bf", "none"):
            raise ValueError(f"unknown filter {self.filter!r}")
        if self.c3bf_radius != "circumscribed":
            raise ValueError("only the circumscribed C3BF radius policy is supported")
        model = self.build_model()
        if self.initial_state.shape != (model.state_dim,):
            raise ValueError(f"{self.model} state needs {model.state_dim} entries")
        if self.goal.shape != (model.space_dim,):
            raise ValueError(f"{self.model} goal needs {model.space_dim} coordinates")
        for o in self.obstacles:
            if model.space_dim == 3 and o.height is None:
                raise ValueError("quadrotor scenarios need obstacles with a height")

    def build_model(self):
        cls = MODELS[self.model]
        if self.model == "unicycle":
            return cls(UnicycleParams(**self.model_params))
        if self.model == "quadrotor":
            return cls(QuadrotorParams(**self.model_params))
        return cls()

    def filter_config(self):
        return FilterConfig(self.filter, self.gamma, self.width, self.input_lower, self.input_upper,
                            self.cull_radius)

    def merged_gains(self):
        g = dict(DEFAULT_GAINS[self.model])
        g.update(self.gains)
        return g

    def with_filter(self, kind):
        return replace(self, filter=kind)


def _clip_norm(v, limit):
    n = np.linalg.norm(v)
    return v if n <= limit or n == 0 else v * (limit / n)


def pd_reference(model, x, goal, gains):
    """Reference input from a PD law toward ``goal``."""
    if model.name == "unicycle":
        d = goal - x[:2]
        dist = np.linalg.norm(d)
        th_des = np.arctan2(d[1], d[0]) if dist > 0 else x[2]
        v_des = min(gains["speed"], gains.get("k_slow", np.inf) * dist)
        a = gains["k_v"] * (v_des - x[3])
        alpha = gains["k_theta"] * wrap_angle(th_des - x[2]) - gains["k_omega"] * x[4]
        return np.array([a, alpha])
    if model.name == "pointmass":
        kp, kd = gains["k_p"], gains["k_d"]
        vmax = gains.get("max_speed", np.inf)
        err = goal - x[:2]
        if kd > 0 and np.isfinite(vmax):
            return kd * (_clip_norm(kp / kd * err, vmax) - x[2:4])
        return kp * err - kd * x[2:4]
    return _quadrotor_pd(model, x, goal, gains)


def _quadrotor_pd(model, x, goal, gains):
    p = model.params
    v_des = _clip_norm(gains["k_pos"] * (goal - x[0:3]), gains["speed"])
    a_des = gains["k_vel"] * (v_des - x[3:6])
    # tilt limit: horizontal demand bounded relative to gravity
    max_h = p.gravity * np.tan(gains["max_tilt"])
    a_des[:2] = _clip_norm(a_des[:2], max_h)
    F = p.mass * (a_des + np.array([0.0, 0.0, p.gravity]))
    F[2] = max(F[2], 0.1 * p.mass * p.gravity)
    Fh = F / np.linalg.norm(F)
    roll_des = np.arcsin(np.clip(-Fh[1], -1.0, 1.0))
    pitch_des = np.arctan2(Fh[0], Fh[2])
    R = rotation_zyx(*x[6:9])
    thrust = max(float(F @ R[:, 2]), 0.0)
    err = np.array([roll_des - x[6], pitch_des - x[7], wrap_angle(0.0 - x[8])])
    torque = p.I * (gains["k_att"] * err - gains["k_rate"] * x[9:12])
    # solve [sum f; L M f] = [thrust; torque]
    A = np.vstack([np.ones(4), p.arm_length * model.mixing])
    return np.linalg.solve(A, np.r_[thrust, torque])


@dataclass
class TrajectoryLog:
    """Per-step record of a run.

    Row ``k`` holds the state at ``t = k * dt`` and the inputs applied over
    the following step; the terminal row (if the run stopped on a check)
    has NaN inputs.
    """

    scenario: str
    model: str
    filter: str
    dt: float
    t: np.ndarray
    states: np.ndarray
    reference: np.ndarray
    u: np.ndarray
    h: np.ndarray
    psi: np.ndarray
    clearance: np.ndarray
    obstacle_centers: np.ndarray
    latency_ns: np.ndarray
    fallback: np.ndarray
    status: str = TIMEOUT
    reason: str = ""

    @property
    def n_steps(self):
        return len(self.t)

    @property
    def n_obstacles(self):
        return self.h.shape[1]

    def min_clearance(self):
        return float(np.min(self.clearance)) if len(self.clearance) else float("nan")

    def min_h(self):
        finite = self.h[np.isfinite(self.h)]
        return float(finite.min()) if finite.size else float("nan")

    def summary(self):
        controlled = np.all(np.isfinite(self.u), axis=1) & np.all(np.isfinite(self.reference), axis=1)
        dev = np.linalg.norm(self.u[controlled] - self.reference[controlled], axis=1)
        lat = self.latency_ns[self.latency_ns > 0] / 1e3
        return {
            "scenario": self.scenario,
            "model": self.model,
            "filter": self.filter,
            "status": self.status,
            "reason": self.reason,
            "steps": int(self.n_steps),
            "final_time": float(self.t[-1]) if self.n_steps else 0.0,
            "min_clearance": self.min_clearance(),
            "min_h": self.min_h(),
            "mean_intervention": float(dev.mean()) if dev.size else 0.0,
            "fallback_steps": int(np.sum(self.fallback)),
            "latency_mean_us": float(lat.mean()) if lat.size else 0.0,
            "latency_p99_us": float(np.percentile(lat, 99)) if lat.size else 0.0,
        }


def run(scenario, record_latency=True, backend="compiled"):
    """Simulate ``scenario`` until it reaches the goal, collides, fails, or times out.

    ``backend`` picks the filter implementation (``"numpy"`` is the slower
    reference path).
    """
    _kernels.warmup()
    model = scenario.build_model()
    field_ = ObstacleField(scenario.obstacles)
    config = replace(scenario.filter_config(), backend=backend)
    gains = scenario.merged_gains()
    dt = scenario.dt
    n_obs = len(field_)
    max_steps = int(round(scenario.horizon / dt))
    nx, nu = model.state_dim, model.input_dim
    sd = model.space_dim

    rows_t, rows_x, rows_ref, rows_u, rows_h, rows_psi = [], [], [], [], [], []
    rows_clear, rows_c, rows_lat, rows_fb = [], [], [], []
    nan_u = np.full(nu, np.nan)
    nan_o = np.full(n_obs, np.nan)
    half_w = 0.5 * scenario.width
    x = model.normalize(scenario.initial_state)
    u_prev = None
    status, reason = TIMEOUT, "horizon reached"

    def record(k, x, ref, u, h, psi, clear, lat, fb):
        t = k * dt
        rows_t.append(t)
        rows_x.append(x)
        rows_ref.append(ref)
        rows_u.append(u)
        rows_h.append(h)
        rows_psi.append(psi)
        rows_clear.append(clear)
        rows_c.append(field_.centers_at(t).ravel())
        rows_lat.append(lat)
        rows_fb.append(fb)

    for k in range(max_steps + 1):
        t = k * dt
        center = model.body_center(x)
        if n_obs:
            sdist = field_.signed_distances(center[:2], t)
            if sd == 3:
                zr = field_.z_range_at(t)
                below = zr[:, 0] - center[2]
                above = center[2] - zr[:, 1]
                vert = np.maximum(below, above)
                # outside the z-slab the clearance is the 3-D distance to the prism
                sdist = np.where(vert > 0, np.hypot(np.maximum(sdist, 0.0), vert), sdist)
            clear = float(sdist.min()) - half_w
        else:
            clear = np.inf
        if clear < 0.0:
            status, reason = COLLIDED, f"clearance {clear:.4g} m at t={t:.3f}"
            record(k, x, nan_u, nan_u, nan_o, nan_o, clear, 0, False)
            break
        if np.linalg.norm(model.position(x) - scenario.goal) < scenario.goal_tolerance:
            status, reason = REACHED, f"goal reached at t={t:.3f}"
            record(k, x, nan_u, nan_u, _h_only(model, x, field_, t, scenario), nan_o, clear, 0, False)
            break
        if k == max_steps:
            record(k, x, nan_u, nan_u, _h_only(model, x, field_, t, scenario), nan_o, clear, 0, False)
            break
        ref = pd_reference(model, x, scenario.goal, gains)
        fb = False
        try:
            t0 = time.perf_counter_ns()
            res = filter_step(model, x, field_, ref, config, t)
            lat = time.perf_counter_ns() - t0 if record_latency else 0
            u = res.u_star
            fb = res.fallback_used
            h, psi = res.h, res.psi
        except ZeroGradient as exc:
            if u_prev is None:
                status, reason = FILTER_FAILURE, f"zero gradient at t={t:.3f}: {exc}"
                record(k, x, ref, nan_u, nan_o, nan_o, clear, 0, True)
                break
            u, lat, fb = u_prev, 0, True
            h = _h_only(model, x, field_, t, scenario)
            psi = nan_o
        except (EgoInsidePolygon, InsideVirtualObstacle, Infeasible, MaxIterations, SingularAttitude) as exc:
            status, reason = FILTER_FAILURE, f"{type(exc).__name__} at t={t:.3f}: {exc}"
            record(k, x, ref, nan_u, nan_o, nan_o, clear, 0, True)
            break
        record(k, x, ref, u, h, psi, clear, lat, fb)
        u_prev = u
        try:
            x = step_rk4(model, x, u, dt)
        except (NonFiniteState, SingularAttitude) as exc:
            status, reason = FILTER_FAILURE, f"{type(exc).__name__} at t={t + dt:.3f}: {exc}"
            break

    return TrajectoryLog(
        scenario=scenario.name,
        model=scenario.model,
        filter=scenario.filter,
        dt=dt,
        t=np.array(rows_t),
        states=np.array(rows_x).reshape(-1, nx),
        reference=np.array(rows_ref).reshape(-1, nu),
        u=np.array(rows_u).reshape(-1, nu),
        h=np.array(rows_h).reshape(len(rows_t), n_obs),
        psi=np.array(rows_psi).reshape(len(rows_t), n_obs),
        clearance=np.array(rows_clear),
        obstacle_centers=np.array(rows_c).reshape(len(rows_t), 2 * n_obs),
        latency_ns=np.array(rows_lat, dtype=np.int64),
        fallback=np.array(rows_fb, dtype=bool),
        status=status,
        reason=reason,
    )


def _h_only(model, x, field_, t, scenario):
    if not len(field_):
        return np.zeros(0)
    kind = "c3bf" if scenario.filter == "c3bf" else "polyc2bf"
    try:
        cb = batch_constraints(model, x, field_, t, scenario.width, kind, scenario.cull_radius)
    except (SingularAttitude, ValueError):
        return np.full(len(field_), np.nan)
    return np.where(cb.inside, np.nan, cb.h)


# --- builtin scenes -----------------------------------------------------------------

def _rect(x0, y0, x1, y1, **kw):
    return PolygonObstacle.from_vertices([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], **kw)


def _ngon(cx, cy, r, n, phase=0.0, **kw):
    a = phase + 2 * np.pi * np.arange(n) / n
    return PolygonObstacle.from_vertices(np.c_[cx + r * np.cos(a), cy + r * np.sin(a)], **kw)


def _prism(poly, height, z0=0.0):
    # tall pillars are centred on the flight altitude (there is no ground plane)
    c = poly.center[:2]
    return PolygonObstacle(poly.vertices, np.r_[c, z0 + height / 2.0], np.zeros(3), height, poly.name)


def long_wall():
    """20 m x 0.5 m wall; the unicycle starts 1 m in front of its face and
    drives past the end of the wall."""
    wall = _rect(-10.0, -0.25, 10.0, 0.25, name="wall")
    return Scenario(
        name="long-wall", model="unicycle",
        initial_state=[6.0, -1.25, 0.0, 1.0, 0.0], goal=[14.0, -0.5],
        obstacles=[wall], width=0.4, model_params={"l": 0.2},
        description="Start 1 m from a 20 m wall, inside its circumscribed circle.",
    )


def cluttered_room():
    obstacles = [
        _rect(-12.0, 6.0, 12.0, 6.5, name="back-wall"),
        _rect(3.0, -1.6, 4.2, -0.6, name="crate"),
        _ngon(6.5, 1.6, 0.7, 5, 0.3, name="pentagon"),
        PolygonObstacle.from_vertices([(8.5, -2.2), (10.0, -2.0), (9.1, -0.9)], name="triangle"),
        _rect(11.0, 1.4, 12.4, 2.2, name="bench"),
        _ngon(4.0, 3.6, 0.6, 6, name="hexagon"),
    ]
    return Scenario(
        name="cluttered-room", model="unicycle",
        initial_state=[0.5, 0.5, 0.0, 1.0, 0.0], goal=[15.0, 0.0],
        obstacles=obstacles, width=0.4, model_params={"l": 0.2},
        description="Clutter in front of a 24 m back wall.",
    )


def cluttered_3d_a():
    obstacles = [
        _prism(_rect(-0.5, -3.0, 0.5, 3.0, name="low-wall"), 1.0),
        _prism(_rect(3.0, -1.8, 3.8, -1.0, name="pillar"), 12.0, -4.4),
        _prism(_ngon(6.0, 1.6, 0.5, 6, name="column"), 12.0, -4.4),
        _prism(_ngon(9.5, -1.2, 0.6, 5, name="post"), 12.0, -4.4),
    ]
    return Scenario(
        name="cluttered-3d-a", model="quadrotor",
        initial_state=[-4.0, 0.0, 1.6, 1.0, 0.0, 0.0, 0, 0, 0, 0, 0, 0], goal=[12.0, 0.0, 1.6],
        obstacles=obstacles, width=0.3,
        description="Low wall to fly over, then tall pillars to fly around.",
    )


def cluttered_3d_b():
    obstacles = [
        _prism(_ngon(0.0, 1.5, 0.8, 8, name="drum"), 12.0, -4.5),
        _prism(_ngon(4.0, -1.5, 0.6, 5, name="pentagon"), 12.0, -4.5),
        _prism(_rect(3.5, 1.0, 4.5, 1.8, name="pillar"), 12.0, -4.5),
        _prism(_ngon(8.0, 0.9, 0.7, 8, name="tower"), 12.0, -4.5),
        _prism(_rect(6.5, -4.0, 7.5, -2.5, name="crate"), 1.0),
    ]
    return Scenario(
        name="cluttered-3d-b", model="quadrotor",
        initial_state=[-5.0, 0.0, 1.5, 1.0, 0.0, 0.0, 0, 0, 0, 0, 0, 0], goal=[12.0, -0.5, 1.5],
        obstacles=obstacles, width=0.3,
        description="Tall pillar field with a low crate.",
    )


def narrow_corridor():
    obstacles = []
    for i, x0 in enumerate(np.arange(-5.0, 5.0, 1.5)):
        obstacles.append(_rect(x0, 0.7, x0 + 1.2, 1.0, name=f"upper-{i}"))
        obstacles.append(_rect(x0 + 0.6, -1.0, x0 + 1.8, -0.7, name=f"lower-{i}"))
    return Scenario(
        name="narrow-corridor", model="pointmass",
        initial_state=[-7.0, 0.0, 0.8, 0.0], goal=[7.5, 0.0],
        obstacles=obstacles, width=0.2,
        description="Corridor between staggered wall blocks.",
    )


def moving_crossing():
    obstacles = [
        _rect(0.9, -5.05, 2.9, -4.05, velocity=(0.2, 0.6), name="cart"),
        _ngon(7.8, -0.5, 0.85, 8, velocity=(-0.05, 0.35), name="drum"),
    ]
    return Scenario(
        name="moving-crossing", model="pointmass",
        initial_state=[-7.0, 0.0, 0.8, 0.0], goal=[9.0, 0.0],
        obstacles=obstacles, width=0.4,
        description="Constant-velocity obstacles cross the path.",
    )


def builtin_scenarios():
    """The canonical suite: six scenes covering all three vehicle models."""
    return [long_wall(), cluttered_room(), cluttered_3d_a(), cluttered_3d_b(), narrow_corridor(),
            moving_crossing()]


def builtin(name):
    for s in builtin_scenarios():
        if s.name == name:
            return s
    raise KeyError(name)


def random_cluttered_scenario(seed, model="unicycle", n_obstacles=(4, 9), horizon=15.0):
    """Seeded random clutter with a start whose initial velocity is outside every cone."""
    from .barrier import batch_constraints as _bc

    rng = np.random.default_rng(seed)
    mdl = MODELS[model](UnicycleParams(0.2)) if model == "unicycle" else MODELS[model]()
    width = 0.3
    for _ in range(200):
        obstacles = []
        for i in range(int(rng.integers(n_obstacles[0], n_obstacles[1] + 1))):
            c = rng.uniform([-6.0, -6.0], [6.0, 6.0])
            size = rng.uniform(0.4, 1.6)
            pts = c + rng.uniform(-size, size, size=(int(rng.integers(3, 8)), 2))
            try:
                obs = PolygonObstacle.from_vertices(pts, name=f"o{i}")
            except ValueError:
                continue
            if rng.random() < 0.2:
                obs = PolygonObstacle(obs.vertices, obs.center, rng.uniform(-0.3, 0.3, 2), None, obs.name)
            obstacles.append(obs)
        if not obstacles:
            continue
        fld = ObstacleField(obstacles)
        start = np.array([-9.0, rng.uniform(-5.0, 5.0)])
        goal = np.array([9.0, rng.uniform(-5.0, 5.0)])
        if fld.signed_distances(goal).min() < 0.6:
            continue
        speed = rng.uniform(0.5, 1.0)
        base = np.arctan2(*(goal - start)[::-1])
        for dh in rng.permutation(np.linspace(-1.2, 1.2, 13)):
            heading = base + dh
            if model == "unicycle":
                x0 = np.array([start[0], start[1], heading, speed, 0.0])
            else:
                x0 = np.array([start[0], start[1], speed * np.cos(heading), speed * np.sin(heading)])
            center = mdl.body_center(x0)
            if fld.signed_distances(center).min() < 1.0 + width:
                break
            cb = _bc(mdl, x0, fld, 0.0, width, "polyc2bf")
            if np.all(cb.h > 0) and not np.any(cb.inside):
                return Scenario(
                    name=f"random-{model}-{seed}", model=model, initial_state=x0, goal=goal,
                    obstacles=obstacles, width=width, horizon=horizon, seed=seed,
                    model_params={"l": 0.2} if model == "unicycle" else {},
                )
    raise RuntimeError(f"could not place a random scenario for seed {seed}")

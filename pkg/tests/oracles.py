"""Independent reference implementations shared by the unit and acceptance tests."""
import itertools

import numpy as np

from polycone.barrier import model_frame
from polycone.errors import EgoInsideVolume, InvalidPolygon
from polycone.geometry import PolygonObstacle, distance_to_polygon


def random_polygon(rng, n=None, scale=1.0):
    while True:
        k = n or int(rng.integers(3, 12))
        pts = rng.normal(size=(k, 2)) * scale + rng.uniform(-2, 2, 2)
        try:
            return PolygonObstacle.from_vertices(pts)
        except InvalidPolygon:
            continue


def random_outside_point(rng, poly, lo=0.05, hi=6.0):
    while True:
        p = poly.center[:2] + rng.uniform(-hi, hi, 2)
        if distance_to_polygon(p, poly) > lo:
            return p


def brute_force_tangent_pair(verts, ego):
    """All vertex pairs; keep those whose sector (< pi) contains every vertex, widest first."""
    d = verts - ego
    ang = np.arctan2(d[:, 1], d[:, 0])
    best, best_spread = None, -1.0
    for i, j in itertools.combinations(range(len(verts)), 2):
        # sector from i counter-clockwise to j, and from j to i
        for a, b in ((i, j), (j, i)):
            spread = (ang[b] - ang[a]) % (2 * np.pi)
            if spread >= np.pi:
                continue
            rel = (ang - ang[a]) % (2 * np.pi)
            rel[np.isclose(rel, 2 * np.pi)] = 0.0
            if np.all(rel <= spread + 1e-12) and spread > best_spread:
                best, best_spread = {a, b}, spread
    return best


def regular_polygon(n, r, center=(0.0, 0.0), velocity=(0.0, 0.0), height=None, z=None):
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    verts = np.column_stack([center[0] + r * np.cos(a), center[1] + r * np.sin(a)])
    c = np.array(center, dtype=float)
    vel = np.array(velocity, dtype=float)
    if height is not None:
        c = np.append(c, z if z is not None else height / 2)
        if vel.shape == (2,):
            vel = np.append(vel, 0.0)
    return PolygonObstacle(verts, c, vel, height)


def random_obstacle(rng, planar=True):
    n = int(rng.integers(3, 9))
    a = np.sort(rng.uniform(0, 2 * np.pi, n))
    while np.any(np.diff(np.r_[a, a[0] + 2 * np.pi]) >= np.pi):
        a = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = rng.uniform(0.3, 1.5, n) if n == 3 else rng.uniform(0.6, 1.2)
    r = np.broadcast_to(r, (n,))
    c = rng.uniform(-1, 1, 2)
    verts = np.column_stack([c[0] + r * np.cos(a), c[1] + r * np.sin(a)])
    vel = rng.uniform(-0.5, 0.5, 2)
    if planar:
        return PolygonObstacle.from_vertices(verts, velocity=vel)
    hgt = rng.uniform(0.5, 3.0)
    return PolygonObstacle.from_vertices(verts, velocity=np.append(vel, rng.uniform(-0.2, 0.2)),
                                         center=np.append(verts.mean(axis=0), rng.uniform(0.5, 2.5)),
                                         height=hgt)


def random_state(model, rng):
    if model.name == "unicycle":
        return np.r_[rng.uniform(-5, 5, 2), rng.uniform(-np.pi, np.pi), rng.uniform(-2, 2, 2)]
    if model.name == "pointmass":
        return np.r_[rng.uniform(-5, 5, 2), rng.uniform(-2, 2, 2)]
    x = np.zeros(12)
    x[0:3] = np.r_[rng.uniform(-5, 5, 2), rng.uniform(0, 3)]
    x[3:6] = rng.uniform(-2, 2, 3)
    x[6:9] = rng.uniform(-0.6, 0.6, 3)
    x[9:12] = rng.uniform(-2, 2, 3)
    return x


def random_input(model, rng):
    if model.name == "quadrotor":
        return model.hover_thrust() + rng.uniform(-2, 2, 4)
    return rng.uniform(-2, 2, model.input_dim)


def sample_case(model, rng, margin=0.2):
    """Random (state, obstacle, t) with the body center clear of the obstacle."""
    while True:
        obs = random_obstacle(rng, planar=model.space_dim == 2)
        x = random_state(model, rng)
        t = rng.uniform(0, 2)
        c = model.body_center(x)
        o = obs.at(t)
        if distance_to_polygon(c[:2], o) < margin:
            continue
        try:
            frame = model_frame(model, x, obs, 0.3, t)
        except EgoInsideVolume:
            continue
        if np.linalg.norm(frame.v_rel) < 0.05:
            continue
        return x, obs, t, frame


def frozen_h(model, x, t, frame, obs, t0, plane_projection):
    """h at (x, t) keeping the target point, k_hat and projection of ``frame`` fixed.

    The target point translates with the obstacle.
    """
    cdot = obs.center_velocity
    c = model.body_center(x)
    if model.space_dim == 2:
        T = frame.target + cdot[:2] * (t - t0)
        p = T - c
        v = cdot[:2] - model.body_velocity(x)
    else:
        P = plane_projection
        T = frame.target + cdot * (t - t0)
        p = P @ (T - c)
        v = P @ (cdot - model.body_velocity(x))
    return p @ v + np.linalg.norm(v) * (p @ frame.k_hat)


def projection_oracle(G, c, x0):
    """Exact projection of x0 onto {G x >= c} by enumerating active sets of size <= dim."""
    m = x0.size
    best, best_d = None, np.inf
    for k in range(0, min(m, len(c)) + 1):
        for S in itertools.combinations(range(len(c)), k):
            S = list(S)
            if k:
                Gs = G[S]
                M = Gs @ Gs.T
                if np.linalg.matrix_rank(M) < k:
                    continue
                lam = np.linalg.solve(M, c[S] - Gs @ x0)
                if np.any(lam < -1e-12):
                    continue
                x = x0 + Gs.T @ lam
            else:
                x = x0.copy()
            if np.all(G @ x - c >= -1e-9):
                d = np.linalg.norm(x - x0)
                if d < best_d:
                    best, best_d = x, d
    return best

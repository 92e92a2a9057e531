"""Polygonal collision-cone construction.

The cone for one obstacle is spanned by the two tangent vertices of the
(convex) polygon as seen from the ego body center. The chord joining them is
widened by ``w/2`` at each end to account for the ego footprint; the relative
position vector points at the chord midpoint and the cone half-angle is the
larger of the two angles the widened endpoints make with it.

Obstacles only translate, so every quantity at time ``t`` is obtained by
shifting the t=0 vertex set by ``center_velocity * t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import _kernels
from .errors import DegenerateCone, EgoInsidePolygon, EgoInsideVolume, InvalidPolygon

# Relative tolerance on cosines when deciding that the two cone edges tie.
ANGLE_TIE_TOL = 1e-12

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


@dataclass(frozen=True, eq=False)
class PolygonObstacle:
    """A translating convex polygon (optionally extruded vertically).

    ``vertices`` are the t=0 positions in counter-clockwise order. ``center``
    is 2-D for planar use or 3-D when the obstacle has a ``height``; the
    extruded volume spans ``center_z +- height/2``.
    """

    vertices: np.ndarray
    center: np.ndarray
    center_velocity: np.ndarray
    height: Optional[float] = None
    name: str = ""

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
            raise InvalidPolygon("need at least 3 two-dimensional vertices")
        if not np.all(np.isfinite(verts)):
            raise InvalidPolygon("vertices must be finite")
        edges = np.roll(verts, -1, axis=0) - verts
        turns = _cross(edges, np.roll(edges, -1, axis=0))
        if np.any(turns <= 0.0):
            raise InvalidPolygon("vertices must form a strictly convex counter-clockwise polygon")
        center = np.asarray(self.center, dtype=float).ravel()
        velocity = np.asarray(self.center_velocity, dtype=float).ravel()
        if center.shape not in ((2,), (3,)):
            raise InvalidPolygon("center must be a 2-D or 3-D point")
        if velocity.shape != center.shape:
            raise InvalidPolygon("center_velocity must match the dimension of center")
        if center.shape == (3,) and self.height is None:
            raise InvalidPolygon("a 3-D center requires a height")
        if self.height is not None and not (np.isfinite(self.height) and self.height > 0):
            raise InvalidPolygon("height must be positive and finite")
        if not np.all(np.isfinite(velocity)):
            raise InvalidPolygon("center_velocity must be finite")
        if _strict_inside_margin(center[:2], verts) <= 0.0:
            raise InvalidPolygon("center must lie strictly inside the polygon")
        verts.setflags(write=False)
        center.setflags(write=False)
        velocity.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "center_velocity", velocity)

    @classmethod
    def from_vertices(cls, vertices, velocity=None, center=None, height=None, name=""):
        """Build an obstacle from arbitrary vertices.

        The convex hull is taken (non-convex input is over-approximated) and
        ordered counter-clockwise. ``center`` defaults to the hull vertex
        centroid, lifted to mid-height when ``height`` is given.
        """
        pts = np.asarray(vertices, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
            raise InvalidPolygon("need at least 3 two-dimensional vertices")
        try:
            hull = ConvexHull(pts)
        except QhullError as exc:
            raise InvalidPolygon(f"degenerate polygon: {exc}".splitlines()[0]) from None
        # Qhull returns 2-D hull vertices counter-clockwise.
        verts = pts[hull.vertices]
        if center is None:
            center = verts.mean(axis=0)
            if height is not None:
                center = np.append(center, height / 2.0)
        center = np.asarray(center, dtype=float).ravel()
        if velocity is None:
            velocity = np.zeros_like(center)
        velocity = np.asarray(velocity, dtype=float).ravel()
        if velocity.shape == (2,) and center.shape == (3,):
            velocity = np.append(velocity, 0.0)
        return cls(verts, center, velocity, height, name)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def z_range(self):
        if self.height is None:
            return None
        cz = self.center[2] if self.center.shape == (3,) else self.height / 2.0
        return cz - self.height / 2.0, cz + self.height / 2.0

    def at(self, t):
        """The obstacle translated to time ``t``."""
        if t == 0:
            return self
        shift = self.center_velocity * t
        return PolygonObstacle(
            self.vertices + shift[:2], self.center + shift, self.center_velocity, self.height, self.name
        )

    def circumradius(self):
        """Radius of the smallest circle about ``center`` containing the polygon."""
        return float(np.max(np.linalg.norm(self.vertices - self.center[:2], axis=1)))

    def contains(self, point):
        """Closed containment test (boundary counts as inside)."""
        return _strict_inside_margin(np.asarray(point, dtype=float)[:2], self.vertices) >= 0.0


def _strict_inside_margin(point, verts):
    # Minimum over edges of cross(edge, point - start); >0 strictly inside a CCW polygon.
    edges = np.roll(verts, -1, axis=0) - verts
    return float(np.min(_cross(edges, point - verts)))


@dataclass(frozen=True)
class EgoDisc:
    body_center: np.ndarray
    width: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.width) and self.width >= 0.0):
            raise ValueError("ego width must be finite and non-negative")
        object.__setattr__(self, "body_center", np.asarray(self.body_center, dtype=float).ravel())


@dataclass(frozen=True, eq=False)
class ConeFrame:
    """Cone quantities for one ego/obstacle pair.

    ``k`` and ``m`` run from the ego body center to the widened chord
    endpoints; ``k`` makes the larger angle with ``p_rel``. For 3-D frames
    ``projection`` is the constant 3x3 plane projector and all vectors are
    already projected.
    """

    p_rel: np.ndarray
    v_rel: np.ndarray
    k: np.ndarray
    m: np.ndarray
    cos_phi: float
    vertex_a: np.ndarray
    vertex_b: np.ndarray
    target: np.ndarray
    projection: Optional[np.ndarray] = field(default=None)

    @property
    def k_hat(self):
        return self.k / np.linalg.norm(self.k)


def _tangent_indices(verts, ego):
    # Bearings measured from the ego->centroid ray; for a convex polygon seen
    # from outside they all fall inside (-pi, pi), so the extremes are the
    # tangent vertices.
    d = verts - ego
    ref = verts.mean(axis=0) - ego
    rel = np.arctan2(_cross(ref, d), d @ ref)
    return int(np.argmax(rel)), int(np.argmin(rel))


def select_cone_vertex_indices(obstacle, ego_center):
    """Indices of the two tangent vertices, closer-to-ego first."""
    ego = np.asarray(ego_center, dtype=float)[:2]
    verts = obstacle.vertices
    if _strict_inside_margin(ego, verts) >= 0.0:
        raise EgoInsidePolygon()
    i, j = _tangent_indices(verts, ego)
    di = np.linalg.norm(verts[i] - ego)
    dj = np.linalg.norm(verts[j] - ego)
    if dj < di or (dj == di and j < i):
        i, j = j, i
    return i, j


def select_cone_vertices(obstacle, ego_center):
    """The two tangent vertices of ``obstacle`` seen from ``ego_center``.

    Every other vertex lies inside the angular sector they span. Returned
    closer-to-ego first.
    """
    i, j = select_cone_vertex_indices(obstacle, ego_center)
    return obstacle.vertices[i].copy(), obstacle.vertices[j].copy()


def _widened_pair(va, vb, ego, width, ia, ib):
    """Return (target, k, m) from an ordered tangent pair."""
    chord = va - vb
    length = np.linalg.norm(chord)
    if length == 0.0:
        raise DegenerateCone("tangent vertices coincide")
    u = chord / length
    ea = va + 0.5 * width * u
    eb = vb - 0.5 * width * u
    if np.array_equal(ea, eb):
        raise DegenerateCone("extended vertices coincide")
    target = 0.5 * (va + vb)
    p = target - ego
    ka = ea - ego
    kb = eb - ego
    pn = np.linalg.norm(p)
    ca = (p @ ka) / (pn * np.linalg.norm(ka))
    cb = (p @ kb) / (pn * np.linalg.norm(kb))
    if abs(ca - cb) <= ANGLE_TIE_TOL:
        da = np.linalg.norm(va - ego)
        db = np.linalg.norm(vb - ego)
        a_first = da < db or (da == db and ia < ib)
    else:
        a_first = ca < cb
    return (target, ka, kb) if a_first else (target, kb, ka)


def cos_angle(a, b):
    return float((a @ b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def build_cone_frame(obstacle, ego, ego_velocity=None):
    """Polygonal cone of ``obstacle`` for ``ego`` (an :class:`EgoDisc`).

    ``v_rel`` is the plain kinematic difference ``center_velocity - ego_velocity``;
    vehicle models supply their own body-center velocity through
    :mod:`polycone.barrier`.
    """
    ego_c = np.asarray(ego.body_center, dtype=float)[:2]
    ia, ib = select_cone_vertex_indices(obstacle, ego_c)
    va, vb = obstacle.vertices[ia], obstacle.vertices[ib]
    target, k, m = _widened_pair(va, vb, ego_c, ego.width, ia, ib)
    p = target - ego_c
    if ego_velocity is None:
        ego_velocity = np.zeros(2)
    v = obstacle.center_velocity[:2] - np.asarray(ego_velocity, dtype=float)[:2]
    return ConeFrame(p, v, k, m, cos_angle(p, k), va.copy(), vb.copy(), target)


def _vertical_section(obstacle, ego_xy):
    """Horizontal unit direction toward the obstacle and the (s, z) rectangle
    swept by the footprint in the vertical plane through the ego."""
    d = obstacle.center[:2] - ego_xy
    dn = np.linalg.norm(d)
    d = d / dn if dn > 0 else np.array([1.0, 0.0])
    s = (obstacle.vertices - ego_xy) @ d
    z_lo, z_hi = obstacle.z_range
    s_lo, s_hi = float(s.min()), float(s.max())
    rect = np.array([[s_lo, z_lo], [s_hi, z_lo], [s_hi, z_hi], [s_lo, z_hi]])
    return d, rect


def _lift_vertical(vec2, d):
    return np.array([vec2[0] * d[0], vec2[0] * d[1], vec2[1]])


def project_3d(obstacle, ego_center_3d, width=0.0, ego_velocity=None):
    """Horizontal and vertical projected cones of an extruded obstacle.

    Returns ``(frame_h, frame_v, chosen)``; either frame is ``None`` when the
    ego lies inside that plane's cross-section. ``chosen`` is the plane with
    the shorter ``k`` (horizontal on ties).
    """
    if obstacle.height is None:
        raise InvalidPolygon("project_3d needs an obstacle with a height")
    ego = np.asarray(ego_center_3d, dtype=float)
    if ego_velocity is None:
        ego_velocity = np.zeros(3)
    cdot = obstacle.center_velocity
    if cdot.shape == (2,):
        cdot = np.append(cdot, 0.0)
    vdiff = cdot - np.asarray(ego_velocity, dtype=float)
    z_lo, z_hi = obstacle.z_range

    frame_h = None
    if not obstacle.contains(ego[:2]):
        f2 = build_cone_frame(obstacle, EgoDisc(ego[:2], width))
        P = np.diag([1.0, 1.0, 0.0])
        lift = lambda a: np.array([a[0], a[1], 0.0])  # noqa: E731
        frame_h = ConeFrame(
            lift(f2.p_rel), P @ vdiff, lift(f2.k), lift(f2.m), f2.cos_phi,
            np.append(f2.vertex_a, ego[2]), np.append(f2.vertex_b, ego[2]),
            np.append(f2.target, ego[2]), P,
        )

    frame_v = None
    d, rect = _vertical_section(obstacle, ego[:2])
    rect_ego = np.array([0.0, ego[2]])
    if _strict_inside_margin(rect_ego, rect) < 0.0:
        section = PolygonObstacle(rect, rect.mean(axis=0), np.zeros(2))
        f2 = build_cone_frame(section, EgoDisc(rect_ego, width))
        ez = np.array([0.0, 0.0, 1.0])
        dd = np.append(d, 0.0)
        P = np.outer(dd, dd) + np.outer(ez, ez)
        base = np.array([ego[0], ego[1], 0.0])
        frame_v = ConeFrame(
            _lift_vertical(f2.p_rel, d), P @ vdiff, _lift_vertical(f2.k, d), _lift_vertical(f2.m, d),
            f2.cos_phi, base + _lift_vertical(f2.vertex_a, d), base + _lift_vertical(f2.vertex_b, d),
            base + _lift_vertical(f2.target, d), P,
        )

    if frame_h is None and frame_v is None:
        raise EgoInsideVolume("ego center is inside the obstacle volume")
    if frame_v is None:
        return frame_h, frame_v, HORIZONTAL
    if frame_h is None:
        return frame_h, frame_v, VERTICAL
    chosen = HORIZONTAL if np.linalg.norm(frame_h.k) <= np.linalg.norm(frame_v.k) else VERTICAL
    return frame_h, frame_v, chosen


def _point_segment_distance(p, a, b):
    ab = b - a
    denom = np.einsum("...i,...i->...", ab, ab)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.einsum("...i,...i->...", p - a, ab) / denom
    s = np.where(denom > 0, np.clip(s, 0.0, 1.0), 0.0)
    closest = a + s[..., None] * ab
    return np.linalg.norm(p - closest, axis=-1)


def distance_to_polygon(point, obstacle):
    """Signed distance from ``point`` to the polygon boundary (negative inside)."""
    p = np.asarray(point, dtype=float)[:2]
    verts = obstacle.vertices
    dist = float(np.min(_point_segment_distance(p, verts, np.roll(verts, -1, axis=0))))
    return -dist if _strict_inside_margin(p, verts) > 0.0 else dist


class ObstacleField:
    """Vectorized cone construction over a fixed set of obstacles.

    Polygons are padded to a common vertex count by repeating their last
    vertex (a zero-length edge changes neither containment nor tangents).
    This is the per-step fast path used by the safety filter; the scalar
    functions above are the reference.
    """

    def __init__(self, obstacles):
        self.obstacles = list(obstacles)
        n = len(self.obstacles)
        self.size = n
        nmax = max((o.n_vertices for o in self.obstacles), default=3)
        V = np.zeros((n, nmax, 2))
        for i, o in enumerate(self.obstacles):
            V[i, : o.n_vertices] = o.vertices
            V[i, o.n_vertices:] = o.vertices[-1]
        self.vertices0 = V
        self.centroid0 = V.mean(axis=1) if n else np.zeros((0, 2))
        self.center0 = np.array([o.center[:2] for o in self.obstacles]).reshape(n, 2)
        self.velocity = np.array([o.center_velocity[:2] for o in self.obstacles]).reshape(n, 2)
        vz = [o.center_velocity[2] if o.center_velocity.shape == (3,) else 0.0 for o in self.obstacles]
        self.velocity_z = np.array(vz, dtype=float)
        self.velocity3 = np.column_stack([self.velocity, self.velocity_z]) if n else np.zeros((0, 3))
        self.counts = np.array([o.n_vertices for o in self.obstacles], dtype=int)
        self.circumradius = np.array([o.circumradius() for o in self.obstacles], dtype=float)
        self.is_3d = n > 0 and all(o.height is not None for o in self.obstacles)
        if self.is_3d:
            self.z_range0 = np.array([o.z_range for o in self.obstacles], dtype=float)

    def __len__(self):
        return self.size

    def vertices_at(self, t):
        return self.vertices0 + (self.velocity * t)[:, None, :]

    def centers_at(self, t):
        return self.center0 + self.velocity * t

    def z_range_at(self, t):
        return self.z_range0 + (self.velocity_z * t)[:, None]

    def signed_distances(self, point, t=0.0, backend="compiled"):
        """Signed distance from a 2-D point to every obstacle at time ``t``."""
        p = np.asarray(point, dtype=float)[:2]
        V = self.vertices_at(t)
        if self.size and backend == "compiled":
            return _kernels.signed_distances(V, float(p[0]), float(p[1]))
        W = np.roll(V, -1, axis=1)
        dist = _point_segment_distance(p, V, W).min(axis=1)
        E = W - V
        cr = np.where(np.any(E != 0.0, axis=2), _cross(E, p - V), np.inf)
        inside = cr.min(axis=1) > 0.0
        return np.where(inside, -dist, dist)

    def cones(self, ego, t, width, V=None):
        """Batched planar cone construction.

        Returns a dict with ``inside`` (bool, ego in or on polygon), and for
        the remaining rows ``target``, ``k``, ``m``, ``cos_phi``. Rows where
        ``inside`` is set hold NaN.
        """
        if V is None:
            V = self.vertices_at(t)
        return batch_cones(V, np.asarray(ego, dtype=float)[:2], width)


def batch_cones(V, ego, width):
    """Cone construction for a stack of CCW polygons ``V`` of shape (N, n, 2)."""
    n = V.shape[0]
    rows = np.arange(n)
    W = np.roll(V, -1, axis=1)
    inside = _cross(W - V, ego - V).min(axis=1) >= 0.0
    d = V - ego
    ref = V.mean(axis=1) - ego
    rel = np.arctan2(
        ref[:, None, 0] * d[..., 1] - ref[:, None, 1] * d[..., 0],
        ref[:, None, 0] * d[..., 0] + ref[:, None, 1] * d[..., 1],
    )
    i1 = rel.argmax(axis=1)
    i2 = rel.argmin(axis=1)
    v1 = V[rows, i1]
    v2 = V[rows, i2]
    d1 = np.linalg.norm(v1 - ego, axis=1)
    d2 = np.linalg.norm(v2 - ego, axis=1)
    swap = (d2 < d1) | ((d2 == d1) & (i2 < i1))
    ia = np.where(swap, i2, i1)
    ib = np.where(swap, i1, i2)
    va = np.where(swap[:, None], v2, v1)
    vb = np.where(swap[:, None], v1, v2)
    da = np.minimum(d1, d2)
    db = np.maximum(d1, d2)
    chord = va - vb
    length = np.linalg.norm(chord, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = chord / length[:, None]
    ea = va + 0.5 * width * u
    eb = vb - 0.5 * width * u
    target = 0.5 * (va + vb)
    p = target - ego
    ka = ea - ego
    kb = eb - ego
    pn = np.linalg.norm(p, axis=1)
    kan = np.linalg.norm(ka, axis=1)
    kbn = np.linalg.norm(kb, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ca = np.einsum("ij,ij->i", p, ka) / (pn * kan)
        cb = np.einsum("ij,ij->i", p, kb) / (pn * kbn)
    tie = np.abs(ca - cb) <= ANGLE_TIE_TOL
    a_first = np.where(tie, (da < db) | ((da == db) & (ia < ib)), ca < cb)
    k = np.where(a_first[:, None], ka, kb)
    m = np.where(a_first[:, None], kb, ka)
    cos_phi = np.where(a_first, ca, cb)
    bad = inside | (length == 0.0)
    if np.any(bad):
        target = np.where(bad[:, None], np.nan, target)
        k = np.where(bad[:, None], np.nan, k)
        m = np.where(bad[:, None], np.nan, m)
        cos_phi = np.where(bad, np.nan, cos_phi)
    return {"inside": inside, "target": target, "k": k, "m": m, "cos_phi": cos_phi,
            "vertex_a": va, "vertex_b": vb}

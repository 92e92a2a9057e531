"""Cone barrier values and their Lie derivatives.

For a cone with axis ``p_rel`` and edge direction ``k``

    h = <p_rel, v_rel> + ||p_rel|| ||v_rel|| cos(phi),   cos(phi) = <p_rel, k> / (||p_rel|| ||k||)

which is ``<p, v> + ||v|| <p, k_hat>``. Differentiating with ``k_hat`` frozen
and ``p_dot = v`` gives

    h_dot = ||v||^2 + ||v|| <v, k_hat> + <q, v_dot>,   q = p + v <p, k_hat> / ||v||

The obstacle has constant velocity, so ``v_dot = -P (a0 + B u)`` where
``a0 + B u`` is the body-center acceleration of the vehicle and ``P`` the
(constant) plane projector. Hence ``L_f h = ||v||^2 + ||v|| <v, k_hat> - <q, P a0>``
and ``L_g h = -q^T P B``.

The circular baseline uses ``cos(phi) = sqrt(||p||^2 - r^2) / ||p||`` and is
differentiated exactly (no frozen quantity).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .dynamics import rotation_zyx
from .errors import EgoInsideVolume, InsideVirtualObstacle, VanishingRelativeVelocity
from .geometry import HORIZONTAL, VERTICAL, ConeFrame, EgoDisc, batch_cones, build_cone_frame, project_3d

EPS_V = 1e-6


@dataclass(frozen=True)
class ClassK:
    """Linear extended class-K function ``kappa(h) = gamma * h``."""

    gamma: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def __call__(self, h):
        return self.gamma * h


@dataclass(frozen=True, eq=False)
class BarrierEval:
    h: float
    lfh: float
    lgh: np.ndarray

    def hdot(self, u):
        return self.lfh + float(self.lgh @ np.asarray(u, dtype=float))

    def psi(self, u, kappa=ClassK()):
        """Switching value ``h_dot(x, u) + kappa(h)``."""
        return self.hdot(u) + kappa(self.h)


def polyc2bf_h(frame):
    p, v = frame.p_rel, frame.v_rel
    return float(p @ v + np.linalg.norm(p) * np.linalg.norm(v) * frame.cos_phi)


def c3bf_cos_phi(p_rel, r):
    pn = np.linalg.norm(p_rel)
    if pn < r or pn == 0.0:
        raise InsideVirtualObstacle(f"||p_rel|| = {pn:.6g} < r = {r:.6g}")
    return float(np.sqrt(pn * pn - r * r) / pn)


def c3bf_h(p_rel, v_rel, r):
    """Circular collision-cone barrier (the baseline).

    On the circle itself ``cos(phi) = 0`` and ``h = <p, v>``; strictly inside
    raises. The constraint row (:func:`c3bf_constraint`) also needs
    ``||p|| > r`` since ``L_f h`` divides by ``sqrt(||p||^2 - r^2)``.
    """
    p = np.asarray(p_rel, dtype=float)
    v = np.asarray(v_rel, dtype=float)
    pn = np.linalg.norm(p)
    if pn < r:
        raise InsideVirtualObstacle(f"||p_rel|| = {pn:.6g} < r = {r:.6g}")
    return float(p @ v + np.linalg.norm(v) * np.sqrt(pn * pn - r * r))


def cone_constraint(p, v, k_hat, a0, B, projection=None, eps_v=EPS_V, k_norm=None):
    """``BarrierEval`` for a cone given the body-center acceleration ``a0 + B u``.

    With ``k_norm`` given, ``L_f h`` also carries the rotation of ``k_hat``:
    ``k`` runs from the body center to a point moving with the obstacle, so
    ``k_dot = v`` and the extra drift term is ``||v|| <p, (I - k_hat k_hat^T) v> / ||k||``.
    """
    vn = np.linalg.norm(v)
    if vn <= eps_v:
        raise VanishingRelativeVelocity(f"||v_rel|| = {vn:.3g}")
    pk = p @ k_hat
    q = p + v * (pk / vn)
    if projection is not None:
        a0 = projection @ a0
        B = projection @ B
    h = p @ v + vn * pk
    vk = v @ k_hat
    lfh = v @ v + vn * vk - q @ a0
    if k_norm is not None:
        lfh += vn * (p @ v - pk * vk) / k_norm
    lgh = -(q @ B)
    return BarrierEval(float(h), float(lfh), lgh)


def khat_drift_term(p, v, k):
    """``<p, d(k_hat)/dt> ||v||`` with ``k_dot = v``."""
    return float(np.linalg.norm(v) * (p @ khat_rate(k, v)))


def c3bf_constraint(p, v, r, a0, B, projection=None, eps_v=EPS_V):
    vn = np.linalg.norm(v)
    if vn <= eps_v:
        raise VanishingRelativeVelocity(f"||v_rel|| = {vn:.3g}")
    pn2 = p @ p
    if pn2 <= r * r:
        raise InsideVirtualObstacle(f"||p_rel|| = {np.sqrt(pn2):.6g} <= r = {r:.6g}")
    s = np.sqrt(pn2 - r * r)
    q = p + v * (s / vn)
    if projection is not None:
        a0 = projection @ a0
        B = projection @ B
    h = p @ v + vn * s
    lfh = v @ v + vn * (p @ v) / s - q @ a0
    lgh = -(q @ B)
    return BarrierEval(float(h), float(lfh), lgh)


def khat_rate(k, k_dot):
    """Time derivative of ``k / ||k||``."""
    kn = np.linalg.norm(k)
    kh = k / kn
    return (k_dot - kh * (kh @ k_dot)) / kn


def full_hdot(p, v, k_hat, v_dot, k_hat_dot):
    """Five-term ``h_dot`` including the rotation of ``k_hat``.

    With ``p_dot = v``:
    ``<v, v> + <p, v_dot> + <v, v_dot><p, k_hat>/||v|| + <v, k_hat>||v|| + <p, k_hat_dot>||v||``.
    """
    vn = np.linalg.norm(v)
    return float(
        v @ v
        + p @ v_dot
        + (v @ v_dot) * (p @ k_hat) / vn
        + (v @ k_hat) * vn
        + (p @ k_hat_dot) * vn
    )


# --- unicycle -----------------------------------------------------------------

def unicycle_frame(model, x, obstacle, width=0.0, t=0.0):
    """Cone frame with ``p_rel``/``v_rel`` measured from the unicycle body center."""
    obs = obstacle.at(t)
    base = build_cone_frame(obs, EgoDisc(model.body_center(x), width))
    v_rel = obs.center_velocity[:2] - model.body_velocity(x)
    return ConeFrame(base.p_rel, v_rel, base.k, base.m, base.cos_phi, base.vertex_a, base.vertex_b, base.target)


def unicycle_rel_kinematics(model, x, obstacle, width=0.0, t=0.0):
    frame = unicycle_frame(model, x, obstacle, width, t)
    return frame.p_rel, frame.v_rel


def unicycle_lgh(model, x, frame, eps_v=EPS_V):
    """``L_g h`` row for the unicycle inputs ``(a, alpha)``, written out per input."""
    p, v = frame.p_rel, frame.v_rel
    vn = np.linalg.norm(v)
    if vn <= eps_v:
        raise VanishingRelativeVelocity(f"||v_rel|| = {vn:.3g}")
    q = p + v * (p @ frame.k_hat) / vn
    th = x[2]
    l = model.params.l
    return np.array([
        q @ np.array([-np.cos(th), -np.sin(th)]),
        q @ np.array([l * np.sin(th), -l * np.cos(th)]),
    ])


def unicycle_constraint(model, x, frame, eps_v=EPS_V):
    a0, B = model.body_acceleration(x)
    return cone_constraint(frame.p_rel, frame.v_rel, frame.k_hat, a0, B, eps_v=eps_v)


# --- point mass ----------------------------------------------------------------

def pointmass_frame(model, x, obstacle, width=0.0, t=0.0):
    obs = obstacle.at(t)
    return build_cone_frame(obs, EgoDisc(x[:2], width), ego_velocity=x[2:4])


def pointmass_constraint(x, frame, eps_v=EPS_V):
    """``BarrierEval`` for the double integrator (input map is the identity)."""
    return cone_constraint(frame.p_rel, frame.v_rel, frame.k_hat, np.zeros(2), np.eye(2), eps_v=eps_v)


# --- quadrotor -----------------------------------------------------------------

def quadrotor_frame(model, x, obstacle, width=0.0, t=0.0, plane=None):
    """Projected cone frame from the quadrotor body center.

    ``plane`` overrides the automatic horizontal/vertical choice.
    """
    obs = obstacle.at(t)
    center = model.body_center(x)
    fh, fv, chosen = project_3d(obs, center, width)
    if plane is not None:
        chosen = plane
    frame = fh if chosen == HORIZONTAL else fv
    if frame is None:
        raise EgoInsideVolume(f"no {chosen} cross-section visible from the ego")
    cdot = obs.center_velocity if obs.center_velocity.shape == (3,) else np.append(obs.center_velocity, 0.0)
    v_rel = frame.projection @ (cdot - model.body_velocity(x))
    return ConeFrame(frame.p_rel, v_rel, frame.k, frame.m, frame.cos_phi, frame.vertex_a,
                     frame.vertex_b, frame.target, frame.projection), chosen


def quadrotor_rel_kinematics(model, x, obstacle, width=0.0, t=0.0, plane=None):
    frame, _ = quadrotor_frame(model, x, obstacle, width, t, plane)
    return frame.p_rel, frame.v_rel


def quadrotor_lgh(model, x, frame, eps_v=EPS_V):
    """``L_g h`` row for the four propeller thrusts, one column per propeller.

    Column ``i`` of ``R @ [[0, Ll/Iyy, 0, -Ll/Iyy], [-Ll/Ixx, 0, Ll/Ixx, 0], [1/m]*4]``
    is the input direction of the body-center acceleration; ``v_rel``
    carries it with a minus sign.
    """
    p, v = frame.p_rel, frame.v_rel
    vn = np.linalg.norm(v)
    if vn <= eps_v:
        raise VanishingRelativeVelocity(f"||v_rel|| = {vn:.3g}")
    q = p + v * (p @ frame.k_hat) / vn
    prm = model.params
    Ixx, Iyy, _ = prm.I
    Ll = prm.arm_length * prm.l
    cols = np.array([
        [0.0, Ll / Iyy, 0.0, -Ll / Iyy],
        [-Ll / Ixx, 0.0, Ll / Ixx, 0.0],
        [1.0 / prm.mass] * 4,
    ])
    R = rotation_zyx(*x[6:9])
    return -(q @ (frame.projection @ (R @ cols)))


def quadrotor_constraint(model, x, frame, eps_v=EPS_V):
    a0, B = model.body_acceleration(x)
    return cone_constraint(frame.p_rel, frame.v_rel, frame.k_hat, a0, B, frame.projection, eps_v)


# --- per-model dispatch ---------------------------------------------------------

def model_frame(model, x, obstacle, width=0.0, t=0.0):
    if model.name == "unicycle":
        return unicycle_frame(model, x, obstacle, width, t)
    if model.name == "pointmass":
        return pointmass_frame(model, x, obstacle, width, t)
    return quadrotor_frame(model, x, obstacle, width, t)[0]


def model_constraint(model, x, obstacle, width=0.0, t=0.0, eps_v=EPS_V, khat_drift=False):
    """Scalar reference path: the cone constraint of one obstacle.

    ``khat_drift`` adds the rotation of ``k_hat`` to ``L_f h`` (see
    :func:`cone_constraint`); without it the cone is frozen.
    """
    frame = model_frame(model, x, obstacle, width, t)
    a0, B = model.body_acceleration(x)
    k_norm = np.linalg.norm(frame.k) if khat_drift else None
    return cone_constraint(frame.p_rel, frame.v_rel, frame.k_hat, a0, B, frame.projection, eps_v, k_norm)


# --- batched fast path ------------------------------------------------------------

def _batch_terms(p, v, k, a0, B, P, eps_v, khat_drift):
    """Vectorized cone_constraint over rows; rows with tiny ||v|| are flagged."""
    kn = np.linalg.norm(k, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        k_hat = k / kn[:, None]
    vn = np.linalg.norm(v, axis=1)
    ok = vn > eps_v
    safe_vn = np.where(ok, vn, 1.0)
    pk = np.einsum("ij,ij->i", p, k_hat)
    q = p + v * (pk / safe_vn)[:, None]
    h = np.einsum("ij,ij->i", p, v) + vn * pk
    if P is None:
        qa = q @ a0
        lgh = -(q @ B)
    else:
        Pa0 = P @ a0
        qa = np.einsum("ij,ij->i", q, Pa0)
        lgh = -np.einsum("ij,ijk->ik", q, P @ B)
    vk = np.einsum("ij,ij->i", v, k_hat)
    lfh = np.einsum("ij,ij->i", v, v) + vn * vk - qa
    if khat_drift:
        lfh = lfh + vn * (np.einsum("ij,ij->i", p, v) - pk * vk) / kn
    return h, lfh, lgh, ok


def _batch_c3bf_terms(p, v, r, a0, B, P, eps_v):
    vn = np.linalg.norm(v, axis=1)
    ok = vn > eps_v
    safe_vn = np.where(ok, vn, 1.0)
    pn2 = np.einsum("ij,ij->i", p, p)
    inside = pn2 <= r * r
    s = np.sqrt(np.where(inside, 1.0, pn2 - r * r))
    q = p + v * (s / safe_vn)[:, None]
    pv = np.einsum("ij,ij->i", p, v)
    h = pv + vn * s
    if P is None:
        qa = q @ a0
        lgh = -(q @ B)
    else:
        qa = np.einsum("ij,ij->i", q, P @ a0)
        lgh = -np.einsum("ij,ijk->ik", q, P @ B)
    lfh = np.einsum("ij,ij->i", v, v) + vn * pv / s - qa
    return h, lfh, lgh, ok, inside


class ConstraintBatch:
    """Barrier rows of every obstacle in a field for one state.

    ``h``, ``lfh`` are (N,), ``lgh`` is (N, m). ``usable`` marks rows that
    enter the QP (not culled, ``||v_rel|| > eps_v``). ``inside`` marks
    obstacles containing the ego (for the baseline: the virtual circle).
    """

    __slots__ = ("h", "lfh", "lgh", "usable", "inside", "culled", "plane")

    def __init__(self, h, lfh, lgh, usable, inside, culled, plane=None):
        self.h = h
        self.lfh = lfh
        self.lgh = lgh
        self.usable = usable
        self.inside = inside
        self.culled = culled
        self.plane = plane


def batch_constraints(model, x, field, t=0.0, width=0.0, kind="polyc2bf", cull_radius=np.inf, eps_v=EPS_V,
                      khat_drift=True, backend="compiled"):
    """All obstacle constraints for state ``x`` at time ``t``.

    Culling uses the distance from the body center to each polygon.
    ``backend="numpy"`` selects the vectorized reference implementation;
    the default runs the compiled kernels for the cone rows.
    """
    center = model.body_center(x)
    bvel = model.body_velocity(x)
    a0, B = model.body_acceleration(x)
    n = len(field)
    if n == 0:
        empty = np.zeros(0)
        return ConstraintBatch(empty, empty, np.zeros((0, model.input_dim)), np.zeros(0, bool),
                               np.zeros(0, bool), np.zeros(0, bool))
    V = field.vertices_at(t)
    compiled = backend == "compiled" and kind == "polyc2bf"
    if backend not in ("compiled", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if model.space_dim == 2:
        vrel = field.velocity - bvel
        culled = np.zeros(n, bool)
        if np.isfinite(cull_radius):
            culled = field.signed_distances(center, t) > cull_radius
        if compiled:
            h, lfh, lgh, ok, inside = _kernels.planar_constraints(V, center, float(width), vrel, a0, B,
                                                                  float(eps_v), bool(khat_drift))
        elif kind == "c3bf":
            p = field.centers_at(t) - center
            r = field.circumradius + 0.5 * width
            h, lfh, lgh, ok, inside = _batch_c3bf_terms(p, vrel, r, a0, B, None, eps_v)
        else:
            cones = batch_cones(V, center, width)
            inside = cones["inside"]
            p = cones["target"] - center
            h, lfh, lgh, ok = _batch_terms(p, vrel, cones["k"], a0, B, None, eps_v, khat_drift)
        usable = ok & ~culled & ~inside
        return ConstraintBatch(h, lfh, lgh, usable, inside, culled)
    return _batch_constraints_3d(model, center, bvel, a0, B, field, V, t, width, kind, cull_radius, eps_v,
                                 khat_drift, backend)


def _batch_constraints_3d(model, center, bvel, a0, B, field, V, t, width, kind, cull_radius, eps_v, khat_drift,
                          backend):
    n = len(field)
    exy = center[:2]
    ez = center[2]
    zr = field.z_range_at(t)
    cdot = np.column_stack([field.velocity, field.velocity_z])
    culled = np.zeros(n, bool)
    if np.isfinite(cull_radius):
        culled = field.signed_distances(exy, t) > cull_radius

    if kind == "polyc2bf" and backend == "compiled":
        cdot = np.column_stack([field.velocity, field.velocity_z])
        h, lfh, lgh, ok, inside, plane = _kernels.spatial_constraints(
            V, field.centers_at(t), zr, cdot, center, float(width), bvel, a0, B, float(eps_v), bool(khat_drift))
        usable = ok & ~culled & ~inside
        return ConstraintBatch(h, lfh, lgh, usable, inside, culled, plane)

    if kind == "c3bf":
        # Baseline treats each obstacle as a vertical cylinder: horizontal projection only.
        P = np.diag([1.0, 1.0, 0.0])
        p = np.column_stack([field.centers_at(t) - exy, np.zeros(n)])
        v = (cdot - bvel) @ P
        r = field.circumradius + 0.5 * width
        h, lfh, lgh, ok, inside = _batch_c3bf_terms(p, v, r, a0, B, np.broadcast_to(P, (n, 3, 3)), eps_v)
        usable = ok & ~culled & ~inside
        return ConstraintBatch(h, lfh, lgh, usable, inside, culled, np.zeros(n, int))

    hc = batch_cones(V, exy, width)
    # vertical plane through the ego toward each obstacle center
    dvec = field.centers_at(t) - exy
    dn = np.linalg.norm(dvec, axis=1)
    d = np.where(dn[:, None] > 0, dvec / np.where(dn > 0, dn, 1.0)[:, None], np.array([1.0, 0.0]))
    s = np.einsum("inj,ij->in", V - exy, d)
    s_lo, s_hi = s.min(axis=1), s.max(axis=1)
    rect = np.stack([
        np.column_stack([s_lo, zr[:, 0]]), np.column_stack([s_hi, zr[:, 0]]),
        np.column_stack([s_hi, zr[:, 1]]), np.column_stack([s_lo, zr[:, 1]]),
    ], axis=1)
    vc = batch_cones(rect, np.array([0.0, ez]), width)

    in_h = hc["inside"]
    in_v = vc["inside"]
    kh = np.column_stack([hc["k"], np.zeros(n)])
    ph = np.column_stack([hc["target"] - exy, np.zeros(n)])
    kv = np.column_stack([vc["k"][:, :1] * d, vc["k"][:, 1:]])
    pv = np.column_stack([vc["target"][:, :1] * d, vc["target"][:, 1:] - ez])
    nkh = np.where(in_h, np.inf, np.linalg.norm(kh, axis=1))
    nkv = np.where(in_v, np.inf, np.linalg.norm(kv, axis=1))
    use_h = nkh <= nkv
    inside = in_h & in_v
    use_h = use_h | inside  # placeholder rows, masked below

    Ph = np.diag([1.0, 1.0, 0.0])
    d3 = np.column_stack([d, np.zeros(n)])
    Pv = np.einsum("ij,ik->ijk", d3, d3)
    Pv[:, 2, 2] = 1.0
    P = np.where(use_h[:, None, None], Ph, Pv)
    p = np.where(use_h[:, None], ph, pv)
    k = np.where(use_h[:, None], kh, kv)
    v = np.einsum("ijk,ik->ij", P, cdot - bvel)
    h, lfh, lgh, ok = _batch_terms(p, v, k, a0, B, P, eps_v, khat_drift)
    usable = ok & ~culled & ~inside
    plane = np.where(use_h, 0, 1)
    return ConstraintBatch(h, lfh, lgh, usable, inside, culled, plane)


PLANE_NAMES = {0: HORIZONTAL, 1: VERTICAL}

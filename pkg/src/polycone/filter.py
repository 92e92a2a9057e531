"""Minimum-norm CBF-QP safety filter.

Solves ``min ||u - pi||^2  s.t.  a_i u >= b_i`` (plus an optional input box),
where each row comes from a barrier: ``a_i = L_g h_i`` and
``b_i = -L_f h_i - kappa(h_i)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from . import _kernels as _k
from ._kernels import project_dual
from .barrier import EPS_V, ClassK, batch_constraints
from .errors import EgoInsidePolygon, Infeasible, InsideVirtualObstacle, MaxIterations, ZeroGradient

EPS_GRAD = 1e-10
FEAS_TOL = 1e-12


@dataclass
class FilterProblem:
    reference: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.reference = np.asarray(self.reference, dtype=float).ravel()
        m = self.reference.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, m)
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.A.shape[0] != self.b.size:
            raise ValueError("A and b disagree on the number of constraints")
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b))):
            raise ValueError("constraint rows must be finite")
        if self.lower is not None:
            self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (m,)).copy()
        if self.upper is not None:
            self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (m,)).copy()

    @classmethod
    def from_barriers(cls, reference, evals, kappa=ClassK(), lower=None, upper=None):
        A = np.array([e.lgh for e in evals], dtype=float).reshape(len(evals), -1)
        b = np.array([-e.lfh - kappa(e.h) for e in evals], dtype=float)
        return cls(reference, A, b, lower, upper)

    @property
    def has_bounds(self):
        return self.lower is not None or self.upper is not None

    def psi(self):
        """``h_dot(x, pi) + kappa(h)`` per constraint, i.e. ``a_i pi - b_i``."""
        return self.A @ self.reference - self.b

    def stacked(self):
        """All inequality rows ``G u >= c`` including the box."""
        m = self.reference.size
        G, c = [self.A], [self.b]
        if self.lower is not None:
            keep = np.isfinite(self.lower)
            G.append(np.eye(m)[keep])
            c.append(self.lower[keep])
        if self.upper is not None:
            keep = np.isfinite(self.upper)
            G.append(-np.eye(m)[keep])
            c.append(-self.upper[keep])
        return np.vstack(G), np.concatenate(c)


@dataclass
class FilterResult:
    u_star: np.ndarray
    psi: np.ndarray
    active: np.ndarray
    fallback_used: bool = False
    most_violated: Optional[int] = None
    h: np.ndarray = field(default_factory=lambda: np.zeros(0))
    violation: float = 0.0


def solve_closed_form(problem):
    """Single constraint, unbounded input: the explicit switching law."""
    if problem.A.shape[0] != 1 or problem.has_bounds:
        raise ValueError("closed form needs exactly one constraint and no input bounds")
    pi = problem.reference
    a = problem.A[0]
    psi = float(a @ pi - problem.b[0])
    if psi >= 0.0:
        return FilterResult(pi.copy(), np.array([psi]), np.array([False]))
    aa = float(a @ a)
    if np.sqrt(aa) < EPS_GRAD:
        raise ZeroGradient(f"||L_g h|| = {np.sqrt(aa):.3g} with psi = {psi:.6g}")
    return FilterResult(pi - a * (psi / aa), np.array([psi]), np.array([True]))


def _project(G, c, x0, max_iter):
    """Dual active-set (Goldfarb-Idnani) projection of ``x0`` onto ``{G x >= c}``.

    Returns ``(x, multipliers, active_index_list)``.
    """
    x, lam, act, _, status = project_dual(np.ascontiguousarray(G, dtype=float), np.ascontiguousarray(c, dtype=float),
                                          np.ascontiguousarray(x0, dtype=float), int(max_iter), FEAS_TOL)
    if status == 1:
        raise Infeasible("constraint set is empty", most_violated=int(act[0]))
    if status == 2:
        raise MaxIterations(f"no convergence in {max_iter} iterations")
    return x, lam, list(act)


def solve_active_set(problem, max_iter=None):
    """Exact minimizer of ``||u - pi||^2`` over the constraints and the box.

    Raises :class:`Infeasible` when the feasible set is empty.
    """
    m = problem.reference.size
    G, c = problem.stacked()
    psi = problem.psi()
    nrows = problem.A.shape[0]
    if max_iter is None:
        max_iter = 50 * max(m, 1) + 2 * G.shape[0]
    if G.shape[0] == 0:
        return FilterResult(problem.reference.copy(), psi, np.zeros(0, bool))
    u, lam, act = _project(G, c, problem.reference, max_iter)
    active = np.zeros(nrows, bool)
    for j, l in zip(act, lam):
        if j < nrows and l > 0:
            active[j] = True
    return FilterResult(u, psi, active)


def least_violation(problem):
    """Input minimizing the largest constraint violation, then the distance to ``pi``.

    Returns ``(u, t_star, index_of_most_violated)``.
    """
    nrows = problem.A.shape[0]
    m = problem.reference.size
    bounds = [(None, None)] * m
    if problem.lower is not None or problem.upper is not None:
        lo = problem.lower if problem.lower is not None else np.full(m, -np.inf)
        hi = problem.upper if problem.upper is not None else np.full(m, np.inf)
        bounds = [(None if not np.isfinite(a) else a, None if not np.isfinite(b) else b) for a, b in zip(lo, hi)]
    A = problem.A
    # variables [u, t]: minimize t  s.t.  a_i u + t >= b_i,  t >= 0
    res = linprog(
        np.r_[np.zeros(m), 1.0],
        A_ub=-np.hstack([A, np.ones((nrows, 1))]),
        b_ub=-problem.b,
        bounds=bounds + [(0.0, None)],
        method="highs",
    )
    if res.status != 0:
        raise Infeasible(f"least-violation LP failed: {res.message}")
    t_star = float(res.x[-1])
    relaxed = FilterProblem(problem.reference, A, problem.b - t_star * (1.0 + 1e-9) - 1e-12,
                            problem.lower, problem.upper)
    u = solve_active_set(relaxed).u_star
    worst = int(np.argmax(problem.b - A @ u)) if nrows else None
    return u, t_star, worst


def solve(problem):
    """Dispatch: closed form for one unbounded constraint, active set otherwise."""
    if problem.A.shape[0] == 0 and not problem.has_bounds:
        return FilterResult(problem.reference.copy(), np.zeros(0), np.zeros(0, bool))
    if problem.A.shape[0] == 1 and not problem.has_bounds:
        return solve_closed_form(problem)
    if problem.A.shape[0] and np.all(problem.psi() >= 0.0) and not problem.has_bounds:
        return FilterResult(problem.reference.copy(), problem.psi(), np.zeros(problem.A.shape[0], bool))
    return solve_active_set(problem)


@dataclass
class FilterConfig:
    """Safety-filter settings for one vehicle.

    ``kind`` is ``"polyc2bf"``, ``"c3bf"`` or ``"none"``.
    """

    kind: str = "polyc2bf"
    gamma: float = 1.0
    width: float = 0.0
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    cull_radius: float = 50.0
    eps_v: float = EPS_V
    khat_drift: bool = True
    backend: str = "compiled"

    def __post_init__(self):
        if self.kind not in ("polyc2bf", "c3bf", "none"):
            raise ValueError(f"unknown filter kind {self.kind!r}")
        if self.backend not in ("compiled", "numpy"):
            raise ValueError(f"unknown backend {self.backend!r}")
        ClassK(self.gamma)
        if self.lower is not None:
            self.lower = np.asarray(self.lower, dtype=float)
        if self.upper is not None:
            self.upper = np.asarray(self.upper, dtype=float)


def filter_step(model, x, field, reference, config, t=0.0):
    """Filter ``reference`` for state ``x`` against every obstacle in ``field``.

    ``psi`` and ``h`` in the result are per obstacle (NaN for rows that were
    culled or dropped because ``||v_rel||`` vanished). Raises
    :class:`EgoInsidePolygon` / :class:`InsideVirtualObstacle` if the ego is
    inside an obstacle (or a baseline virtual circle); with bounds and an
    empty feasible set the least-violation input is returned with
    ``fallback_used`` set.
    """
    reference = np.asarray(reference, dtype=float)
    n = len(field)
    if config.kind == "none" or n == 0:
        psi = np.full(n, np.nan)
        h = np.full(n, np.nan)
        if config.kind == "none" and n:
            cb = batch_constraints(model, x, field, t, config.width, "polyc2bf", config.cull_radius, config.eps_v,
                                   config.khat_drift)
            h = np.where(cb.inside, np.nan, cb.h)
        return FilterResult(reference.copy(), psi, np.zeros(n, bool), h=h)

    if config.kind == "polyc2bf" and config.backend == "compiled" and config.lower is None and config.upper is None:
        return _compiled_step(model, x, field, reference, config, t)

    cb = batch_constraints(model, x, field, t, config.width, config.kind, config.cull_radius, config.eps_v,
                           config.khat_drift, config.backend)
    if np.any(cb.inside & ~cb.culled):
        idx = int(np.flatnonzero(cb.inside & ~cb.culled)[0])
        if config.kind == "c3bf":
            raise InsideVirtualObstacle(f"ego inside virtual circle of obstacle {idx}", obstacle_index=idx)
        raise EgoInsidePolygon(f"ego inside obstacle {idx}", obstacle_index=idx)
    rows = np.flatnonzero(cb.usable)
    A = cb.lgh[rows]
    b = -cb.lfh[rows] - config.gamma * cb.h[rows]
    bounded = config.lower is not None or config.upper is not None
    fallback = False
    worst = None
    violation = 0.0
    res = None
    if not bounded:
        # fast paths of solve() without re-validating the rows
        row_psi = A @ reference - b
        if np.all(row_psi >= 0.0):
            res = FilterResult(reference.copy(), row_psi, np.zeros(len(rows), bool))
        elif len(rows) == 1:
            res = solve_closed_form(FilterProblem(reference, A, b))
    if res is None:
        problem = FilterProblem(reference, A, b, config.lower, config.upper)
        try:
            res = solve(problem)
        except Infeasible:
            u, violation, worst_row = least_violation(problem)
            worst = int(rows[worst_row]) if worst_row is not None else None
            res = FilterResult(u, problem.psi(), np.zeros(len(rows), bool))
            fallback = True
    psi = np.full(n, np.nan)
    psi[rows] = res.psi
    active = np.zeros(n, bool)
    active[rows] = res.active
    h = np.full(n, np.nan)
    h[~cb.inside] = cb.h[~cb.inside]
    return FilterResult(res.u_star, psi, active, fallback, worst, h, violation)


def _compiled_step(model, x, field, reference, config, t):
    """Unbounded PolyC2BF step: rows and QP in one compiled call."""
    m = reference.size
    center, bvel, a0, B = model.body_kinematics(x)
    prm = np.array([t, config.width, config.eps_v, float(config.khat_drift), config.gamma, config.cull_radius,
                    1.0, 50 * m + 2 * len(field), FEAS_TOL, EPS_GRAD])
    if model.space_dim == 3:
        u, out, status, row = _k.spatial_step(field.vertices0, field.velocity3, field.center0, field.z_range0,
                                              center, bvel, a0, B, reference, prm)
    else:
        u, out, status, row = _k.planar_step(field.vertices0, field.velocity, center, bvel, a0, B, reference, prm)
    flags = out[:, _k.ROW_FLAGS].astype(np.int64)
    hit = ((flags & _k.FLAG_INSIDE) > 0) & ((flags & _k.FLAG_CULLED) == 0)
    if np.any(hit):
        idx = int(np.flatnonzero(hit)[0])
        raise EgoInsidePolygon(f"ego inside obstacle {idx}", obstacle_index=idx)
    psi = out[:, _k.ROW_PSI]
    h = out[:, _k.ROW_H]
    if status == _k.STEP_OK:
        return FilterResult(u, psi, (flags & _k.FLAG_ACTIVE) > 0, h=h)
    if status == _k.STEP_ZERO_GRADIENT:
        raise ZeroGradient(f"||L_g h|| below {EPS_GRAD} for obstacle {row} with psi = {psi[row]:.6g}")
    if status == _k.STEP_MAX_ITER:
        raise MaxIterations("active set did not converge")
    rows = np.flatnonzero(flags & _k.FLAG_USABLE)
    A = out[rows, _k.ROW_LGH:_k.ROW_LGH + m]
    b = -out[rows, _k.ROW_LFH] - config.gamma * out[rows, _k.ROW_H]
    u, violation, worst_row = least_violation(FilterProblem(reference, A, b))
    worst = int(rows[worst_row]) if worst_row is not None else None
    return FilterResult(u, psi, np.zeros(len(field), bool), True, worst, h, violation)

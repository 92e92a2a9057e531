"""Acceptance criteria 1-8.

Each test prints (and records for the terminal summary) one PASS/FAIL line.
Tolerances are fixed by the criteria; nothing here is tuned to make a
criterion pass.
"""
import time

import numpy as np
import pytest
from oracles import (
    brute_force_tangent_pair,
    frozen_h,
    projection_oracle,
    random_input,
    random_outside_point,
    random_polygon,
    sample_case,
)

from polycone.barrier import model_constraint
from polycone.dynamics import PointMass, Quadrotor, Unicycle, UnicycleParams
from polycone.filter import FilterProblem, solve_active_set, solve_closed_form
from polycone.geometry import EgoDisc, build_cone_frame, select_cone_vertex_indices
from polycone.sim import FILTER_FAILURE, REACHED, builtin, builtin_scenarios, random_cluttered_scenario, run

MODELS = [Unicycle(UnicycleParams(0.2)), PointMass(), Quadrotor()]
N_RANDOM = 100


@pytest.fixture(scope="module")
def suite_runs():
    """All builtin PolyC2BF scenes plus 100 seeded random clutter scenes."""
    run(builtin("narrow-corridor"))  # compile outside the timed region
    start = time.perf_counter()
    runs = [(s, run(s)) for s in builtin_scenarios()]
    for seed in range(N_RANDOM):
        model = "unicycle" if seed % 2 == 0 else "pointmass"
        s = random_cluttered_scenario(seed, model)
        runs.append((s, run(s)))
    return runs, time.perf_counter() - start


def test_criterion_1_forward_invariance(suite_runs, report):
    runs, elapsed = suite_runs
    bad = []
    for s, log in runs:
        if not (log.min_clearance() > 0 and log.min_h() >= -1e-6):
            bad.append((s.name, log.status, log.min_clearance(), log.min_h()))
    builtin_bad = [b for b in bad if not b[0].startswith("random")]
    random_bad = [b for b in bad if b[0].startswith("random")]
    collided = sum(1 for b in random_bad if b[2] <= 0)
    neg_h = sum(1 for b in random_bad if b[3] < -1e-6)
    statuses = {}
    for s, log in runs[6:]:
        statuses[log.status] = statuses.get(log.status, 0) + 1
    ok = not bad and elapsed < 60.0
    report(1, ok,
           f"builtins {6 - len(builtin_bad)}/6 safe; random {N_RANDOM - len(random_bad)}/{N_RANDOM} safe "
           f"({collided} with clearance <= 0, {neg_h} with min h < -1e-6; outcomes {statuses}); "
           f"runtime {elapsed:.1f} s")
    for b in bad[:10]:
        print("  unsafe:", b)
    assert ok


def test_criterion_2_long_wall(report):
    poly = run(builtin("long-wall"))
    c3 = run(builtin("long-wall").with_filter("c3bf"))
    ok = c3.status == FILTER_FAILURE and c3.t[-1] == 0.0 and poly.status == REACHED and poly.min_clearance() > 0
    report(2, ok, f"C3BF {c3.status} at t={c3.t[-1]:g} ({c3.reason.split(':')[0]}); "
                  f"PolyC2BF {poly.status}, min clearance {poly.min_clearance():.3f} m")
    assert ok


def test_criterion_3_qp_solvers(report):
    rng = np.random.default_rng(2024)
    worst_cf = 0.0
    for _ in range(10_000):
        m = int(rng.integers(1, 5))
        p = FilterProblem(rng.normal(size=m) * 3, rng.normal(size=(1, m)), rng.normal(size=1) * 3)
        worst_cf = max(worst_cf, np.linalg.norm(solve_closed_form(p).u_star - solve_active_set(p).u_star))
    worst_bf = 0.0
    for _ in range(1_000):
        m = int(rng.integers(1, 5))
        n = int(rng.integers(2, 9))
        A = rng.normal(size=(n, m))
        b = A @ rng.normal(size=m) - rng.uniform(0, 1, n)
        p = FilterProblem(rng.normal(size=m) * 2, A, b)
        worst_bf = max(worst_bf, np.linalg.norm(solve_active_set(p).u_star - projection_oracle(A, b, p.reference)))
    ok = worst_cf <= 1e-9 and worst_bf <= 1e-4
    report(3, ok, f"closed form vs active set max |du| = {worst_cf:.2e} (10,000 problems); "
                  f"active set vs enumeration oracle max |du| = {worst_bf:.2e} (1,000 problems)")
    assert ok


def test_criterion_4_lie_derivatives(report):
    rng = np.random.default_rng(4)
    parts, ok = [], True
    for model in MODELS:
        worst = 0.0
        fails = 0
        for _ in range(1_000):
            x, obs, t, frame = sample_case(model, rng)
            u = random_input(model, rng)
            ev = model_constraint(model, x, obs, 0.3, t)
            xd = model.dynamics(x, u)
            d = 1e-6
            P = frame.projection
            fd = (frozen_h(model, x + d * xd, t + d, frame, obs, t, P)
                  - frozen_h(model, x - d * xd, t - d, frame, obs, t, P)) / (2 * d)
            err = abs(fd - ev.hdot(u))
            tol = max(1e-4, 1e-3 * abs(fd))
            worst = max(worst, err / tol)
            fails += err > tol
        ok &= fails == 0
        parts.append(f"{model.name} {1000 - fails}/1000 (worst err/tol {worst:.2g})")
    report(4, ok, "finite-difference h_dot vs L_f h + L_g h u, frozen cone: " + ", ".join(parts))
    assert ok


def test_criterion_5_nonzero_lgh(report):
    rng = np.random.default_rng(5)
    parts, ok, counter = [], True, []
    for model in MODELS:
        smallest = np.inf
        for _ in range(10_000):
            x, obs, t, _ = sample_case(model, rng)
            n = np.linalg.norm(model_constraint(model, x, obs, 0.3, t).lgh)
            smallest = min(smallest, n)
            if not n > 1e-8:
                counter.append((model.name, x.tolist(), obs.vertices.tolist(), t))
        ok &= smallest > 1e-8
        parts.append(f"{model.name} min |L_g h| = {smallest:.3g}")
    report(5, ok, "10,000 states per model: " + ", ".join(parts))
    for c in counter[:5]:
        print("  counterexample:", c)
    assert ok


def test_criterion_6_minimal_intervention(suite_runs, report):
    runs, _ = suite_runs
    quiet = violations = 0
    for _, log in runs:
        ctrl = np.all(np.isfinite(log.u), axis=1)
        psi = np.where(np.isnan(log.psi), np.inf, log.psi)
        mask = ctrl & np.all(psi >= 0, axis=1)
        quiet += int(mask.sum())
        violations += int(np.sum(np.any(log.u[mask] != log.reference[mask], axis=1)))
    ok = violations == 0 and quiet > 0
    report(6, ok, f"{violations} violations over {quiet} steps with all psi >= 0 ({len(runs)} runs)")
    assert ok


def test_criterion_7_latency(suite_runs, report):
    runs, _ = suite_runs
    lat = np.concatenate([log.latency_ns[log.latency_ns > 0] for s, log in runs[:6]]) / 1e3
    rnd = np.concatenate([log.latency_ns[log.latency_ns > 0] for s, log in runs[6:]]) / 1e3
    assert max(len(s.obstacles) for s, _ in runs) <= 20
    mean, p99 = lat.mean(), np.percentile(lat, 99)
    ok = mean < 100 and p99 < 1000
    report(7, ok, f"builtin suite filter_step mean {mean:.1f} us, p99 {p99:.1f} us over {lat.size} steps "
                  f"(random scenes: mean {rnd.mean():.1f} us, p99 {np.percentile(rnd, 99):.1f} us)")
    assert ok


def test_criterion_8_geometry_oracle(report):
    rng = np.random.default_rng(8)
    mismatches = non_monotone = 0
    widths = np.linspace(0.0, 1.0, 11)
    for _ in range(10_000):
        poly = random_polygon(rng)
        ego = random_outside_point(rng, poly)
        i, j = select_cone_vertex_indices(poly, ego)
        mismatches += {i, j} != brute_force_tangent_pair(poly.vertices, ego)
        cos = [build_cone_frame(poly, EgoDisc(ego, w)).cos_phi for w in widths]
        non_monotone += bool(np.any(np.diff(cos) > 1e-12))
    ok = mismatches == 0 and non_monotone == 0
    report(8, ok, f"tangent pair mismatches {mismatches}/10,000; widening monotonicity violations "
                  f"{non_monotone}/10,000")
    assert ok

"""Static SVG of a run: top-down trajectory plus h / psi time series."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Circle, Polygon  # noqa: E402

from .dynamics import MODELS  # noqa: E402


def _body_path(log, scenario):
    model = scenario.build_model() if scenario is not None else MODELS[log.model]()
    return np.array([model.body_center(x)[:2] for x in log.states])


def plot_log(log, scenario, path):
    """Write an SVG for ``log``; obstacles are drawn when ``scenario`` is known.

    Elements carry SVG ids (``trajectory``, ``obstacle-<i>``, ``c3bf-<i>``)
    so tests can inspect the geometry.
    """
    fig, (ax, axh) = plt.subplots(1, 2, figsize=(12, 5), gridspec_kw={"width_ratios": [3, 2]})
    xy = _body_path(log, scenario)
    if scenario is not None:
        half_w = 0.5 * scenario.width
        for i, o in enumerate(scenario.obstacles):
            poly = Polygon(o.vertices, closed=True, fill=True, fc="0.85", ec="k", lw=1.0)
            poly.set_gid(f"obstacle-{i}")
            ax.add_patch(poly)
            if np.any(o.center_velocity[:2] != 0) and log.n_steps:
                end = o.vertices + o.center_velocity[:2] * log.t[-1]
                ax.add_patch(Polygon(end, closed=True, fill=False, ec="k", ls="--", lw=0.8))
            circ = Circle(o.center[:2], o.circumradius() + half_w, fill=False, ec="r", ls=":", lw=1.0)
            circ.set_gid(f"c3bf-{i}")
            ax.add_patch(circ)
        ax.plot(*scenario.goal[:2], marker="*", color="g", ms=12, ls="none", label="goal")
    (line,) = ax.plot(xy[:, 0], xy[:, 1], "b-", lw=1.5, label=f"{log.filter} ({log.status})")
    line.set_gid("trajectory")
    ax.plot(*xy[0], "bo", ms=5)
    ax.set_aspect("equal", adjustable="datalim")
    ax.autoscale_view()
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"{log.scenario}")
    ax.legend(loc="best", fontsize=8)

    with np.errstate(all="ignore"):
        h = log.h.copy()
        h[~np.isfinite(h)] = np.inf
        min_h = h.min(axis=1) if h.shape[1] else np.full(log.n_steps, np.nan)
        psi = log.psi.copy()
        psi[~np.isfinite(psi)] = np.inf
        min_psi = psi.min(axis=1) if psi.shape[1] else np.full(log.n_steps, np.nan)
    min_h[~np.isfinite(min_h)] = np.nan
    min_psi[~np.isfinite(min_psi)] = np.nan
    axh.plot(log.t, min_h, label="min h", gid="min-h")
    axh.plot(log.t, min_psi, label="min psi", lw=0.8, gid="min-psi")
    axh.axhline(0.0, color="k", lw=0.6)
    axh.set_xlabel("t [s]")
    axh.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)

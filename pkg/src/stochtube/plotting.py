"""Static PNG figures for experiment bundles (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Circle as CirclePatch, Rectangle  # noqa: E402

if TYPE_CHECKING:  # pragma: no cover
    from .harness import Problem, RolloutStats
    from .tube import PlanReport

# fixed metadata keeps PNG bytes reproducible
_META = {"Software": None}
_STYLE = {
    "single_time": dict(color="tab:blue", label="single time"),
    "trajectory": dict(color="tab:orange", label="whole path"),
    "trajectory_segmented": dict(color="tab:green", label="whole path, segmented"),
    "isa_baseline": dict(color="tab:red", ls="--", label="second-moment baseline"),
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_curves(problem: "Problem", stats: Optional["RolloutStats"], path: Path) -> Path:
    """Radii over time with sampled deviation paths underneath."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if stats is not None and stats.sample_deviations.size:
        t = np.linspace(0.0, problem.params.T, stats.sample_deviations.shape[1])
        for dev in stats.sample_deviations:
            ax.plot(t, dev, color="0.6", lw=0.5, alpha=0.6)
    top = 0.0
    for c in problem.curves:
        ax.plot(c.times, c.radii, lw=1.6, **_STYLE[c.kind])
        if c.kind != "isa_baseline":
            top = max(top, float(c.radii.max()))
    ax.set_ylim(0.0, 1.15 * top if top > 0 else 1.0)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("metric distance to nominal")
    ax.set_title(f"{problem.config.name}: delta={problem.params.delta:g}")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_rates(problem: "Problem", path: Path) -> Path:
    s = problem.schedule
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(s.times, s.rates, color="tab:purple")
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("sampled contraction rate")
    fig.tight_layout()
    return _save(fig, path)


def plot_plan(problem: "Problem", stats: Optional["RolloutStats"], plan: "PlanReport",
              path: Path, every: int = 100) -> Path:
    """Planar scene: obstacles, goal, nominal path, tube circles and rollouts."""
    spec = problem.safe_set
    pts = spec.project(problem.nominal.states)
    fig, ax = plt.subplots(figsize=(6.5, 6.5))
    for c in spec.circles:
        ax.add_patch(CirclePatch(c.center, c.radius, color="0.25"))
    for b in spec.boxes:
        ax.add_patch(Rectangle(b.lower, *(b.upper - b.lower), color="0.25"))
    ax.add_patch(CirclePatch(spec.goal.center, spec.goal.radius, fill=False, ec="tab:green", lw=1.5))
    for k in range(0, len(pts), every):
        ax.add_patch(CirclePatch(pts[k], plan.proj_radius[k], fill=False, ec="tab:blue",
                                 lw=0.5, alpha=0.5))
    if stats is not None:
        for X in stats.sample_states:
            q = spec.project(X)
            ax.plot(q[:, 0], q[:, 1], color="tab:orange", lw=0.4, alpha=0.7)
    ax.plot(pts[:, 0], pts[:, 1], color="k", lw=1.5)
    ax.set_aspect("equal")
    ax.autoscale_view()
    ax.set_title("plan PASS" if plan.passed else "plan FAIL")
    fig.tight_layout()
    return _save(fig, path)


def render_bundle(directory: Path, problem: "Problem", stats: Optional["RolloutStats"],
                  plan: Optional["PlanReport"]) -> list[Path]:
    directory = Path(directory)
    out = [plot_curves(problem, stats, directory / "curves.png"),
           plot_rates(problem, directory / "rates.png")]
    if plan is not None:
        out.append(plot_plan(problem, stats, plan, directory / "plan.png"))
    return out

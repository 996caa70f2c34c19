"""Figure rendering for the report path.

Each plottable task output (band-test time series, convergence tables,
moment tables, oracle comparisons) gets one PNG next to its delimited data.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "figure.figsize": (6.0, 3.7),
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
})


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _load_csv(path: Path):
    return np.genfromtxt(path, delimiter=",", names=True)


def band_figure(path: Path, out: Path, target: float | None = None,
                z: float = 3.0) -> Path:
    data = _load_csv(path)
    names = data.dtype.names
    t = data[names[0]]
    mean = data[names[1]]
    se = data[names[2]]
    fig, ax = plt.subplots()
    ax.fill_between(t, mean - z * se, mean + z * se, alpha=0.3,
                    label=f"mean ± {z:g} SE")
    ax.plot(t, mean, lw=1.2, label="ensemble mean")
    if target is not None:
        ax.axhline(target, color="k", ls="--", lw=0.8, label="target")
    for bound_col in ("c_bound", "bound"):
        if bound_col in names and np.all(np.isfinite(data[bound_col])):
            ax.plot(t, data[bound_col], color="r", ls=":", lw=1.0, label="growth bound")
            break
    ax.set_xlabel("t")
    ax.set_ylabel(names[1])
    ax.legend(loc="best")
    return _save(fig, out)


def loglog_figure(path: Path, out: Path, xlabel: str, ylabel: str) -> Path:
    data = _load_csv(path)
    names = data.dtype.names
    x = np.atleast_1d(data[names[0]])
    y = np.atleast_1d(data[names[-1]])
    fig, ax = plt.subplots()
    ax.loglog(x, y, "o-", lw=1.2)
    if len(x) >= 2:
        slope = np.polyfit(np.log(x), np.log(np.maximum(y, 1e-300)), 1)[0]
        ax.set_title(f"fitted slope {slope:+.2f}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return _save(fig, out)


def overlay_figure(path: Path, out: Path) -> Path:
    data = _load_csv(path)
    x = data["x"]
    fig, ax = plt.subplots()
    ax.plot(x, np.hypot(data["re_galerkin"], data["im_galerkin"]),
            lw=1.2, label="|state| (truncated basis)")
    ax.plot(x, np.hypot(data["re_oracle"], data["im_oracle"]),
            lw=1.0, ls="--", label="|state| (kernel quadrature)")
    ax.set_xlabel("x")
    ax.set_ylabel("|state|")
    ax.legend(loc="best")
    return _save(fig, out)


def moments_figure(path: Path, out: Path) -> Path:
    rows = np.genfromtxt(path, delimiter=",", names=True, dtype=None,
                         encoding="utf-8")
    rows = np.atleast_1d(rows)
    fig, ax = plt.subplots()
    ps = rows["p"]
    finite = rows["divergence_flag"] == 0
    if np.any(finite):
        est = np.array([float(e) for e in np.atleast_1d(rows["estimate"])[finite]])
        ax.errorbar(ps[finite], est, fmt="o",
                    yerr=[float(s) if s else 0.0
                          for s in np.atleast_1d(rows["stderr"])[finite]],
                    label="estimate")
    grid = np.linspace(min(0.1, ps.min()), 1.9, 200)
    ax.plot(grid, 1.0 / (1.0 - grid / 2.0), "k--", lw=0.8,
            label="closed form (finite for p<2)")
    for p in ps[~finite]:
        ax.axvline(p, color="r", ls=":", lw=1.0)
    ax.axvline(2.0, color="r", lw=1.2, label="moment boundary p=2")
    ax.set_xlabel("p")
    ax.set_ylabel("moment estimate")
    ax.set_ylim(0, 12)
    ax.legend(loc="upper left")
    return _save(fig, out)


def trajectory_figure(path: Path, out: Path) -> Path:
    data = _load_csv(path)
    fig, ax = plt.subplots()
    ax.plot(data["t"], data["norm_sq"], lw=1.0)
    ax.set_xlabel("t")
    ax.set_ylabel("|state|^2")
    return _save(fig, out)


def girsanov_figure(path: Path, out: Path) -> Path:
    rows = np.atleast_1d(np.genfromtxt(path, delimiter=",", names=True,
                                       dtype=None, encoding="utf-8"))
    fig, ax = plt.subplots()
    idx = np.arange(len(rows))
    ax.errorbar(idx - 0.1, rows["weighted_mean"], yerr=3 * rows["weighted_se"],
                fmt="o", label="weighted (output ensemble)")
    ax.errorbar(idx + 0.1, rows["direct_mean"], yerr=3 * rows["direct_se"],
                fmt="s", label="direct (innovation ensemble)")
    ax.set_xticks(idx, [str(r["functional"]) for r in rows], rotation=15)
    ax.set_ylabel("functional mean ± 3 SE")
    ax.legend(loc="best")
    return _save(fig, out)


_FIGURE_MAP = {
    "norm_stats.csv": ("band", {"target": 1.0}),
    "trace_stats.csv": ("band", {"target": 1.0}),
    "c_norm_stats.csv": ("band", {}),
    "c_trace_stats.csv": ("band", {}),
    "equivalence.csv": ("loglog", {"xlabel": "dt", "ylabel": "round-trip error"}),
    "unravel.csv": ("loglog", {"xlabel": "dt", "ylabel": "max HS distance"}),
    "convergence.csv": ("loglog-mid", {"xlabel": "lambda_m",
                                       "ylabel": "mean squared error"}),
    "oracle_compare.csv": ("overlay", {}),
    "moments.csv": ("moments", {}),
    "trajectory0.csv": ("trajectory", {}),
    "girsanov.csv": ("girsanov", {}),
    "lindblad_diag.csv": ("diag", {}),
}


def diag_figure(path: Path, out: Path) -> Path:
    data = _load_csv(path)
    fig, ax = plt.subplots()
    for name in data.dtype.names[1:]:
        if np.max(np.abs(data[name])) > 1e-4:
            ax.plot(data["t"], data[name], lw=1.0, label=name)
    ax.set_xlabel("t")
    ax.set_ylabel("population")
    ax.legend(loc="best", fontsize=7)
    return _save(fig, out)


def convergence_figure(path: Path, out: Path, xlabel: str, ylabel: str) -> Path:
    data = _load_csv(path)
    fig, ax = plt.subplots()
    x = np.atleast_1d(data["lambda_m"])
    y = np.atleast_1d(data["mean_sq_error"])
    ax.loglog(x, y, "o-", lw=1.2)
    if len(x) >= 2:
        slope = np.polyfit(np.log(x), np.log(np.maximum(y, 1e-300)), 1)[0]
        ax.set_title(f"fitted slope {slope:+.2f}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return _save(fig, out)


def render_manifest_figures(task_dir: Path, payload: dict) -> list:
    """Render the figures for one task's outputs; returns the PNG paths."""
    produced = []
    for entry in payload.get("files", []):
        name = Path(entry["path"]).name
        if name not in _FIGURE_MAP:
            continue
        kind, kwargs = _FIGURE_MAP[name]
        src = task_dir / entry["path"]
        out = src.with_suffix(".png")
        try:
            if kind == "band":
                produced.append(band_figure(src, out, **kwargs))
            elif kind == "loglog":
                produced.append(loglog_figure(src, out, **kwargs))
            elif kind == "loglog-mid":
                produced.append(convergence_figure(src, out, **kwargs))
            elif kind == "overlay":
                produced.append(overlay_figure(src, out))
            elif kind == "moments":
                produced.append(moments_figure(src, out))
            elif kind == "trajectory":
                produced.append(trajectory_figure(src, out))
            elif kind == "girsanov":
                produced.append(girsanov_figure(src, out))
            elif kind == "diag":
                produced.append(diag_figure(src, out))
        except Exception as exc:  # a bad figure must not fail the report
            print(f"figure for {src.name} skipped: {exc}")
    return produced

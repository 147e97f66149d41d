"""Matplotlib figures for experiment reports (rendered off-screen to files)."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["render_report", "plot_mass_path", "plot_distance_matrix"]


def _ecdf(ax, x, label):
    x = np.sort(np.asarray(x, dtype=float))
    if x.size:
        ax.step(x, np.arange(1, x.size + 1) / x.size, where="post", label=label)


def _save(fig, out_dir, name):
    path = os.path.join(out_dir, name)
    fig.tight_layout()
    # fixed metadata keeps the files reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return name


def _two_sided(report, out_dir, a, b, title, xlabel):
    R = report.replicates
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, lab in ((a, "forward"), (b, "dual")):
        if key in R and len(R[key]):
            _ecdf(ax, R[key], f"{lab} (n={len(R[key])})")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("empirical CDF")
    ax.set_title(title)
    ax.legend()
    return {"ecdf": _save(fig, out_dir, "ecdf.png")}


def _means(report, out_dir):
    rows = [c for c in report.checks if c.kind == "z"]
    if not rows:
        return {}
    fig, ax = plt.subplots(figsize=(max(5, 1.4 * len(rows)), 4))
    x = np.arange(len(rows))
    est = [c.values["estimate"] for c in rows]
    err = [3 * c.values["estimate_se"] for c in rows]
    ref = [c.values["reference"] for c in rows]
    ax.errorbar(x, est, yerr=err, fmt="o", capsize=4, label="estimate ± 3 se")
    ax.plot(x, ref, "x", ms=9, color="k", label="reference")
    ax.set_xticks(x, [c.name for c in rows], rotation=30, ha="right", fontsize=8)
    ax.set_title(report.experiment)
    ax.legend()
    return {"checks": _save(fig, out_dir, "checks.png")}


def _pvalues(report, out_dir):
    pv = np.asarray(report.replicates.get("ks_pvalue", []), dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(pv, bins=20, range=(0, 1), edgecolor="k")
    if pv.size:
        ax.axhline(pv.size / 20, color="r", ls="--", label="uniform")
        ax.legend()
    ax.set_xlabel("per-path KS p-value")
    ax.set_ylabel("paths")
    return {"pvalues": _save(fig, out_dir, "pvalues.png")}


def _weights(report, out_dir):
    w = np.asarray(report.replicates.get("weight", []), dtype=float)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    if w.size:
        axes[0].hist(np.log(w[w > 0]), bins=60)
    axes[0].set_xlabel("log weight")
    R = report.replicates
    if "neutral_fit_frequency" in R:
        F = np.asarray(R["neutral_fit_frequency"])
        order = np.argsort(F)
        cw = np.cumsum(w[order]) / max(w.sum(), 1e-300)
        axes[1].step(F[order], cw, where="post", label="reweighted neutral")
        _ecdf(axes[1], R["selective_fit_frequency"], "direct selective")
        axes[1].set_xlabel("fit-type frequency at T")
        axes[1].legend()
    return {"weights": _save(fig, out_dir, "weights.png")}


def _covering(report, out_dir):
    rows = [c for c in report.checks if c.name.startswith("covering_number")]
    fig, ax = plt.subplots(figsize=(6, 4))
    eps = [c.values["eps"] for c in rows]
    ax.plot(eps, [c.values["eps_times_mean"] for c in rows], "o-", label="eps * N_eps")
    if rows:
        ax.axhline(rows[0].values["asymptote_2_over_d"], color="k", ls=":", label="2/d")
    ax.set_xscale("log")
    ax.set_xlabel("eps")
    ax.legend()
    return {"covering": _save(fig, out_dir, "covering.png")}


def render_report(report, out_dir):
    """Write figures for ``report`` into ``out_dir``; returns ``{name: file}``."""
    os.makedirs(out_dir, exist_ok=True)
    kind = report.experiment
    figs = {}
    if kind in ("duality-check", "fk-duality"):
        if "forward" in report.replicates:
            figs.update(_two_sided(report, out_dir, "forward", "dual", kind, "replicate value"))
        figs.update(_means(report, out_dir))
    elif kind == "equilibrium":
        figs.update(_two_sided(report, out_dir, "forward_mean_pair_distance",
                               "dual_mean_pair_distance", kind, "pair distance"))
        figs.update(_means(report, out_dir))
    elif kind == "strong-duality":
        figs.update(_two_sided(report, out_dir, "forward_pair", "dual_pair", kind,
                               "pair distance"))
    elif kind == "conditioned-duality":
        figs.update(_pvalues(report, out_dir))
    elif kind == "girsanov-check":
        figs.update(_weights(report, out_dir))
        figs.update(_means(report, out_dir))
    elif kind == "infdiv-check":
        figs.update(_means(report, out_dir))
    elif kind == "diagnostics":
        figs.update(_covering(report, out_dir))
    report.figures = figs
    return figs


def plot_mass_path(path, out_dir, name="mass_path.png"):
    fig, ax = plt.subplots(figsize=(6, 4))
    t = np.append(path.times, path.horizon)
    ax.step(t, np.append(path.masses, path.masses[-1]), where="post")
    ax.set_xlabel("time")
    ax.set_ylabel("total mass")
    return _save(fig, out_dir, name)


def plot_distance_matrix(space, out_dir, name="genealogy.png"):
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(space.distance_matrix(), cmap="viridis")
    fig.colorbar(im, ax=ax, label="distance")
    ax.set_title(f"{space.n_leaves} leaves")
    return _save(fig, out_dir, name)

"""Figures for the report command. PNGs are written with fixed metadata so reruns are byte-stable."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 7,
    "legend.frameon": False,
}

# no timestamp or software version in the PNG text chunks
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def loss_curves(runs: dict[str, list[dict]], path, column: str = "loss_total") -> Path:
    """One line per run: ``column`` against iteration (log y when all positive)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        positive = True
        for name in sorted(runs):
            rows = [r for r in runs[name] if r.get(column) not in (None, "")]
            xs = [float(r["iteration"]) for r in rows]
            ys = [float(r[column]) for r in rows]
            positive &= all(y > 0 for y in ys)
            ax.plot(xs, ys, lw=1, label=name)
        if positive and runs:
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(column)
        if runs:
            ax.legend(loc="upper right")
        return _save(fig, path)


def ablation_deltas(rows: list[dict], path) -> Path:
    """Horizontal bars of PSNR delta per (group, seed) pair."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [f"{r['group']} s{r['seed']}" for r in rows]
        vals = [float(r["delta_psnr"]) for r in rows]
        colors = ["tab:green" if v >= 0 else "tab:red" for v in vals]
        ax.barh(range(len(vals)), vals, color=colors)
        ax.set_yticks(range(len(vals)), labels)
        ax.axvline(0.0, color="k", lw=0.8)
        ax.set_xlabel("PSNR delta (dB)")
        return _save(fig, path)


def decoupling(samples_by_arm: dict[str, list], path) -> Path:
    """Structural MAE (x) against pixel MAE (y), one colour per arm."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 4.0))
        for arm in sorted(samples_by_arm):
            s = samples_by_arm[arm]
            ax.scatter([p.structural_mae for p in s], [p.pixel_mae for p in s], s=6, alpha=0.6, label=arm)
        ax.set_xlabel("structural MAE")
        ax.set_ylabel("pixel MAE")
        if samples_by_arm:
            ax.legend()
        return _save(fig, path)

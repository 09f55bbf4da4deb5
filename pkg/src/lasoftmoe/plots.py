"""Report figures written straight to files (Agg backend, no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 150,
}
COLORS = {"vanilla": "#7f7f7f", "softmoe": "#1f77b4", "la_softmoe": "#d62728"}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def loss_curves(curves: dict[str, list[float]], path, title: str = "") -> None:
    """Per-epoch mean training loss, one line per run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for name, curve in curves.items():
            ax.plot(np.arange(1, len(curve) + 1), curve, label=name, color=COLORS.get(name))
        ax.set_xlabel("epoch")
        ax.set_ylabel("contrastive loss")
        if title:
            ax.set_title(title)
        if len(curves) > 1:
            ax.legend()
        _save(fig, path)


def ablation_bars(table: dict[str, dict[str, float]], path, reference: dict[str, dict[str, float]] | None = None) -> None:
    """Median test ACER and ACC per variant; reference values drawn as hollow markers."""
    variants = list(table)
    x = np.arange(len(variants))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(6.5, 2.8))
        for ax, key, label in ((axes[0], "acer", "ACER (%)"), (axes[1], "acc", "ACC (%)")):
            vals = [100.0 * table[v][key] for v in variants]
            ax.bar(x, vals, color=[COLORS.get(v, "C0") for v in variants], width=0.6)
            if reference:
                ref = [reference[v][key] for v in variants if v in reference]
                if len(ref) == len(variants):
                    ax.plot(x, ref, "o", mfc="none", mec="k", label="reference")
                    ax.legend()
            ax.set_xticks(x, variants)
            ax.set_ylabel(label)
        _save(fig, path)


def template_spread(rows: list[tuple[str, float]], path) -> None:
    """ACC per prompt template."""
    ids = [r[0] for r in rows]
    acc = np.array([100.0 * r[1] for r in rows])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ax.plot(np.arange(len(ids)), acc, "o-", color=COLORS["la_softmoe"])
        ax.set_xticks(np.arange(len(ids)), ids)
        ax.set_ylabel("ACC (%)")
        ax.set_xlabel("prompt template")
        spread = acc.max() - acc.min() if acc.size else 0.0
        ax.set_title(f"spread {spread:.2f} points")
        _save(fig, path)

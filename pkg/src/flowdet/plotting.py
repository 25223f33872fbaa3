"""Static SVG figures with byte-stable output (fixed hash salt, no timestamp)."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {"svg.hashsalt": "flowdet", "svg.fonttype": "path", "font.size": 9}


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def pr_curves_svg(report, path, names: dict | None = None) -> None:
    """Per-category precision/recall at IoU 0.5 from an ApReport."""
    names = names or {}
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for cat, curve in sorted(report.pr_curves.items(), key=lambda kv: str(kv[0])):
            ax.plot(curve["recall"], curve["precision"], label=str(names.get(cat, cat)))
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_title(f"PR @ IoU 0.5  (AP50 {report.ap50:.3f})")
        if report.pr_curves:
            ax.legend(loc="lower left")
        fig.tight_layout()
        _save(fig, path)


def bar_svg(labels: Sequence[str], values: Sequence[float], path, ylabel: str, title: str = "") -> None:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(3.5, 0.9 * len(labels) + 1.5), 3.5))
        ax.bar(range(len(labels)), values, color="#4c72b0")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)


def loss_svg(history, path) -> None:
    """Total and component losses against step from a list of LossRecord."""
    steps = [r.step for r in history]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for key in ("total", "cls", "l1", "giou"):
            ax.plot(steps, [getattr(r, key) for r in history], label=key, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)

"""PSNR-vs-bpp overlays. Theoretical curves are dashed, codecs solid."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import RDCurve  # noqa: E402


def plot_curves(curves: Sequence[RDCurve], output: str | Path, title: str | None = None):
    if not curves:
        raise ValueError("nothing to plot: no curves given")
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    for i, c in enumerate(curves):
        style = "--" if c.theoretical else "-"
        ax.plot(c.rates, c.psnrs, linestyle=style, marker="." if len(c) < 30 else None,
                label=c.label or f"curve {i}")
    ax.set_xlabel("rate (bpp)")
    ax.set_ylabel("PSNR (dB)")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(output)
    styles = [line.get_linestyle() for line in ax.get_lines()]
    plt.close(fig)
    return styles

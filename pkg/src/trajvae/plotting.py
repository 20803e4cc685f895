"""PNG figures for error curves, written next to the CSV files they are drawn from."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evalkit import ErrorCurve  # noqa: E402


def plot_curves(curves: Sequence[ErrorCurve], path, xlabel: str, title: str = "", band: bool = True) -> Path:
    """Mean error per abscissa with a one-std band; one line per curve."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for c in curves:
        if not len(c.abscissa):
            continue
        (line,) = ax.plot(c.abscissa, c.mean, label=c.label or None)
        if band:
            ax.fill_between(c.abscissa, c.mean - c.std, c.mean + c.std, color=line.get_color(), alpha=0.2, lw=0)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("error [m]")
    ax.set_ylim(bottom=0)
    if title:
        ax.set_title(title)
    if any(c.label for c in curves):
        ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path

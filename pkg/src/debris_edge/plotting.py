"""Matplotlib helpers that render byte-deterministic SVG files.

SVG output normally embeds a creation date and hash-salted ids; both are
pinned here so identical inputs produce identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

plt.rcParams["svg.hashsalt"] = "debris-edge"


def save_svg(fig, path) -> None:
    """Write the figure as SVG with deterministic bytes, then close it."""
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def new_figure(width: float = 6.4, height: float = 4.8):
    return plt.figure(figsize=(width, height))

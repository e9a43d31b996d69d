"""Figure output for training and evaluation artifacts.

Matplotlib is imported lazily with the Agg backend so headless runs work
and importing this module stays cheap.  PNGs are written without the
Software metadata chunk so reruns stay byte-identical.
"""

from __future__ import annotations

from pathlib import Path

__all__ = ["loss_curves", "accuracy_bars", "scatter_2d"]

_SAVE = dict(dpi=110, metadata={"Software": None})


def _pyplot():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def loss_curves(records: list[dict], path: str | Path) -> Path:
    """Plot per-step loss traces from metrics records onto one axes."""
    plt = _pyplot()
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("total", "l_gen", "l_ra"):
        if records and key in records[0]:
            ax.plot(steps, [r[key] for r in records], label=key, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def accuracy_bars(labels: list[str], values: list[float], path: str | Path,
                  title: str = "accuracy") -> Path:
    """Bar chart over labelled accuracies in [0, 1]."""
    if len(labels) != len(values):
        raise ValueError(f"{len(labels)} labels vs {len(values)} values")
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 4))
    ax.bar(range(len(values)), values)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel(title)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def scatter_2d(points, reference, path: str | Path) -> Path:
    """Overlay model draws on reference draws for the planar toy."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(reference[:, 0], reference[:, 1], s=6, alpha=0.4, label="true")
    ax.scatter(points[:, 0], points[:, 1], s=6, alpha=0.4, label="model")
    ax.legend()
    ax.set_aspect("equal")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path

"""Static figures written next to the CSV outputs (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (5 ** 0.5 - 1) / 2


def figsize(width_in: float = 5.5, rows: int = 1, cols: int = 1):
    return width_in, width_in * GOLDEN * rows / cols


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_volumes(rows: list[dict], path) -> Path:
    """Grouped bars of per-pair volumes for each communication scheme."""
    keys = ("vanilla", "pre", "post", "hybrid")
    fig, ax = plt.subplots(figsize=figsize())
    if rows:
        x = np.arange(len(rows))
        w = 0.8 / len(keys)
        for k, key in enumerate(keys):
            ax.bar(x + (k - 1.5) * w, [r[key] for r in rows], w, label=key)
        ax.set_xticks(x)
        ax.set_xticklabels([r["pair"] for r in rows], rotation=45 if len(rows) > 8 else 0)
        ax.legend(frameon=False, ncol=4, fontsize=8)
    else:
        ax.text(0.5, 0.5, "no cut edges", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("sender -> receiver")
    ax.set_ylabel("rows on the wire")
    return _save(fig, path)


def plot_training(history: list[dict], path, label: str | None = None) -> Path:
    fig, (a1, a2) = plt.subplots(1, 2, figsize=figsize(8.0, 1, 2))
    if history:
        ep = [r["epoch"] for r in history]
        a1.plot(ep, [r["loss"] for r in history], label=label)
        for key in ("train_acc", "val_acc", "test_acc"):
            a2.plot(ep, [r[key] for r in history], label=key.replace("_acc", ""))
        a2.legend(frameon=False, fontsize=8)
    a1.set_xlabel("epoch")
    a1.set_ylabel("loss")
    a2.set_xlabel("epoch")
    a2.set_ylabel("accuracy")
    return _save(fig, path)


def plot_speedup_delta(sweep: list[dict], path, gamma: float) -> Path:
    fig, ax = plt.subplots(figsize=figsize())
    d = [r["delta"] for r in sweep]
    ax.semilogx(d, [r["exact"] for r in sweep], label="exact")
    ax.semilogx(d, [r["approx"] for r in sweep], "--", label="approx")
    ax.axhline(gamma, color="0.6", lw=0.8)
    ax.axhline(1.0, color="0.6", lw=0.8)
    ax.set_xlabel("latency / transfer time")
    ax.set_ylabel("speedup")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_worker_sweep(rows: list[dict], path, crossover=None) -> Path:
    fig, ax = plt.subplots(figsize=figsize())
    p = [r["workers"] for r in rows]
    ax.loglog(p, [r["t_comm"] for r in rows], label="fp32")
    ax.loglog(p, [r["t_quant_comm"] for r in rows], label="quantized")
    if crossover is not None:
        for val, style in ((crossover.plain, ":"), (crossover.quant, "--")):
            if val is not None:
                ax.axvline(val, color="0.5", ls=style, lw=0.8)
    ax.set_xlabel("workers")
    ax.set_ylabel("exchange time (s)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_bench(rows: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=figsize())
    for f in sorted({r["F"] for r in rows}):
        sel = [r for r in rows if r["F"] == f]
        ax.plot([r["threads"] for r in sel], [r["speedup"] for r in sel], "o-", label=f"F={f}")
    ax.axhline(1.0, color="0.6", lw=0.8)
    ax.set_xlabel("threads")
    ax.set_ylabel("speedup over naive")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)

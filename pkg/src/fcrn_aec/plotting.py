"""Matplotlib figures for reports; everything renders off-screen to files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# PNG metadata carries the matplotlib version; drop it so reruns are byte-stable
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return path


def plot_results(rows, path):
    """One panel per table column, one bar per system."""
    from .harness import COLUMNS
    cols = [c for c in COLUMNS if any(r.get(c[0]) is not None for r in rows)]
    if not cols:
        cols = list(COLUMNS[:1])
    fig, axes = plt.subplots(1, len(cols), figsize=(2.2 * len(cols) + 1, 3.2), squeeze=False)
    names = [r["system"] for r in rows]
    pos = np.arange(len(rows))
    for ax, (key, header, group) in zip(axes[0], cols):
        vals = [np.nan if r.get(key) is None else r[key] for r in rows]
        ax.bar(pos, vals, color="0.55")
        ax.set_title(f"{header}\n{group}", fontsize=8)
        ax.set_xticks(pos)
        ax.set_xticklabels(names, rotation=60, ha="right", fontsize=6)
        ax.tick_params(axis="y", labelsize=7)
    return _save(fig, path)


def plot_train_log(epochs, path):
    """Training (and validation) loss per epoch on a log axis, learning rate on a twin axis."""
    ep = [r["epoch"] for r in epochs]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.semilogy(ep, [r["train_loss"] for r in epochs], "k-", label="train")
    val = [r.get("val_loss") for r in epochs]
    if any(v is not None for v in val):
        ax.semilogy(ep, [np.nan if v is None else v for v in val], "k--", label="val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("masked MSE")
    ax.legend(fontsize=7, loc="upper right")
    lr_ax = ax.twinx()
    lr_ax.step(ep, [r["lr"] for r in epochs], "0.6", where="post")
    lr_ax.set_yscale("log")
    lr_ax.set_ylabel("learning rate", color="0.4")
    return _save(fig, path)


def plot_erle_trajectory(trajectory, path, fs=16000, label=None):
    t = np.arange(len(trajectory)) / fs
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(t, trajectory, "k-", lw=0.8, label=label)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("ERLE [dB]")
    if label:
        ax.legend(fontsize=7)
    return _save(fig, path)

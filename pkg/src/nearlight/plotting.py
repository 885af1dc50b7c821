"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "nearlight",
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def normals_to_rgb(n: np.ndarray, mask=None) -> np.ndarray:
    img = np.clip((np.asarray(n) + 1.0) / 2.0, 0, 1)
    if mask is not None:
        img = np.where(np.asarray(mask)[..., None], img, 0.0)
    return img


def plot_energy(history, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.semilogy(np.arange(len(history)), np.maximum(history, 1e-300), "o-", ms=3)
        ax.set_xlabel("outer iteration")
        ax.set_ylabel("energy")
        _save(fig, path)


def plot_ablation(rows, path):
    """``rows``: sequence of (led_count, aae_deg, mabse)."""
    counts = [r[0] for r in rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.plot(counts, [r[1] for r in rows], "o-", color="C3", label="AAE")
        ax.set_xlabel("active LEDs")
        ax.set_ylabel("AAE (deg)")
        ax.set_xticks(counts)
        ax2 = ax.twinx()
        ax2.plot(counts, [r[2] for r in rows], "s--", color="C0", label="MabsE")
        ax2.set_ylabel("MabsE")
        ax2.spines["right"].set_visible(True)
        _save(fig, path)


def plot_history(history, path):
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.semilogy(epochs, [h["train_loss"] for h in history], label="train")
        val = [(h["epoch"], h["val_loss"]) for h in history if "val_loss" in h]
        if val:
            ax.semilogy(*zip(*val), label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cosine loss")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_comparison(pred, gt, mask, errmap, path, title=None):
    """Predicted normals, reference normals and the error map side by side."""
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(7.2, 2.6))
        for ax, img, name in zip(axes, (normals_to_rgb(pred, mask), normals_to_rgb(gt, mask), errmap),
                                 ("predicted", "reference", "angular error")):
            ax.imshow(img, interpolation="nearest")
            ax.set_title(name)
            ax.set_axis_off()
        if title:
            fig.suptitle(title)
        _save(fig, path)

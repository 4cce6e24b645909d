"""Figures written next to the CSV/JSON outputs of the CLI."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["savefig", "plot_losses", "plot_attention", "plot_ablation"]

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 110,
}


def savefig(fig, fname, fpath=None, extensions=("png",)):
    """Save ``fig`` as fname.<ext> for every extension and close it."""
    if fpath is not None:
        fname = os.path.join(fpath, fname)
    paths = []
    fig.tight_layout()
    for ext in extensions:
        path = f"{fname}.{ext}"
        fig.savefig(path)
        paths.append(path)
    plt.close(fig)
    return paths


def plot_losses(train_loss, val_loss, best_epoch=None, title=""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        epochs = range(1, len(train_loss) + 1)
        ax.plot(epochs, train_loss, label="train")
        ax.plot(epochs, val_loss, label="validation")
        if best_epoch and best_epoch > 0:
            ax.axvline(best_epoch, color="0.5", ls="--", lw=0.8, label=f"best ({best_epoch})")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
    return fig


def plot_attention(mat, title="", patch_len=None):
    """Heatmap of a score matrix; optional grid lines at channel boundaries."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        im = ax.imshow(mat, cmap="viridis", interpolation="nearest")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        if patch_len and mat.shape[0] > patch_len:
            for k in range(patch_len, mat.shape[0], patch_len):
                ax.axhline(k - 0.5, color="w", lw=0.4)
                ax.axvline(k - 0.5, color="w", lw=0.4)
        if title:
            ax.set_title(title)
    return fig


def plot_ablation(values, mses, axis_name):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        labels = [str(v) for v in values]
        ax.plot(range(len(values)), mses, marker="o")
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(labels)
        ax.set_xlabel(axis_name)
        ax.set_ylabel("test MSE")
    return fig

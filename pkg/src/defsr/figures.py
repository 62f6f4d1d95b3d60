"""Report figures rendered next to the CSV outputs."""

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_training_curves(rows, path) -> None:
    """Loss components and validation PSNR over epochs, one PNG."""
    plt = _plt()
    epochs = [r["epoch"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("rec", "per", "adv", "total"):
        ax1.plot(epochs, [r[key] for r in rows], marker="o", label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend()
    ax1.set_title("training loss components")
    ax2.plot(epochs, [r["psnr"] for r in rows], marker="o", color="tab:green")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation Y-PSNR (dB)")
    ax2.set_title("validation quality")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metric_distribution(rows, path) -> None:
    """Per-image PSNR bars with SSIM on a twin axis.

    ``rows`` are (image_id, psnr, ssim) triples as written to the report.
    """
    plt = _plt()
    ids = [r[0] for r in rows]
    psnr = [r[1] for r in rows]
    ssim = [r[2] for r in rows]
    fig, ax1 = plt.subplots(figsize=(max(6, 0.45 * len(ids)), 4))
    x = np.arange(len(ids))
    ax1.bar(x, psnr, color="tab:blue", alpha=0.7)
    ax1.set_ylabel("Y-PSNR (dB)", color="tab:blue")
    ax1.set_xticks(x)
    ax1.set_xticklabels(ids, rotation=60, ha="right", fontsize=7)
    ax1.axhline(float(np.mean(psnr)), color="tab:blue", linestyle="--", linewidth=1)
    ax2 = ax1.twinx()
    ax2.plot(x, ssim, color="tab:orange", marker=".", linestyle="none")
    ax2.set_ylabel("Y-SSIM", color="tab:orange")
    ax2.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_ablation_chart(rows, path) -> None:
    """Mean corpus PSNR per configuration as a bar chart.

    ``rows`` are (variant, mean_psnr) pairs in report order.
    """
    plt = _plt()
    names = [r[0] for r in rows]
    vals = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(names))
    bars = ax.bar(x, vals, color=["#888888", "#6baed6", "#74c476", "#fd8d3c"][: len(names)])
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("mean Y-PSNR (dB)")
    lo = min(vals)
    hi = max(vals)
    pad = max(0.05, 0.2 * (hi - lo))
    ax.set_ylim(lo - pad, hi + pad)
    for bar, v in zip(bars, vals):
        ax.text(bar.get_x() + bar.get_width() / 2, v, f"{v:.2f}",
                ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)

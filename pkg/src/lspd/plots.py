"""Static figures (matplotlib, Agg backend) and 16-bit PNG export."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def _square(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        side = math.isqrt(x.size)
        x = x.reshape(side, side)
    return x


def save_png16(img, path, lo: float = 0.0, hi: float = 1.0):
    """Write ``img`` clipped to ``[lo, hi]`` as a 16-bit grayscale PNG."""
    x = np.clip((_square(img) - lo) / (hi - lo), 0, 1)
    Image.fromarray(np.round(x * 65535).astype(np.uint16)).save(path)


def load_png16(path, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    a = np.asarray(Image.open(path), dtype=np.float64)
    return lo + a / 65535 * (hi - lo)


def image_grid(images: dict, path, titles_extra: dict | None = None):
    n = len(images)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.9), squeeze=False)
    for ax, (name, img) in zip(axes[0], images.items()):
        ax.imshow(_square(img), cmap="gray", vmin=0, vmax=1)
        title = name if not titles_extra or name not in titles_extra else f"{name}\n{titles_extra[name]}"
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    _save(fig, path)


def training_curves(history: list, path):
    ep = [r["epoch"] for r in history]
    fig, ax = plt.subplots(1, 2, figsize=(8, 3))
    ax[0].semilogy(ep, [r["train_loss"] for r in history], "o-")
    ax[0].set_xlabel("epoch")
    ax[0].set_ylabel("train loss")
    vp = [r["val_psnr"] for r in history]
    if any(np.isfinite(vp)):
        ax[1].plot(ep, vp, "o-")
        ax[1].set_ylabel("val PSNR (dB)")
    elif "val_loss" in history[0]:
        ax[1].semilogy(ep, [r["val_loss"] for r in history], "o-")
        ax[1].set_ylabel("val objective")
    ax[1].set_xlabel("epoch")
    _save(fig, path)


def adapt_traces(traces: dict, path):
    """PSNR against adaptation step and against operator calls."""
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.2))
    for name, tr in traces.items():
        ax[0].plot(tr.steps, tr.psnr, "o-", ms=3, label=name)
        ax[1].plot(tr.calls, tr.psnr, "o-", ms=3, label=name)
    ax[0].set_xlabel("adaptation step")
    ax[1].set_xlabel("calls on A and A^T")
    for a in ax:
        a.set_ylabel("PSNR (dB)")
        a.legend()
    _save(fig, path)


def theory_curves(report, path):
    k = np.arange(len(report.observed_mean))
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    floor = 1e-16
    ax.semilogy(k, np.maximum(report.observed_mean, floor), "k-", label="observed mean error")
    up = np.array(report.thm31)
    # per-seed checks live in the report; the figure compares seed means
    ax.semilogy(k, np.maximum(up.mean(axis=0), floor), "r--", label="upper bound")
    alt = report.steady_state_upper().mean(axis=0)
    if np.all(np.isfinite(alt)):
        ax.semilogy(k, np.maximum(alt, floor), "m-.", lw=0.8, label="upper bound, steady-state additive term")
    if report.thm32 is not None:
        lo = np.array(report.thm32)
        ax.semilogy(k, np.maximum(lo.mean(axis=0), floor), "b:", label="lower bound")
    ax.set_xlabel("layer k")
    ax.set_ylabel("||x_k - x_true||, mean over seeds")
    ax.legend(fontsize=8)
    _save(fig, path)


def eval_summary(table, path):
    names = [s["method"] for s in table.summary]
    fig, ax = plt.subplots(figsize=(1.3 * len(names) + 2, 3))
    ax.bar(names, [s["mean_psnr"] for s in table.summary])
    for i, s in enumerate(table.summary):
        ax.text(i, s["mean_psnr"], f"{s['operator_calls']:g} calls", ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("mean PSNR (dB)")
    lo = min(s["mean_psnr"] for s in table.summary)
    ax.set_ylim(lo - 3, max(s["mean_psnr"] for s in table.summary) + 1.5)
    _save(fig, path)


def pdhg_trace(trace: list, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.semilogy([r["iter"] for r in trace], [r["objective"] for r in trace])
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    _save(fig, path)

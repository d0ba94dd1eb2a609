"""Report figures written next to the CLI's JSON/JSONL outputs."""

from __future__ import annotations

import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from glstm.container import atomic_write_bytes  # noqa: E402

plt.rcParams.update({"figure.dpi": 110, "font.size": 10, "axes.spines.top": False, "axes.spines.right": False})


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    # Fixed metadata keeps PNG bytes reproducible.
    fig.savefig(buf, format="png", bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def length_histogram(generated: Sequence[int], references: Sequence[int], path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    hi = max(list(generated) + list(references) + [1])
    bins = [b - 0.5 for b in range(0, hi + 2)]
    ax.hist(references, bins=bins, density=True, alpha=0.5, color="0.5", label="references")
    ax.hist(generated, bins=bins, density=True, histtype="step", lw=1.8, color="C3", label="generated")
    ax.set_xlabel("caption length (words)")
    ax.set_ylabel("fraction")
    ax.legend(frameon=False)
    return _save(fig, path)


def bleu_bars(scores: dict, path) -> Path:
    keys = sorted(k for k in scores if k.startswith("B") and k[1:].isdigit())
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(keys, [100 * scores[k] for k in keys], color="C0")
    ax.set_ylabel("BLEU (x100)")
    ax.set_ylim(0, 100)
    for x, k in enumerate(keys):
        ax.text(x, 100 * scores[k] + 1.5, f"{100 * scores[k]:.1f}", ha="center")
    return _save(fig, path)


def correlation_curve(correlations: Sequence[float], p: float, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = range(1, len(correlations) + 1)
    ax.plot(xs, correlations, marker="o", ms=3, label="canonical correlation")
    ax.plot(xs, [c**p for c in correlations], marker=".", ms=3, ls="--", label=f"weight (corr^{p:g})")
    ax.set_xlabel("component")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    return _save(fig, path)


def training_curve(log: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    epochs = [e["epoch"] for e in log]
    ax.plot(epochs, [e["train_ppl"] for e in log], marker="o", ms=3, label="train")
    ax.plot(epochs, [e["val_ppl"] for e in log], marker="s", ms=3, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("perplexity")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    return _save(fig, path)

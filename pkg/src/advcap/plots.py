"""Figure rendering for training logs, evaluation reports and sweep tables.

Every CLI path that writes a delimited output (JSONL log, JSONL report, CSV
sweep table) also renders a PNG next to it through these helpers. Uses the
Agg backend so runs work headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

FIG_DPI = 120


def training_curves(records: list[dict], out_path) -> None:
    """Loss curve over pretraining epochs / adversarial iterations, plus the
    held-out metric trace when eval records are present."""
    pre_g = [(r["epoch"], r["loss"]) for r in records if r.get("phase") == "pretrain_gen"]
    pre_d = [(r["epoch"], r["loss"]) for r in records if r.get("phase") == "pretrain_disc"]
    adv = [(r["iter"], r["loss"]) for r in records if r.get("phase") == "adv"]
    evals = [(r["iter"], r["value"]) for r in records if "split" in r]

    panels = [(title, pts) for title, pts in (
        ("generator MLE loss", pre_g),
        ("discriminator loss", pre_d),
        ("adversarial surrogate loss", adv),
        ("held-out CIDEr-D", evals),
    ) if pts]
    n = max(1, len(panels))
    fig, axes = plt.subplots(1, n, figsize=(4.2 * n, 3.2), squeeze=False)
    for ax, (title, pts) in zip(axes[0], panels or [("no records", [(0, 0)])]):
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="." if len(xs) < 60 else None, lw=1.2)
        ax.set_title(title, fontsize=10)
        ax.set_xlabel("epoch" if "MLE" in title or "discriminator" in title else "iteration",
                      fontsize=9)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=FIG_DPI)
    plt.close(fig)


def metric_bars(scores: dict, out_path, title: str = "corpus metrics") -> None:
    """Bar chart of one metric->value mapping (CIDEr axes scaled /10 visually)."""
    names = list(scores)
    values = [scores[m] for m in names]
    fig, ax = plt.subplots(figsize=(1.1 * len(names) + 2, 3.2))
    bars = ax.bar(range(len(names)), values, color="#4878a8")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=9)
    ax.set_title(title, fontsize=10)
    ax.grid(axis="y", alpha=0.3)
    for b, v in zip(bars, values):
        ax.text(b.get_x() + b.get_width() / 2, b.get_height(), f"{v:.3f}",
                ha="center", va="bottom", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=FIG_DPI)
    plt.close(fig)


def sweep_chart(rows: list[dict], out_path, metric: str = "CIDER_D") -> None:
    """One bar per successful sweep cell for the chosen metric column."""
    ok = [r for r in rows if r.get("status") == "ok"]
    fig, ax = plt.subplots(figsize=(1.0 * max(4, len(ok)) + 2, 3.4))
    if ok:
        names = [r["cell"] for r in ok]
        values = [float(r[metric]) for r in ok]
        ax.bar(range(len(names)), values, color="#6a9a58")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=40, ha="right", fontsize=8)
    ax.set_ylabel(metric, fontsize=9)
    ax.set_title(f"sweep: held-out {metric} per cell", fontsize=10)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=FIG_DPI)
    plt.close(fig)

"""Figure rendering for the report-producing commands.

Each report CSV gets a companion PNG with the same basename.  Rendering is
headless (Agg) and uses fixed figure geometry so repeated runs produce
identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_PNG_META = {"Software": "taskpyramid"}  # fixed metadata keeps PNG bytes reproducible


def _save(fig, path):
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def plot_training_log(rows: list[dict], path) -> None:
    """Total and per-task final losses against the optimization step."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    steps = [r["step"] for r in rows]
    ax.plot(steps, [r["total_loss"] for r in rows], label="total", linewidth=2, color="black")
    for key in rows[0]:
        if key.endswith("_final"):
            ax.plot(steps, [r[key] for r in rows], label=key, alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_affinity_curves(rows, path) -> None:
    """Cross-task correspondence as a function of kernel dilation."""
    fig, ax = plt.subplots(figsize=(6, 4))
    pairs: dict[tuple[str, str], list] = {}
    for r in rows:
        pairs.setdefault((r.task_a, r.task_b), []).append(r)
    for (a, b), rs in sorted(pairs.items()):
        rs = sorted(rs, key=lambda r: r.dilation)
        ax.plot([r.dilation for r in rs], [r.correspondence for r in rs],
                marker="o", label=f"{a} / {b}")
    ax.set_xlabel("kernel dilation")
    ax.set_ylabel("pair correspondence")
    ax.set_xscale("log", base=2)
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_ablation(labels: list[str], deltas: list[float], path) -> None:
    """Multi-task performance per ablation row."""
    fig, ax = plt.subplots(figsize=(6.5, 4))
    xs = range(len(labels))
    colors = ["tab:green" if d >= 0 else "tab:red" for d in deltas]
    ax.bar(xs, deltas, color=colors)
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel("multi-task performance (%)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)

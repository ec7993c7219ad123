"""Reading campaign CSVs back, text tables and CDF figures."""

from __future__ import annotations

import csv
import os

import numpy as np

from .harness import PERCENTILES


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fp:
        rows = list(csv.DictReader(fp))
    for r in rows:
        for k in list(r):
            if k.startswith("n_"):
                r[k] = int(r[k])
            elif k.startswith("p"):
                r[k] = float(r[k]) if r[k] else float("nan")
    return rows


def read_cdf(path) -> dict[tuple[str, str], tuple[np.ndarray, np.ndarray]]:
    """``{(channel, labels): (errors, probabilities)}`` from a cdf.csv file."""
    acc: dict[tuple[str, str], list[tuple[float, float]]] = {}
    with open(path, newline="") as fp:
        for r in csv.DictReader(fp):
            acc.setdefault((r["channel"], r["labels"]), []).append((float(r["error"]), float(r["probability"])))
    return {k: (np.array([a for a, _ in v]), np.array([b for _, b in v])) for k, v in acc.items()}


def format_table(rows: list[dict]) -> str:
    head = f"{'channel':<10} {'labels':<6} {'ok':>5} {'unloc':>5} " + " ".join(f"{'p%d' % q:>8}" for q in PERCENTILES)
    lines = [head, "-" * len(head)]
    for r in rows:
        vals = " ".join(f"{r[f'p{q}']:8.3f}" if np.isfinite(r[f"p{q}"]) else f"{'-':>8}" for q in PERCENTILES)
        lines.append(f"{r['channel']:<10} {r['labels']:<6} {r['n_ok']:>5} {r['n_unlocatable']:>5} {vals}")
    return "\n".join(lines)


def plot_cdf(curves: dict, out_path, title: str | None = None, max_error: float | None = None) -> None:
    """Empirical CDFs of the 2D error, one line per (channel, labels) pair."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    styles = {"true": "-", "pred": "--"}
    for (channel, labels), (err, prob) in sorted(curves.items()):
        if err.size == 0:
            continue
        x = np.concatenate([[0.0], err])
        y = np.concatenate([[0.0], prob])
        ax.step(x, y, where="post", linestyle=styles.get(labels, "-"), label=f"{channel}, {labels} order")
    ax.set_xlabel("2D localization error [m]")
    ax.set_ylabel("CDF")
    ax.set_ylim(0, 1)
    if max_error is not None:
        ax.set_xlim(0, max_error)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def report_directory(run_dir, out_png=None, max_error: float | None = None) -> str:
    """Summary table text for a campaign directory; also writes the CDF figure."""
    rows = read_summary(os.path.join(run_dir, "summary.csv"))
    curves = read_cdf(os.path.join(run_dir, "cdf.csv"))
    out_png = out_png or os.path.join(run_dir, "cdf.png")
    plot_cdf(curves, out_png, title=os.path.basename(os.path.normpath(run_dir)), max_error=max_error)
    return format_table(rows)

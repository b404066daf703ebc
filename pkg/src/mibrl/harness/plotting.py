"""Learning-curve figure and CSV table from a metrics log."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import read_metrics

CSV_FIELDS = ("kind", "step", "episode_return_mean", "episode_return_std", "episode_return")


def curve_rows(records: list[dict]) -> list[dict]:
    """Flatten eval records, plus train records carrying an episode return, into table rows."""
    rows = []
    for rec in records:
        if rec["kind"] == "eval":
            rows.append({"kind": "eval", "step": rec["step"],
                         "episode_return_mean": rec.get("episode_return_mean"),
                         "episode_return_std": rec.get("episode_return_std"), "episode_return": None})
        elif rec["kind"] == "train" and rec.get("episode_return") is not None:
            rows.append({"kind": "train", "step": rec["step"], "episode_return_mean": None,
                         "episode_return_std": None, "episode_return": rec["episode_return"]})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if row[k] is None else row[k] for k in CSV_FIELDS})
    return buf.getvalue()


def plot_log(log_path: str | Path, out_path: str | Path) -> tuple[Path, Path, str]:
    """Render return vs. environment step to ``out_path``; write the table next to it.

    Returns ``(figure_path, csv_path, csv_text)``.
    """
    rows = curve_rows(read_metrics(log_path))
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 4))
    train = [r for r in rows if r["kind"] == "train"]
    evals = [r for r in rows if r["kind"] == "eval" and r["episode_return_mean"] is not None]
    if train:
        ax.plot([r["step"] for r in train], [r["episode_return"] for r in train],
                color="0.6", lw=1, label="training episode")
    if evals:
        steps = [r["step"] for r in evals]
        mean = [r["episode_return_mean"] for r in evals]
        std = [r["episode_return_std"] or 0.0 for r in evals]
        ax.plot(steps, mean, marker="o", color="C0", label="evaluation mean")
        ax.fill_between(steps, [m - s for m, s in zip(mean, std)], [m + s for m, s in zip(mean, std)],
                        color="C0", alpha=0.2)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("episode return")
    if train or evals:
        ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)

    text = rows_to_csv(rows)
    csv_path = out.with_suffix(".csv")
    csv_path.write_text(text)
    return out, csv_path, text

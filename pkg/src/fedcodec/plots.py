"""Figure rendering for the report command.

The delimited plot data is the primary artifact; the figures here are a
rendering of those same numbers for quick inspection. PNG output strips the
encoder's software tag so identical runs stay byte-identical.
"""

from __future__ import annotations

import pathlib

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_DPI = 120


def save_figure(fig, path) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def render_report_figures(out_dir, merged: dict) -> list[pathlib.Path]:
    """Render utility-vs-privacy and per-round trajectory figures from the
    merged report structure returned by write_report."""
    out = pathlib.Path(out_dir)
    written = [
        _utility_figure(out / "utility_vs_privacy.png", merged["levels"]),
        _rounds_figure(
            out / "rounds.png", merged["round_header"], merged["rounds"]
        ),
    ]
    return written


def _utility_figure(path, levels) -> pathlib.Path:
    labels = [str(row["level"]) for row in levels]
    medians = [row["final_median"] for row in levels]
    q1 = [row["final_q1"] for row in levels]
    q3 = [row["final_q3"] for row in levels]
    baselines = [row["baseline_median"] for row in levels]
    xs = list(range(len(labels)))

    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.fill_between(xs, q1, q3, alpha=0.25, color="tab:blue", label="IQR")
    ax.plot(xs, medians, marker="o", color="tab:blue", label="median final")
    if baselines:
        ax.axhline(
            baselines[0], color="tab:gray", linestyle="--", label="pre-update"
        )
    ax.set_xticks(xs, labels)
    ax.set_xlabel("privacy budget eps")
    ax.set_ylabel("final eval accuracy")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return save_figure(fig, path)


def _rounds_figure(path, round_header, round_rows) -> pathlib.Path:
    labels = list(round_header[1:])
    xs = [row[0] for row in round_rows]

    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for i, label in enumerate(labels):
        ys = [
            row[1 + i] if row[1 + i] is not None else float("nan")
            for row in round_rows
        ]
        ax.plot(xs, ys, marker=".", label=f"eps={label}")
    ax.set_xlabel("round")
    ax.set_ylabel("median eval accuracy")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    return save_figure(fig, path)

"""Artifact writers: deterministic CSV/JSON output, record merging, histograms.

Primary outputs must be byte-identical when a command re-runs with the same
config and seed, so nothing here embeds wall-clock state; metadata that
legitimately varies between runs (timestamps) is confined to the meta.json
sidecar and diff tooling is expected to skip that file.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime
import json
import math
import pathlib

import numpy as np

from .errors import MissingArtifactError
from .fedsim import FedRunRecord, GradientLogEntry


def fmt(v) -> str:
    """Render one CSV cell. Floats use the shortest round-trip form, the
    non-finite values spell out as inf/-inf/nan, and None becomes empty."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        x = float(v)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(x)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def parse_cell(text: str) -> float:
    """Inverse of fmt for numeric cells."""
    if text == "inf":
        return math.inf
    if text == "-inf":
        return -math.inf
    if text == "nan":
        return math.nan
    return float(text)


def write_csv(path, header, rows) -> None:
    """RFC-4180 output: CRLF line endings, minimal quoting."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
        writer.writerow([str(h) for h in header])
        for row in rows:
            writer.writerow([fmt(cell) for cell in row])


def sanitize(obj):
    """Make obj strict-JSON clean.

    Dataclasses and numpy scalars unwrap to plain types; non-finite floats
    become the strings "inf"/"-inf"/"nan" because strict JSON has no literal
    for them. parse_cell undoes the scalar part on read.
    """
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return sanitize(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [sanitize(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def write_json(path, obj) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(sanitize(obj), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def load_json(path) -> dict:
    path = pathlib.Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"missing artifact: {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_sidecar(out_dir, command: str, **extra) -> None:
    """The one artifact allowed to differ between identical runs."""
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
    write_json(
        pathlib.Path(out_dir) / "meta.json",
        {"command": command, "created": stamp, **extra},
    )


# ---------------------------------------------------------------------------
# accountant artifacts

ACCOUNTANT_HEADER = (
    "eps_target",
    "sigma",
    "gdp_eps",
    "rdp_eps_standard",
    "rdp_eps_improved",
    "rdp_order_standard",
    "rdp_order_improved",
    "rdp_eps_best",
)

TRACE_HEADER = ("sigma", "round", "cumulative_rdp_eps")


def accountant_rows(targets, report):
    if len(targets) != len(report.rows):
        raise ValueError("need exactly one target eps per report row")
    rows = []
    for eps, row in zip(targets, report.rows):
        rows.append(
            (
                eps,
                row.sigma,
                row.gdp_eps,
                row.rdp_eps_standard,
                row.rdp_eps_improved,
                row.rdp_order_standard,
                row.rdp_order_improved,
                row.rdp_eps_best,
            )
        )
    return rows


def write_accountant(out_dir, targets, report) -> None:
    out = pathlib.Path(out_dir)
    rows = accountant_rows(targets, report)
    write_csv(out / "accountant.csv", ACCOUNTANT_HEADER, rows)
    write_csv(
        out / "trace.csv",
        TRACE_HEADER,
        [(t.sigma, t.round, t.cumulative_rdp_eps) for t in report.trace],
    )
    write_json(
        out / "accountant.json",
        {
            "params": report.params,
            "rows": [dict(zip(ACCOUNTANT_HEADER, row)) for row in rows],
        },
    )


# ---------------------------------------------------------------------------
# federated run artifacts

ROUND_HEADER = (
    "round",
    "selected",
    "failures",
    "train_loss",
    "eval_accuracy",
    "cum_eps_gdp",
    "cum_eps_rdp",
    "payload_bytes",
)


def level_label(record: FedRunRecord) -> str:
    """Privacy level a run belongs to when merging sweeps: the eps budget
    when one was set, "inf" for noiseless runs, otherwise the raw sigma."""
    if record.sigma == 0.0:
        return "inf"
    if record.eps_budget is not None:
        return fmt(float(record.eps_budget))
    return f"sigma={fmt(record.sigma)}"


def round_rows(record: FedRunRecord):
    return [
        (
            r.round,
            len(r.selected),
            len(r.failures),
            r.train_loss,
            r.eval_accuracy,
            r.cum_eps_gdp,
            r.cum_eps_rdp,
            r.payload_bytes,
        )
        for r in record.rounds
    ]


def run_summary(record: FedRunRecord, label: str | None = None) -> dict:
    return {
        "status": record.status,
        "mode": record.mode,
        "seed": record.seed,
        "level": level_label(record) if label is None else label,
        "sigma": record.sigma,
        "delta": record.delta,
        "eps_budget": record.eps_budget,
        "baseline_accuracy": record.baseline_accuracy,
        "final_accuracy": record.final_accuracy,
        "final_eps_gdp": record.final_eps_gdp,
        "final_eps_rdp": record.final_eps_rdp,
        "composition_steps": record.composition_steps,
        "rounds": [dataclasses.asdict(r) for r in record.rounds],
    }


def write_run_record(out_dir, record: FedRunRecord, label: str | None = None) -> None:
    out = pathlib.Path(out_dir)
    write_csv(out / "record.csv", ROUND_HEADER, round_rows(record))
    write_json(out / "record.json", run_summary(record, label))


# ---------------------------------------------------------------------------
# multi-seed report

REPORT_HEADER = (
    "level",
    "runs",
    "sigma",
    "baseline_median",
    "final_median",
    "final_q1",
    "final_q3",
    "eps_gdp_median",
)


def _level_sort_key(label: str):
    # "inf" leads, numeric levels descend (loosest budget first), anything
    # else trails alphabetically.
    if label == "inf":
        return (0, 0.0, label)
    try:
        return (1, -float(label), label)
    except ValueError:
        return (2, 0.0, label)


def _scalar(value) -> float:
    return parse_cell(value) if isinstance(value, str) else float(value)


def merge_records(summaries):
    """Collapse multi-seed run summaries into one row per privacy level.

    Returns (level_rows, round_header, round_rows). level_rows follow
    REPORT_HEADER with medians and quartiles of final accuracy; the round
    table holds per-round median accuracy per level (plot data), blank where
    a level stopped early.
    """
    summaries = list(summaries)
    if not summaries:
        raise ValueError("no run summaries to merge")
    groups: dict[str, list[dict]] = {}
    for s in summaries:
        groups.setdefault(str(s["level"]), []).append(s)
    labels = sorted(groups, key=_level_sort_key)

    level_rows = []
    per_round: dict[str, list[float | None]] = {}
    for label in labels:
        runs = groups[label]
        finals = [float(r["final_accuracy"]) for r in runs]
        bases = [float(r["baseline_accuracy"]) for r in runs]
        sigmas = [float(r["sigma"]) for r in runs]
        eps = [_scalar(r["final_eps_gdp"]) for r in runs]
        level_rows.append(
            (
                label,
                len(runs),
                float(np.median(sigmas)),
                float(np.median(bases)),
                float(np.median(finals)),
                float(np.quantile(finals, 0.25)),
                float(np.quantile(finals, 0.75)),
                float(np.median(eps)),
            )
        )
        depth = max(len(r["rounds"]) for r in runs)
        medians: list[float | None] = []
        for t in range(depth):
            vals = [
                float(r["rounds"][t]["eval_accuracy"])
                for r in runs
                if t < len(r["rounds"])
            ]
            medians.append(float(np.median(vals)) if vals else None)
        per_round[label] = medians

    depth = max(len(v) for v in per_round.values())
    round_header = ("round", *labels)
    round_rows_out = []
    for t in range(depth):
        row: list = [t]
        for label in labels:
            series = per_round[label]
            row.append(series[t] if t < len(series) else None)
        round_rows_out.append(tuple(row))
    return level_rows, round_header, round_rows_out


def write_report(out_dir, summaries) -> dict:
    """Write the merged report (CSV + JSON + plot-data CSV); returns the
    merged structure so callers can render figures from it."""
    level_rows, round_header, round_rows_out = merge_records(summaries)
    out = pathlib.Path(out_dir)
    write_csv(out / "report.csv", REPORT_HEADER, level_rows)
    write_csv(out / "rounds.csv", round_header, round_rows_out)
    merged = {
        "levels": [dict(zip(REPORT_HEADER, row)) for row in level_rows],
        "round_header": list(round_header),
        "rounds": [list(r) for r in round_rows_out],
    }
    write_json(out / "report.json", merged)
    return merged


# ---------------------------------------------------------------------------
# gradient log persistence and histograms

GRADIENT_INDEX_HEADER = (
    "layer",
    "module",
    "epoch",
    "part",
    "rows",
    "cols",
    "start",
    "stop",
)

HISTOGRAM_HEADER = ("layer", "epoch", "part", "bin", "lo", "hi", "count")


def save_gradient_log(out_dir, entries) -> None:
    """One flat float64 blob plus a CSV index; .npy carries no timestamps,
    which keeps the pair byte-stable (a zip container would not be)."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chunks: list[np.ndarray] = []
    index_rows = []
    start = 0
    for e in entries:
        v = np.asarray(e.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("factor tensors are 2-D")
        chunks.append(v.ravel())
        stop = start + v.size
        index_rows.append(
            (e.layer, e.module, e.epoch, e.part, v.shape[0], v.shape[1], start, stop)
        )
        start = stop
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.float64)
    np.save(out / "gradients.npy", blob)
    write_csv(out / "gradients_index.csv", GRADIENT_INDEX_HEADER, index_rows)


def load_gradient_log(out_dir) -> list[GradientLogEntry]:
    out = pathlib.Path(out_dir)
    blob_path = out / "gradients.npy"
    index_path = out / "gradients_index.csv"
    if not blob_path.is_file() or not index_path.is_file():
        raise MissingArtifactError(
            f"gradient log not found under {out} (run simulate with gradient "
            "logging enabled first)"
        )
    blob = np.load(blob_path)
    entries = []
    with open(index_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            start, stop = int(row["start"]), int(row["stop"])
            shape = (int(row["rows"]), int(row["cols"]))
            entries.append(
                GradientLogEntry(
                    layer=int(row["layer"]),
                    module=row["module"],
                    epoch=int(row["epoch"]),
                    part=row["part"],
                    values=blob[start:stop].reshape(shape).copy(),
                )
            )
    return entries


def build_histograms(entries, bins: int = 40):
    """Fixed-bin histograms per (layer, epoch, part), pooled over modules.

    One global set of bin edges spans every entry so the cells stay
    comparable across epochs. A degenerate spread (all values identical)
    collapses to a single unit-width bin centered on that value.
    """
    entries = list(entries)
    if not entries:
        raise ValueError("no logged gradients to histogram")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    flat = np.concatenate([np.asarray(e.values, dtype=float).ravel() for e in entries])
    if not np.all(np.isfinite(flat)):
        raise ValueError("gradient log contains non-finite values")
    lo, hi = float(flat.min()), float(flat.max())
    if lo == hi:
        edges = np.array([lo - 0.5, hi + 0.5])
    else:
        edges = np.linspace(lo, hi, bins + 1)

    groups: dict[tuple[int, int, str], list[np.ndarray]] = {}
    for e in entries:
        key = (e.layer, e.epoch, e.part)
        groups.setdefault(key, []).append(np.asarray(e.values, dtype=float).ravel())

    rows = []
    for layer, epoch, part in sorted(groups):
        vals = np.concatenate(groups[(layer, epoch, part)])
        counts, _ = np.histogram(vals, bins=edges)
        for b, count in enumerate(counts):
            rows.append(
                (layer, epoch, part, b, float(edges[b]), float(edges[b + 1]), int(count))
            )
    return HISTOGRAM_HEADER, rows

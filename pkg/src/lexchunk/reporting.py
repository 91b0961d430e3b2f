"""Benchmark report emission: CSV summary, JSON companion, and bar-chart
figures rendered to SVG files.

The CSV starts with one ``#``-prefixed stamp line (seed, config hash,
provider kinds) so every artifact records how it was produced; parsers that
honor comment lines read the table unchanged.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

CSV_COLUMNS = (
    "method",
    "mean_recall",
    "ci_low",
    "ci_high",
    "mean_latency_ms",
    "build_seconds",
    "persisted_mb",
)


@dataclass
class MethodSummary:
    method: str
    mean_recall: float
    ci_low: float
    ci_high: float
    mean_latency_ms: float
    build_seconds: float
    persisted_mb: float


def write_report_csv(
    rows: Sequence[MethodSummary], stamp: Mapping[str, object], path: str | Path
) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write("# stamp: " + json.dumps(dict(stamp), sort_keys=True) + "\n")
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.method,
                    f"{row.mean_recall:.6f}",
                    f"{row.ci_low:.6f}",
                    f"{row.ci_high:.6f}",
                    f"{row.mean_latency_ms:.4f}",
                    f"{row.build_seconds:.4f}",
                    f"{row.persisted_mb:.4f}",
                ]
            )


def write_report_json(report: Mapping[str, object], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")


def _bar_figure(
    labels: Sequence[str],
    values: Sequence[float],
    ylabel: str,
    title: str,
    path: Path,
    errors: Sequence[tuple[float, float]] | None = None,
) -> None:
    fig, ax = plt.subplots(figsize=(max(6.0, 0.55 * len(labels) + 2.0), 4.0))
    x = range(len(labels))
    if errors is not None:
        lower = [max(v - lo, 0.0) for v, (lo, _) in zip(values, errors)]
        upper = [max(hi - v, 0.0) for v, (_, hi) in zip(values, errors)]
        ax.bar(x, values, yerr=[lower, upper], capsize=3, color="#4878a8")
    else:
        ax.bar(x, values, color="#4878a8")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def render_figures(
    rows: Sequence[MethodSummary], out_dir: str | Path, k_sections: int = 10
) -> list[Path]:
    """Render the four benchmark bar charts (recall with CI bars, latency,
    build time, index size) as SVG files and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = [row.method for row in rows]
    paths = []

    recall_path = out_dir / "recall.svg"
    _bar_figure(
        labels,
        [row.mean_recall for row in rows],
        f"Recall@{k_sections}",
        f"Mean section-level Recall@{k_sections} with 95% CI",
        recall_path,
        errors=[(row.ci_low, row.ci_high) for row in rows],
    )
    paths.append(recall_path)

    latency_path = out_dir / "latency.svg"
    _bar_figure(
        labels,
        [row.mean_latency_ms for row in rows],
        "latency (ms)",
        "Mean retrieval latency (search + aggregation)",
        latency_path,
    )
    paths.append(latency_path)

    build_path = out_dir / "build_time.svg"
    _bar_figure(
        labels,
        [row.build_seconds for row in rows],
        "build time (s)",
        "Offline index build time",
        build_path,
    )
    paths.append(build_path)

    size_path = out_dir / "index_size.svg"
    _bar_figure(
        labels,
        [row.persisted_mb for row in rows],
        "size (MB)",
        "Persisted index size (vectors + routing metadata)",
        size_path,
    )
    paths.append(size_path)
    return paths

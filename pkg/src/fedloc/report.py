from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ResultsNotFoundError
from .results import MANIFEST_NAME, fmt, write_csv, write_json

logger = logging.getLogger(__name__)

BOXPLOT_HEADER = ("variant", "min", "q1", "median", "q3", "max")


@dataclass
class ReportBundle:
    results_dir: Path
    report_dir: Path
    artifacts: list[Path] = field(default_factory=list)


def _read_rows(path: Path) -> list[dict[str, str]]:
    with path.open("r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def boxplot_stats(errors: np.ndarray) -> tuple[float, float, float, float, float]:
    q1, median, q3 = np.percentile(errors, [25, 50, 75])
    return float(np.min(errors)), float(q1), float(median), float(q3), float(np.max(errors))


def _errors_by_variant(rows: list[dict[str, str]]) -> dict[str, list[float]]:
    grouped: dict[str, list[float]] = {}
    for row in rows:
        grouped.setdefault(row["variant"], []).append(float(row["error_m"]))
    return grouped


def _building_means(rows: list[dict[str, str]]) -> list[list[str]]:
    sums: dict[tuple[str, str], list[float]] = {}
    for row in rows:
        sums.setdefault((row["variant"], row["building"]), []).append(float(row["error_m"]))
    return [[variant, building, fmt(np.mean(values))] for (variant, building), values in sums.items()]


def build_report(results_dir: Path) -> ReportBundle:
    """Turn a results directory into plot-ready tables under ``<results_dir>/report``."""

    results_dir = Path(results_dir)
    manifest_path = results_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ResultsNotFoundError(f"{results_dir} has no {MANIFEST_NAME}; run an experiment command first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    report_dir = results_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    bundle = ReportBundle(results_dir=results_dir, report_dir=report_dir)

    sweep_path = results_dir / "h_sweep.csv"
    if sweep_path.is_file():
        sweep = _read_rows(sweep_path)
        bundle.artifacts.append(
            write_csv(
                report_dir / "h_vs_error.csv", ("h", "mean_error_m"), ([r["h"], r["mean_error_m"]] for r in sweep)
            )
        )
        bundle.artifacts.append(
            write_csv(
                report_dir / "h_vs_latency.csv", ("h", "mean_latency_s"), ([r["h"], r["mean_latency_s"]] for r in sweep)
            )
        )

    results_path = results_dir / "results.csv"
    if results_path.is_file():
        rows = _read_rows(results_path)
        box_rows = [
            [variant, *(fmt(v) for v in boxplot_stats(np.array(errors)))]
            for variant, errors in _errors_by_variant(rows).items()
        ]
        bundle.artifacts.append(write_csv(report_dir / "aggregator_boxplot.csv", BOXPLOT_HEADER, box_rows))
        bundle.artifacts.append(
            write_csv(report_dir / "building_bars.csv", ("variant", "building", "mean_error_m"), _building_means(rows))
        )

    for source in sorted(results_dir.glob("heatmap_*.csv")):
        bundle.artifacts.append(Path(shutil.copyfile(source, report_dir / source.name)))
    traces = results_dir / "rp_traces.csv"
    if traces.is_file():
        bundle.artifacts.append(Path(shutil.copyfile(traces, report_dir / traces.name)))

    index = {
        "command": manifest.get("command"),
        "config_sha256": manifest.get("config_sha256"),
        "artifacts": sorted(p.name for p in bundle.artifacts),
    }
    bundle.artifacts.append(write_json(report_dir / "report.json", index))
    logger.info("report bundle with %d files written to %s", len(bundle.artifacts), report_dir)
    return bundle

"""Result artifacts: long-format CSVs, summaries, heatmaps and the run manifest.

Floats are written with ``repr`` and JSON with sorted keys, so reruns of the same
configuration produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .scenario import ScenarioConfig
from .simulator import HSweepRow, RpTrace, ScenarioResult

logger = logging.getLogger(__name__)

RESULTS_HEADER = ("variant", "seed", "building", "round", "client", "device", "rp", "error_m", "bytes")
ROUNDS_HEADER = ("variant", "seed", "building", "round", "mean_error_m", "local_mean_error_m", "bytes", "latency_s")
H_SWEEP_HEADER = ("h", "mean_error_m", "mean_latency_s")
RP_TRACES_HEADER = ("variant", "seed", "rp", "error_m")
MANIFEST_NAME = "manifest.json"


def fmt(value: float) -> str:
    return repr(float(value))


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_json(path: Path, data: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _result_rows(results: Mapping[str, ScenarioResult]) -> Iterable[list[Any]]:
    for variant, result in results.items():
        for report in result.rounds:
            for client in report.clients:
                for rp, err in zip(client.rp_ids, client.errors):
                    yield [
                        variant,
                        report.seed,
                        report.building_id,
                        report.round,
                        client.client_id,
                        client.device_id,
                        rp,
                        fmt(err),
                        client.bytes_uplinked,
                    ]


def _round_rows(results: Mapping[str, ScenarioResult]) -> Iterable[list[Any]]:
    for variant, result in results.items():
        for r in result.rounds:
            yield [
                variant,
                r.seed,
                r.building_id,
                r.round,
                fmt(r.mean_error_m),
                fmt(r.local_mean_error_m),
                r.bytes_uplinked,
                fmt(r.latency_s),
            ]


def write_heatmap(path: Path, result: ScenarioResult) -> Path:
    heatmap = result.heatmap
    assert heatmap is not None
    rows = [[device, *(fmt(v) for v in heatmap.values[i])] for i, device in enumerate(heatmap.devices)]
    return write_csv(path, ("device", *heatmap.buildings), rows)


def write_results(out_dir: Path, results: Mapping[str, ScenarioResult]) -> list[Path]:
    """results.csv, rounds.csv, summary.json and one heatmap per variant."""

    out_dir = Path(out_dir)
    paths = [
        write_csv(out_dir / "results.csv", RESULTS_HEADER, _result_rows(results)),
        write_csv(out_dir / "rounds.csv", ROUNDS_HEADER, _round_rows(results)),
        write_json(out_dir / "summary.json", {variant: r.summary for variant, r in results.items()}),
    ]
    for variant, result in results.items():
        paths.append(write_heatmap(out_dir / f"heatmap_{variant}.csv", result))
    logger.info("wrote %d result files to %s", len(paths), out_dir)
    return paths


def write_h_sweep(out_dir: Path, rows: Sequence[HSweepRow]) -> Path:
    return write_csv(
        Path(out_dir) / "h_sweep.csv",
        H_SWEEP_HEADER,
        ([f"{row.h:g}", fmt(row.mean_error_m), fmt(row.mean_latency_s)] for row in rows),
    )


def write_rp_traces(out_dir: Path, traces: Mapping[str, Sequence[RpTrace]]) -> Path:
    rows = (
        [variant, trace.seed, rp, fmt(err)]
        for variant, variant_traces in traces.items()
        for trace in variant_traces
        for rp, err in zip(trace.rp_ids, trace.errors)
    )
    return write_csv(Path(out_dir) / "rp_traces.csv", RP_TRACES_HEADER, rows)


def write_manifest(
    out_dir: Path,
    *,
    command: str,
    cfg: ScenarioConfig | None,
    artifacts: Sequence[Path],
    overrides: Mapping[str, Any] | None = None,
    variants: Sequence[str] = (),
) -> Path:
    """Everything needed to rerun the command bit-exactly; no timestamps."""

    from . import __version__

    out_dir = Path(out_dir)
    manifest: dict[str, Any] = {
        "tool": "fedloc",
        "version": __version__,
        "command": command,
        "overrides": dict(overrides or {}),
        "variants": list(variants),
        "artifacts": sorted(str(Path(p).resolve().relative_to(out_dir.resolve())) for p in artifacts),
    }
    if cfg is not None:
        manifest["config_sha256"] = cfg.config_hash()
        manifest["seeds"] = list(cfg.seeds)
        manifest["config"] = cfg.to_dict()
    return write_json(out_dir / MANIFEST_NAME, manifest)

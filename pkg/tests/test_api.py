from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from fedloc import ScenarioOverrides, Workbench, open_workbench
from fedloc.localizer import accuracy, load_checkpoint
from fedloc.nn_core import flatten
from fedloc.scenario import ScenarioConfig
from fedloc.simulator import pretrain_building


def test_open_workbench_uses_tool_defaults(tmp_path: Path) -> None:
    bench = open_workbench(tmp_path)
    assert bench.jobs == 1
    assert bench.config.output_dir == "results"
    assert open_workbench(tmp_path, jobs=3).jobs == 3


def test_workbench_run_writes_artifacts(tmp_path: Path, tiny_scenario: ScenarioConfig) -> None:
    bench = Workbench(tmp_path)
    outcome = bench.run(tiny_scenario, out=tmp_path / "run")
    assert list(outcome.results) == ["fedhil"]
    names = {p.name for p in outcome.artifacts}
    assert {"results.csv", "rounds.csv", "summary.json", "heatmap_fedhil.csv"} <= names
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["config_sha256"] == tiny_scenario.config_hash()
    assert manifest["variants"] == ["fedhil"]


def test_workbench_defaults_to_configured_output_dir(tmp_path: Path, tiny_scenario: ScenarioConfig) -> None:
    (tmp_path / ".fedlocrc").write_text('output_dir = "artifacts"\n', encoding="utf-8")
    outcome = Workbench(tmp_path).run(tiny_scenario.with_overrides(rounds=1))
    assert outcome.out_dir == tmp_path.resolve() / "artifacts"
    assert (outcome.out_dir / "manifest.json").is_file()


def test_workbench_applies_overrides(tmp_path: Path, tiny_scenario: ScenarioConfig) -> None:
    outcome = Workbench(tmp_path).run(
        tiny_scenario, out=tmp_path / "o", overrides=ScenarioOverrides(aggregator="fedavg", rounds=1)
    )
    assert list(outcome.results) == ["fedavg"]
    assert outcome.config.rounds == 1
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["overrides"] == {"aggregator": "fedavg", "rounds": 1}


def test_workbench_pretrain_checkpoint_reloads(tmp_path: Path, tiny_scenario: ScenarioConfig) -> None:
    summaries = Workbench(tmp_path).pretrain(tiny_scenario, out=tmp_path / "models")
    assert len(summaries) == 1
    summary = summaries[0]
    assert summary.sae_snapshot is not None and summary.sae_snapshot.is_file()

    net, snn_cfg, rp_map = load_checkpoint(summary.checkpoint)
    pre = pretrain_building(tiny_scenario.floorplans[0], tiny_scenario.training_device, tiny_scenario.training, 0)
    assert snn_cfg == pre.snn_config
    assert rp_map.rp_ids == pre.offline.rp_map.rp_ids
    assert np.array_equal(flatten(net).values, flatten(pre.gm).values)
    assert summary.offline_accuracy == accuracy(net, pre.offline)


def test_workbench_gen_data_counts(tmp_path: Path, tiny_scenario: ScenarioConfig) -> None:
    summaries = Workbench(tmp_path).gen_data(tiny_scenario, out=tmp_path / "data")
    rp_count = len(tiny_scenario.floorplans[0].rp_path)
    assert [(s.building_id, s.rp_count, s.ap_count) for s in summaries] == [("T1", rp_count, 8)]
    assert summaries[0].offline_samples == 5 * rp_count
    assert summaries[0].online_samples == 2 * rp_count
    assert all(p.is_file() for p in summaries[0].paths)


def test_workbench_noise_writes_traces(tmp_path: Path, tiny_scenario: ScenarioConfig) -> None:
    outcome = Workbench(tmp_path).noise(tiny_scenario.with_overrides(rounds=1), out=tmp_path / "noise")
    assert set(outcome.results) == {"fedavg", "fedsgd", "fedhil"}
    trace_path = tmp_path / "noise" / "rp_traces.csv"
    assert trace_path in outcome.artifacts
    lines = trace_path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "variant,seed,rp,error_m"
    assert len(lines) == 1 + 3 * len(tiny_scenario.floorplans[0].rp_path)


def test_workbench_report_builds_tables(tmp_path: Path, tiny_scenario: ScenarioConfig) -> None:
    bench = Workbench(tmp_path)
    bench.compare(tiny_scenario.with_overrides(rounds=1), out=tmp_path / "cmp")
    bundle = bench.report(tmp_path / "cmp")
    names = {p.name for p in bundle.artifacts}
    assert {"aggregator_boxplot.csv", "building_bars.csv", "report.json", "heatmap_frozen.csv"} <= names
    box = (bundle.report_dir / "aggregator_boxplot.csv").read_text(encoding="utf-8").splitlines()
    assert box[0] == "variant,min,q1,median,q3,max"
    assert [line.split(",")[0] for line in box[1:]] == ["fedavg", "fedsgd", "fedhil", "frozen"]

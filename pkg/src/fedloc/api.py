from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .config import load_config
from .dataset import CaptureSummary, build_offline_online_split, generate_radio_map, save_csv
from .localizer import accuracy, save_checkpoint
from .report import ReportBundle, build_report
from .results import write_h_sweep, write_json, write_manifest, write_results, write_rp_traces
from .sae import save_sae
from .scenario import ScenarioConfig, ScenarioOverrides, load_scenario_config
from .simulator import (
    HSweepResult,
    ScenarioResult,
    compare_aggregators,
    h_sweep,
    noise_susceptibility,
    pretrain_building,
    run_scenario,
    sae_ablation,
    scalability_suite,
    skew_suite,
    stability_spread,
)

logger = logging.getLogger(__name__)


@dataclass
class ExperimentOutcome:
    out_dir: Path
    config: ScenarioConfig
    results: dict[str, ScenarioResult]
    artifacts: list[Path] = field(default_factory=list)
    sweep: HSweepResult | None = None


@dataclass
class PretrainSummary:
    building_id: str
    seed: int
    final_loss: float | None
    offline_accuracy: float
    checkpoint: Path
    sae_snapshot: Path | None = None


class Workbench:
    """Library-friendly interface to the experiment commands; the CLI is a thin wrapper over it."""

    def __init__(self, root: Path, *, jobs: int | None = None) -> None:
        self.root = root.resolve()
        self.config = load_config(self.root)
        self.jobs = jobs or self.config.jobs

    # Plumbing -------------------------------------------------------------------------
    def load_scenario(
        self, scenario: Path | ScenarioConfig, overrides: ScenarioOverrides | None = None
    ) -> ScenarioConfig:
        if isinstance(scenario, ScenarioConfig):
            cfg = scenario
        else:
            cfg = load_scenario_config(Path(scenario), default_bandwidth=self.config.bandwidth_bytes_per_s)
        return overrides.apply(cfg) if overrides else cfg

    def output_dir(self, out: Path | None) -> Path:
        path = Path(out) if out is not None else self.root / self.config.output_dir
        path.mkdir(parents=True, exist_ok=True)
        return path

    def _finish(
        self,
        command: str,
        out_dir: Path,
        cfg: ScenarioConfig,
        results: Mapping[str, ScenarioResult],
        overrides: ScenarioOverrides | None,
        extra: list[Path] | None = None,
    ) -> ExperimentOutcome:
        artifacts = write_results(out_dir, results) + list(extra or [])
        write_manifest(
            out_dir,
            command=command,
            cfg=cfg,
            artifacts=artifacts,
            overrides=overrides.to_dict() if overrides else None,
            variants=list(results),
        )
        return ExperimentOutcome(out_dir=out_dir, config=cfg, results=dict(results), artifacts=artifacts)

    # Data and pretraining ----------------------------------------------------------------
    def gen_data(
        self, scenario: Path | ScenarioConfig, *, out: Path | None = None, overrides: ScenarioOverrides | None = None
    ) -> list[CaptureSummary]:
        """Write offline (training device) and online (one per client device) CSVs per seed and building."""

        cfg = self.load_scenario(scenario, overrides)
        out_dir = self.output_dir(out)
        testing = [group.profile for group in cfg.clients]
        summaries: list[CaptureSummary] = []
        for seed in cfg.seeds:
            for floorplan in cfg.floorplans:
                radio_map = generate_radio_map(floorplan, seed)
                offline, online = build_offline_online_split(
                    radio_map,
                    (cfg.training_device, testing),
                    seed,
                    offline_per_rp=cfg.training.offline_per_rp,
                    online_per_rp=cfg.training.online_per_rp,
                )
                bid = floorplan.building_id
                offline_path = out_dir / f"offline_{bid}_seed{seed}.csv"
                online_path = out_dir / f"online_{bid}_seed{seed}.csv"
                save_csv(offline, offline_path)
                save_csv(online, online_path)
                summaries.append(
                    CaptureSummary(
                        building_id=bid,
                        rp_count=len(offline.rp_map),
                        ap_count=offline.ap_count,
                        offline_samples=len(offline),
                        online_samples=len(online),
                        paths=[offline_path, online_path],
                    )
                )
        floorplans = write_json(out_dir / "floorplans.json", {"floorplans": cfg.to_dict()["floorplans"]})
        artifacts = [p for s in summaries for p in s.paths] + [floorplans]
        write_manifest(
            out_dir,
            command="gen-data",
            cfg=cfg,
            artifacts=artifacts,
            overrides=overrides.to_dict() if overrides else None,
        )
        return summaries

    def pretrain(
        self, scenario: Path | ScenarioConfig, *, out: Path | None = None, overrides: ScenarioOverrides | None = None
    ) -> list[PretrainSummary]:
        """Train the GM (and SAE when augmentation is on) for every seed and building."""

        cfg = self.load_scenario(scenario, overrides)
        out_dir = self.output_dir(out)
        summaries: list[PretrainSummary] = []
        artifacts: list[Path] = []
        for seed in cfg.seeds:
            for floorplan in cfg.floorplans:
                pre = pretrain_building(floorplan, cfg.training_device, cfg.training, seed)
                bid = floorplan.building_id
                weights, sidecar = save_checkpoint(
                    pre.gm, pre.snn_config, pre.offline.rp_map, out_dir / f"gm_{bid}_seed{seed}"
                )
                artifacts += [weights, sidecar]
                sae_path = None
                if pre.sae is not None:
                    sae_path = out_dir / f"sae_{bid}_seed{seed}.fsae"
                    save_sae(pre.sae, sae_path)
                    artifacts.append(sae_path)
                summaries.append(
                    PretrainSummary(
                        building_id=bid,
                        seed=seed,
                        final_loss=pre.offline_losses[-1] if pre.offline_losses else None,
                        offline_accuracy=accuracy(pre.gm, pre.offline),
                        checkpoint=weights,
                        sae_snapshot=sae_path,
                    )
                )
        write_manifest(
            out_dir,
            command="pretrain",
            cfg=cfg,
            artifacts=artifacts,
            overrides=overrides.to_dict() if overrides else None,
        )
        return summaries

    # Experiments ------------------------------------------------------------------------
    def run(
        self, scenario: Path | ScenarioConfig, *, out: Path | None = None, overrides: ScenarioOverrides | None = None
    ) -> ExperimentOutcome:
        cfg = self.load_scenario(scenario, overrides)
        result = run_scenario(cfg, jobs=self.jobs)
        return self._finish("run", self.output_dir(out), cfg, {result.variant: result}, overrides)

    def sweep_h(
        self, scenario: Path | ScenarioConfig, *, out: Path | None = None, overrides: ScenarioOverrides | None = None
    ) -> ExperimentOutcome:
        cfg = self.load_scenario(scenario, overrides)
        out_dir = self.output_dir(out)
        sweep = h_sweep(cfg, jobs=self.jobs)
        results = {result.variant: result for result in sweep.results.values()}
        outcome = self._finish("sweep-h", out_dir, cfg, results, overrides, [write_h_sweep(out_dir, sweep.rows)])
        outcome.sweep = sweep
        return outcome

    def compare(
        self, scenario: Path | ScenarioConfig, *, out: Path | None = None, overrides: ScenarioOverrides | None = None
    ) -> ExperimentOutcome:
        cfg = self.load_scenario(scenario, overrides)
        return self._finish("compare", self.output_dir(out), cfg, compare_aggregators(cfg, jobs=self.jobs), overrides)

    def skew(
        self, scenario: Path | ScenarioConfig, *, out: Path | None = None, overrides: ScenarioOverrides | None = None
    ) -> ExperimentOutcome:
        cfg = self.load_scenario(scenario, overrides)
        results = skew_suite(cfg, jobs=self.jobs)
        self._log_spread("skew", results, cfg.stability_band_m)
        return self._finish("skew", self.output_dir(out), cfg, results, overrides)

    def scale(
        self, scenario: Path | ScenarioConfig, *, out: Path | None = None, overrides: ScenarioOverrides | None = None
    ) -> ExperimentOutcome:
        cfg = self.load_scenario(scenario, overrides)
        results = scalability_suite(cfg, jobs=self.jobs)
        self._log_spread("scale", results, cfg.stability_band_m)
        return self._finish("scale", self.output_dir(out), cfg, results, overrides)

    def noise(
        self, scenario: Path | ScenarioConfig, *, out: Path | None = None, overrides: ScenarioOverrides | None = None
    ) -> ExperimentOutcome:
        cfg = self.load_scenario(scenario, overrides)
        out_dir = self.output_dir(out)
        study = noise_susceptibility(cfg, jobs=self.jobs)
        return self._finish(
            "noise", out_dir, cfg, study.results, overrides, [write_rp_traces(out_dir, study.traces)]
        )

    def ablate_sae(
        self, scenario: Path | ScenarioConfig, *, out: Path | None = None, overrides: ScenarioOverrides | None = None
    ) -> ExperimentOutcome:
        cfg = self.load_scenario(scenario, overrides)
        return self._finish("ablate-sae", self.output_dir(out), cfg, sae_ablation(cfg, jobs=self.jobs), overrides)

    def report(self, results_dir: Path) -> ReportBundle:
        return build_report(results_dir)

    @staticmethod
    def _log_spread(suite: str, results: Mapping[str, ScenarioResult], band: float) -> None:
        spread = stability_spread(dict(results))
        if spread > band:
            logger.warning("%s suite spread %.3f m exceeds the stability band of %.3f m", suite, spread, band)
        else:
            logger.info("%s suite spread %.3f m within %.3f m", suite, spread, band)


def open_workbench(path: Path | str = ".", *, jobs: int | None = None) -> Workbench:
    return Workbench(Path(path), jobs=jobs)

"""Federated rounds over synthetic buildings, plus the experiment suites built on them.

Every stochastic draw is keyed on ``(seed, purpose, building, client, round)`` via
:func:`fedloc.dataset.derive_rng`, never on the aggregator or H value, so variants
run inside one experiment see identical radio maps, captures and noise.
"""

from __future__ import annotations

import functools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from .dataset import (
    DeviceProfile,
    FingerprintDataset,
    FloorplanSpec,
    RadioMap,
    capture,
    derive_rng,
    generate_radio_map,
)
from .errors import ConfigError, FedlocError, ScenarioError
from .federation import (
    ClientUpdate,
    FederatedServer,
    HParam,
    decode_dense,
    decode_sparse,
    encode_dense,
    encode_sparse,
    select_top_h,
    uplink_latency,
)
from .localizer import SnnConfig, build_snn, evaluate, retrain_local, train_offline
from .nn_core import Network, WeightVector, flatten, gradient, unflatten
from .sae import AeSpec, SaeTrainReport, StackedSae, augment, train_end_to_end, train_layerwise
from .scenario import (
    AGGREGATORS,
    AUGMENTATIONS,
    BASELINE_AGGREGATOR,
    NoiseInjection,
    ScenarioConfig,
    TrainingSettings,
    scale_variants,
    skew_variants,
)

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def derived_seed(seed: int, *keys: object) -> int:
    return int(derive_rng(seed, *keys).integers(0, 2**31 - 1))


# Pretraining -------------------------------------------------------------------------


@dataclass
class PretrainedBuilding:
    """Everything the offline phase produces for one (seed, building)."""

    floorplan: FloorplanSpec
    radio_map: RadioMap
    offline: FingerprintDataset
    training_set: FingerprintDataset
    snn_config: SnnConfig
    gm: Network
    offline_losses: list[float]
    sae: StackedSae | None = None
    sae_report: SaeTrainReport | None = None


@functools.lru_cache(maxsize=64)
def pretrain_building(
    floorplan: FloorplanSpec, training_device: DeviceProfile, training: TrainingSettings, seed: int
) -> PretrainedBuilding:
    """Radio map, offline survey with the training device, optional SAE augmentation, GM training.

    Results are cached, so every variant of an experiment starts from the same GM.
    Callers must treat the returned networks as read-only.
    """

    bid = floorplan.building_id
    radio_map = generate_radio_map(floorplan, seed)
    offline = capture(
        radio_map, training_device, derive_rng(seed, "offline", bid), per_rp=training.offline_per_rp
    )

    sae: StackedSae | None = None
    report: SaeTrainReport | None = None
    training_set = offline
    if training.augmentation != "none":
        spec = AeSpec.default_for(offline.ap_count)
        sae_cfg = training.sae.with_overrides(seed=derived_seed(seed, "sae", bid))
        if training.augmentation == "custom":
            sae, report = train_layerwise(offline, spec, sae_cfg, freeze_borrowed=training.freeze_borrowed)
        else:
            sae, report = train_end_to_end(offline, spec, sae_cfg)
        training_set = augment(sae, offline, multiplicity=training.multiplicity)

    snn_cfg = SnnConfig(
        input_dim=offline.ap_count,
        class_count=len(offline.rp_map),
        output_activation=training.output_activation,
    )
    net = build_snn(snn_cfg, derived_seed(seed, "snn-init", bid))
    result = train_offline(net, training_set, training.offline.with_overrides(seed=derived_seed(seed, "snn", bid)))
    logger.info(
        "pretrained GM for %s seed %d on %d fingerprints (%s augmentation)",
        bid,
        seed,
        len(training_set),
        training.augmentation,
    )
    return PretrainedBuilding(
        floorplan=floorplan,
        radio_map=radio_map,
        offline=offline,
        training_set=training_set,
        snn_config=snn_cfg,
        gm=result.network,
        offline_losses=result.losses,
        sae=sae,
        sae_report=report,
    )


# Clients -------------------------------------------------------------------------------


def noisy_rps(radio_map: RadioMap, noise: NoiseInjection, seed: int) -> frozenset[str]:
    """The RPs that receive burst noise; fixed per (seed, building)."""

    if not noise.active:
        return frozenset()
    rp_ids = radio_map.rp_ids
    count = int(round(noise.rp_fraction * len(rp_ids)))
    rng = derive_rng(seed, "noise-rps", radio_map.floorplan.building_id)
    chosen = rng.choice(len(rp_ids), size=count, replace=False)
    return frozenset(rp_ids[i] for i in chosen)


@dataclass(frozen=True)
class ClientRecord:
    """Per-round metrics one client reports; no fingerprints."""

    client_id: str
    device_id: str
    rp_ids: tuple[str, ...]
    errors: np.ndarray  # pre-retrain, one per online sample
    local_errors: np.ndarray  # post-retrain
    bytes_uplinked: int = 0


@dataclass(frozen=True)
class Client:
    client_id: str
    profile: DeviceProfile

    def capture_online(self, radio_map: RadioMap, cfg: ScenarioConfig, seed: int) -> FingerprintDataset:
        """The client's online walk; the same fingerprints are reused every round."""

        rng = derive_rng(seed, "online", radio_map.floorplan.building_id, self.client_id)
        return capture(
            radio_map,
            self.profile,
            rng,
            per_rp=cfg.training.online_per_rp,
            burst_rps=noisy_rps(radio_map, cfg.noise_injection, seed),
            burst_std_db=cfg.noise_injection.burst_std_db,
        )

    def local_round(
        self, gm: Network, radio_map: RadioMap, cfg: ScenarioConfig, seed: int, round_index: int
    ) -> tuple[ClientRecord, ClientUpdate | None]:
        """Capture, evaluate the received GM, retrain locally and build the uplink update."""

        bid = radio_map.floorplan.building_id
        data = self.capture_online(radio_map, cfg, seed)
        errors = evaluate(gm, data)
        online_cfg = cfg.training.online.with_overrides(
            seed=derived_seed(seed, "retrain", bid, self.client_id, round_index)
        )
        lm = retrain_local(gm, data, online_cfg)
        record = ClientRecord(
            client_id=self.client_id,
            device_id=self.profile.device_id,
            rp_ids=tuple(s.rp_id for s in data.samples),
            errors=errors,
            local_errors=evaluate(lm, data),
        )
        return record, self._build_update(cfg, gm, lm, data)

    def _build_update(
        self, cfg: ScenarioConfig, gm: Network, lm: Network, data: FingerprintDataset
    ) -> ClientUpdate | None:
        samples = max(len(data), 1)
        if cfg.aggregator == BASELINE_AGGREGATOR:
            return None
        if cfg.aggregator == "fedavg":
            return ClientUpdate(self.client_id, "weights", flatten(lm), samples)
        if cfg.aggregator == "fedsgd":
            grad = gradient(gm, data.features(), data.labels(), "sparse_categorical_crossentropy")
            return ClientUpdate(self.client_id, "gradient", grad, samples)
        sparse = select_top_h(flatten(lm), flatten(gm), cfg.h)
        return ClientUpdate(self.client_id, "sparse", sparse, samples)


def transmit(update: ClientUpdate, gm_template: WeightVector) -> tuple[int, ClientUpdate]:
    """Serialize the update, then rebuild it on the server side from the bytes alone."""

    if update.kind == "sparse":
        size, record = encode_sparse(update.payload)  # type: ignore[arg-type]
        payload = decode_sparse(record)
    else:
        size, record = encode_dense(update.payload)  # type: ignore[arg-type]
        payload = gm_template.replace(decode_dense(record))
    return size, ClientUpdate(update.client_id, update.kind, payload, update.sample_count)


# Rounds --------------------------------------------------------------------------------


@dataclass
class RoundReport:
    seed: int
    building_id: str
    round: int
    clients: tuple[ClientRecord, ...]
    mean_error_m: float
    local_mean_error_m: float
    bytes_uplinked: int
    latency_s: float

    @property
    def client_errors(self) -> dict[str, np.ndarray]:
        return {c.client_id: c.errors for c in self.clients}


@dataclass
class Heatmap:
    devices: tuple[str, ...]
    buildings: tuple[str, ...]
    values: np.ndarray  # (devices, buildings) mean error in meters


@dataclass
class ScenarioResult:
    variant: str
    config: ScenarioConfig
    rounds: list[RoundReport] = field(default_factory=list)
    heatmap: Heatmap | None = None
    building_means: dict[str, float] = field(default_factory=dict)
    summary: dict[str, float] = field(default_factory=dict)

    def all_errors(self) -> np.ndarray:
        parts = [c.errors for r in self.rounds for c in r.clients]
        return np.concatenate(parts) if parts else np.zeros(0)

    def final_round_errors(self) -> np.ndarray:
        last = self.config.rounds
        parts = [c.errors for r in self.rounds if r.round == last for c in r.clients]
        return np.concatenate(parts) if parts else np.zeros(0)

    def seed_mean(self, seed: int) -> float:
        parts = [c.errors for r in self.rounds if r.seed == seed for c in r.clients]
        return float(np.mean(np.concatenate(parts)))

    def round_means(self, seed: int, building_id: str | None = None) -> list[float]:
        return [
            r.mean_error_m
            for r in self.rounds
            if r.seed == seed and (building_id is None or r.building_id == building_id)
        ]


def _mean(values: Iterable[np.ndarray]) -> float:
    parts = list(values)
    if not parts:
        return 0.0
    merged = np.concatenate(parts)
    return float(np.mean(merged)) if merged.size else 0.0


def _run_building(cfg: ScenarioConfig, floorplan: FloorplanSpec, seed: int) -> list[RoundReport]:
    bid = floorplan.building_id
    round_index = 0
    try:
        pre = pretrain_building(floorplan, cfg.training_device, cfg.training, seed)
        shape = pre.gm.shape
        server = FederatedServer(
            flatten(pre.gm),
            cfg.aggregator,
            learning_rate=cfg.training.online.learning_rate,
            literal_sum=cfg.literal_sum,
        )
        clients = [Client(cid, profile) for cid, profile in cfg.client_ids()]
        reports: list[RoundReport] = []
        for round_index in range(1, cfg.rounds + 1):
            records: list[ClientRecord] = []
            round_bytes = 0
            if cfg.mode == "sequential":
                for client in clients:
                    gm = unflatten(server.global_weights, shape)
                    record, update = client.local_round(gm, pre.radio_map, cfg, seed, round_index)
                    size = 0
                    if update is not None:
                        size, received = transmit(update, server.global_weights)
                        server.aggregate([received])
                    records.append(_with_bytes(record, size))
                    round_bytes += size
            else:
                gm = unflatten(server.global_weights, shape)
                received_updates: list[ClientUpdate] = []
                for client in clients:
                    record, update = client.local_round(gm, pre.radio_map, cfg, seed, round_index)
                    size = 0
                    if update is not None:
                        size, received = transmit(update, server.global_weights)
                        received_updates.append(received)
                    records.append(_with_bytes(record, size))
                    round_bytes += size
                server.aggregate(received_updates)

            report = RoundReport(
                seed=seed,
                building_id=bid,
                round=round_index,
                clients=tuple(records),
                mean_error_m=_mean(r.errors for r in records),
                local_mean_error_m=_mean(r.local_errors for r in records),
                bytes_uplinked=round_bytes,
                latency_s=uplink_latency(round_bytes, cfg.bandwidth_bytes_per_s),
            )
            logger.info(
                "%s seed %d %s round %d: mean error %.3f m, %d bytes uplinked",
                cfg.aggregator,
                seed,
                bid,
                round_index,
                report.mean_error_m,
                report.bytes_uplinked,
            )
            reports.append(report)
        return reports
    except ConfigError:
        raise
    except (FedlocError, ValueError) as exc:
        raise ScenarioError(f"seed {seed}, building {bid}, round {round_index}: {exc}") from exc


def _with_bytes(record: ClientRecord, size: int) -> ClientRecord:
    return ClientRecord(
        client_id=record.client_id,
        device_id=record.device_id,
        rp_ids=record.rp_ids,
        errors=record.errors,
        local_errors=record.local_errors,
        bytes_uplinked=size,
    )


def _fan_out(fn: Callable[[T], R], items: Sequence[T], jobs: int) -> list[R]:
    """Order-preserving map, threaded when ``jobs > 1``."""

    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _heatmap(cfg: ScenarioConfig, rounds: Sequence[RoundReport]) -> Heatmap:
    devices = tuple(cfg.devices)
    buildings = tuple(fp.building_id for fp in cfg.floorplans)
    values = np.zeros((len(devices), len(buildings)))
    for i, device in enumerate(devices):
        for j, bid in enumerate(buildings):
            values[i, j] = _mean(
                c.errors for r in rounds if r.building_id == bid for c in r.clients if c.device_id == device
            )
    return Heatmap(devices=devices, buildings=buildings, values=values)


def summarize(result: ScenarioResult) -> dict[str, float]:
    errors = result.all_errors()
    final = result.final_round_errors()
    rounds = result.rounds
    return {
        "mean_error_m": float(np.mean(errors)) if errors.size else 0.0,
        "final_round_error_m": float(np.mean(final)) if final.size else 0.0,
        "p95_error_m": float(np.percentile(errors, 95)) if errors.size else 0.0,
        "local_mean_error_m": _mean(c.local_errors for r in rounds for c in r.clients),
        "mean_bytes_per_round": float(np.mean([r.bytes_uplinked for r in rounds])) if rounds else 0.0,
        "mean_latency_s": float(np.mean([r.latency_s for r in rounds])) if rounds else 0.0,
    }


def run_scenario(cfg: ScenarioConfig, *, jobs: int = 1, variant: str | None = None) -> ScenarioResult:
    """Pretrain, then run ``cfg.rounds`` federated rounds for every seed and building."""

    variant = variant or cfg.aggregator
    logger.info(
        "running %s: %d seeds x %d buildings x %d clients",
        variant,
        len(cfg.seeds),
        len(cfg.floorplans),
        cfg.client_count,
    )
    units = [(seed, fp) for seed in cfg.seeds for fp in cfg.floorplans]
    per_unit = _fan_out(lambda unit: _run_building(cfg, unit[1], unit[0]), units, jobs)
    result = ScenarioResult(variant=variant, config=cfg, rounds=[r for reports in per_unit for r in reports])
    result.heatmap = _heatmap(cfg, result.rounds)
    result.building_means = {
        fp.building_id: _mean(c.errors for r in result.rounds if r.building_id == fp.building_id for c in r.clients)
        for fp in cfg.floorplans
    }
    result.summary = summarize(result)
    logger.info("finished %s: mean error %.3f m", variant, result.summary["mean_error_m"])
    return result


# Experiment suites ----------------------------------------------------------------------


@dataclass(frozen=True)
class HSweepRow:
    h: float
    mean_error_m: float
    mean_latency_s: float


@dataclass
class HSweepResult:
    rows: list[HSweepRow]
    results: dict[float, ScenarioResult]


def h_sweep(cfg: ScenarioConfig, h_values: Sequence[float] | None = None, *, jobs: int = 1) -> HSweepResult:
    if cfg.aggregator != "fedhil":
        logger.info("h_sweep switches aggregator %s -> fedhil", cfg.aggregator)
        cfg = cfg.with_overrides(aggregator="fedhil")
    values = tuple(h_values) if h_values is not None else cfg.h_values
    rows: list[HSweepRow] = []
    results: dict[float, ScenarioResult] = {}
    for h in values:
        try:
            hp = HParam(float(h))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        result = run_scenario(cfg.with_overrides(h=hp), jobs=jobs, variant=f"h{h:g}")
        results[hp.h_percent] = result
        rows.append(HSweepRow(hp.h_percent, result.summary["mean_error_m"], result.summary["mean_latency_s"]))
    return HSweepResult(rows=rows, results=results)


def compare_aggregators(
    cfg: ScenarioConfig, aggregators: Sequence[str] = (*AGGREGATORS, BASELINE_AGGREGATOR), *, jobs: int = 1
) -> dict[str, ScenarioResult]:
    """Paired comparison: same seeds, data and pretrained GM for every aggregator."""

    return {name: run_scenario(cfg.with_overrides(aggregator=name), jobs=jobs, variant=name) for name in aggregators}


def _suite(variants: Sequence[tuple[str, ScenarioConfig]], jobs: int) -> dict[str, ScenarioResult]:
    return {name: run_scenario(variant_cfg, jobs=jobs, variant=name) for name, variant_cfg in variants}


def skew_suite(cfg: ScenarioConfig, *, jobs: int = 1) -> dict[str, ScenarioResult]:
    """The five device mixes, six clients each, over every configured floorplan."""
    return _suite(skew_variants(cfg), jobs)


def scalability_suite(cfg: ScenarioConfig, *, jobs: int = 1) -> dict[str, ScenarioResult]:
    return _suite(scale_variants(cfg), jobs)


def stability_spread(results: dict[str, ScenarioResult]) -> float:
    """Max minus min mean error across suite variants."""

    means = [r.summary["mean_error_m"] for r in results.values()]
    return max(means) - min(means) if means else 0.0


@dataclass
class RpTrace:
    variant: str
    seed: int
    building_id: str
    rp_ids: tuple[str, ...]
    errors: np.ndarray


def rp_traces(result: ScenarioResult) -> list[RpTrace]:
    """Per-RP error averaged over rounds and clients, one trace per (seed, building)."""

    traces: list[RpTrace] = []
    for seed in result.config.seeds:
        for fp in result.config.floorplans:
            rp_ids = tuple(fp.rp_ids)
            sums = dict.fromkeys(rp_ids, 0.0)
            counts = dict.fromkeys(rp_ids, 0)
            for r in result.rounds:
                if r.seed != seed or r.building_id != fp.building_id:
                    continue
                for c in r.clients:
                    for rp, err in zip(c.rp_ids, c.errors):
                        sums[rp] += float(err)
                        counts[rp] += 1
            errors = np.array([sums[rp] / counts[rp] if counts[rp] else 0.0 for rp in rp_ids])
            traces.append(RpTrace(result.variant, seed, fp.building_id, rp_ids, errors))
    return traces


@dataclass
class NoiseStudy:
    results: dict[str, ScenarioResult]
    traces: dict[str, list[RpTrace]]


def noise_susceptibility(
    cfg: ScenarioConfig, aggregators: Sequence[str] = AGGREGATORS, *, jobs: int = 1
) -> NoiseStudy:
    """Per-RP error traces for each aggregator under identical injected noise."""

    if not cfg.noise_injection.active:
        logger.warning("noise_susceptibility run without noise injection; traces reflect device noise only")
    results = compare_aggregators(cfg, aggregators, jobs=jobs)
    return NoiseStudy(results=results, traces={name: rp_traces(result) for name, result in results.items()})


def sae_ablation(cfg: ScenarioConfig, *, jobs: int = 1) -> dict[str, ScenarioResult]:
    """Cross-device error of the pretrained GM with no, traditional and layer-wise SAE augmentation.

    No federation happens: each variant runs one round with the GM frozen.
    """

    variants = []
    for augmentation in AUGMENTATIONS:
        training = replace(cfg.training, augmentation=augmentation, multiplicity=max(cfg.training.multiplicity, 1))
        variants.append(
            (augmentation, cfg.with_overrides(training=training, aggregator=BASELINE_AGGREGATOR, rounds=1))
        )
    return _suite(variants, jobs)

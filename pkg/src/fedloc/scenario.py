"""Scenario configuration: floorplans, device catalog, client mix and training settings.

Scenarios are JSON documents. A minimal one names the floorplans, the device the
global model is pretrained with, and the client groups::

    {
      "floorplans": ["B5"],
      "training_device": "MOTO",
      "clients": [{"device": "BLU", "count": 2}, {"device": "S7"}],
      "aggregator": "fedhil",
      "h": 20
    }

Floorplan entries are either names from the built-in building catalog or full
floorplan objects understood by :func:`fedloc.dataset.floorplan_from_dict`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Literal, Mapping, Sequence

from .dataset import DeviceProfile, FloorplanSpec, floorplan_from_dict, make_floorplan
from .errors import ConfigError
from .federation import HParam
from .nn_core import TrainConfig

logger = logging.getLogger(__name__)

AGGREGATORS: tuple[str, ...] = ("fedavg", "fedsgd", "fedhil")
BASELINE_AGGREGATOR = "frozen"
AUGMENTATIONS: tuple[str, ...] = ("none", "traditional", "custom")
MODES: tuple[str, ...] = ("synchronous", "sequential")
DEFAULT_H_VALUES: tuple[float, ...] = tuple(float(h) for h in range(10, 101, 10))
SEED_ENV_VAR = "FEDLOC_SEED"

# Offsets span the cross-device deltas observed on the surveyed phones.
DEVICE_CATALOG: dict[str, DeviceProfile] = {
    profile.device_id: profile
    for profile in (
        DeviceProfile("MOTO", gain=1.0, offset_db=0.0, jitter_std_db=1.0, ap_dropout_prob=0.0),
        DeviceProfile("HTC", gain=1.0, offset_db=8.0, jitter_std_db=2.0, ap_dropout_prob=0.01),
        DeviceProfile("BLU", gain=1.05, offset_db=-8.0, jitter_std_db=3.0, ap_dropout_prob=0.03),
        DeviceProfile("LG", gain=1.0, offset_db=15.0, jitter_std_db=2.0, ap_dropout_prob=0.02),
        DeviceProfile("OP3", gain=0.95, offset_db=-15.0, jitter_std_db=2.5, ap_dropout_prob=0.04),
        DeviceProfile("S7", gain=1.0, offset_db=-20.0, jitter_std_db=4.0, ap_dropout_prob=0.05),
    )
}

# building id -> (ap_count, path_length_m, shadowing_std_db); later buildings are noisier.
BUILDING_CATALOG: dict[str, tuple[int, int, float]] = {
    "B1": (78, 64, 2.0),
    "B2": (218, 88, 3.0),
    "B3": (112, 60, 4.0),
    "B4": (156, 72, 6.0),
    "B5": (125, 80, 8.0),
}

SKEW_CASES: tuple[tuple[str, ...], ...] = (
    ("BLU", "BLU", "BLU", "BLU", "BLU", "S7"),
    ("BLU", "BLU", "BLU", "BLU", "OP3", "S7"),
    ("BLU", "BLU", "BLU", "MOTO", "OP3", "S7"),
    ("BLU", "BLU", "LG", "MOTO", "OP3", "S7"),
    ("BLU", "HTC", "LG", "MOTO", "OP3", "S7"),
)
SCALE_FACTORS: tuple[int, ...] = (1, 2, 3)


def catalog_floorplan(building_id: str, *, layout_seed: int = 0) -> FloorplanSpec:
    try:
        ap_count, path_length_m, shadowing = BUILDING_CATALOG[building_id]
    except KeyError:
        raise ConfigError(f"unknown building {building_id!r}; known: {', '.join(BUILDING_CATALOG)}") from None
    return make_floorplan(
        building_id,
        ap_count=ap_count,
        path_length_m=path_length_m,
        shadowing_std_db=shadowing,
        layout_seed=layout_seed,
    )


@dataclass(frozen=True)
class ClientGroup:
    profile: DeviceProfile
    count: int = 1

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ConfigError(f"client group {self.profile.device_id} needs count >= 1")


@dataclass(frozen=True)
class NoiseInjection:
    """Gaussian bursts added to a fixed fraction of RPs during online capture."""

    burst_std_db: float = 0.0
    rp_fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.burst_std_db < 0:
            raise ConfigError("noise burst_std_db must be >= 0")
        if not 0.0 <= self.rp_fraction <= 1.0:
            raise ConfigError("noise rp_fraction must lie in [0, 1]")

    @property
    def active(self) -> bool:
        return self.burst_std_db > 0 and self.rp_fraction > 0


@dataclass(frozen=True)
class TrainingSettings:
    sae: TrainConfig = TrainConfig(learning_rate=0.05, epochs=50, batch_size=32)
    offline: TrainConfig = TrainConfig(
        learning_rate=0.1, epochs=1200, batch_size=32, loss="sparse_categorical_crossentropy"
    )
    online: TrainConfig = TrainConfig(
        learning_rate=0.1, epochs=10, batch_size=32, loss="sparse_categorical_crossentropy"
    )
    augmentation: str = "custom"
    multiplicity: int = 1
    freeze_borrowed: bool = False
    offline_per_rp: int = 5
    online_per_rp: int = 1
    output_activation: str = "sigmoid"

    def __post_init__(self) -> None:
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation must be one of {', '.join(AUGMENTATIONS)}, got {self.augmentation!r}")
        if self.multiplicity < 0:
            raise ConfigError("augmentation multiplicity must be >= 0")
        if self.offline_per_rp < 1 or self.online_per_rp < 1:
            raise ConfigError("offline_per_rp and online_per_rp must be >= 1")
        if self.output_activation not in ("sigmoid", "softmax"):
            raise ConfigError(f"output_activation must be sigmoid or softmax, got {self.output_activation!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    floorplans: tuple[FloorplanSpec, ...]
    training_device: DeviceProfile
    clients: tuple[ClientGroup, ...]
    aggregator: str = "fedhil"
    h: HParam = HParam(20.0)
    rounds: int = 10
    noise_injection: NoiseInjection = NoiseInjection()
    seeds: tuple[int, ...] = (0,)
    bandwidth_bytes_per_s: float = 125_000.0
    training: TrainingSettings = TrainingSettings()
    mode: Literal["synchronous", "sequential"] = "synchronous"
    literal_sum: bool = False
    h_values: tuple[float, ...] = DEFAULT_H_VALUES
    stability_band_m: float = 3.0
    name: str = "scenario"

    def __post_init__(self) -> None:
        if not self.floorplans:
            raise ConfigError("scenario needs at least one floorplan")
        ids = [fp.building_id for fp in self.floorplans]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate building ids: {ids}")
        if not self.clients:
            raise ConfigError("scenario needs at least one client")
        if self.aggregator not in (*AGGREGATORS, BASELINE_AGGREGATOR):
            raise ConfigError(f"aggregator must be one of {', '.join(AGGREGATORS)}, got {self.aggregator!r}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if not self.seeds:
            raise ConfigError("scenario needs at least one seed")
        if self.bandwidth_bytes_per_s <= 0:
            raise ConfigError("bandwidth_bytes_per_s must be > 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        if not self.h_values:
            raise ConfigError("h_values must not be empty")
        for h in self.h_values:
            HParam(h)

    @property
    def client_count(self) -> int:
        return sum(group.count for group in self.clients)

    @property
    def devices(self) -> list[str]:
        """Distinct client devices in configuration order."""
        return list(dict.fromkeys(group.profile.device_id for group in self.clients))

    def client_ids(self) -> list[tuple[str, DeviceProfile]]:
        out: list[tuple[str, DeviceProfile]] = []
        for group in self.clients:
            taken = sum(1 for cid, _ in out if cid.startswith(f"{group.profile.device_id}-"))
            out.extend((f"{group.profile.device_id}-{taken + k}", group.profile) for k in range(group.count))
        return out

    def with_overrides(self, **changes: Any) -> "ScenarioConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "floorplans": [_floorplan_to_dict(fp) for fp in self.floorplans],
            "training_device": asdict(self.training_device),
            "clients": [{"device": asdict(g.profile), "count": g.count} for g in self.clients],
            "aggregator": self.aggregator,
            "h": self.h.h_percent,
            "rounds": self.rounds,
            "noise_injection": asdict(self.noise_injection),
            "seeds": list(self.seeds),
            "bandwidth_bytes_per_s": self.bandwidth_bytes_per_s,
            "training": asdict(self.training),
            "mode": self.mode,
            "literal_sum": self.literal_sum,
            "h_values": list(self.h_values),
            "stability_band_m": self.stability_band_m,
        }

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _floorplan_to_dict(fp: FloorplanSpec) -> dict[str, Any]:
    return {
        "building_id": fp.building_id,
        "ap_positions": [list(p) for p in fp.ap_positions],
        "rp_path": [list(p) for p in fp.rp_path],
        "shadowing_std_db": fp.shadowing_std_db,
        "p0_dbm": fp.p0_dbm,
        "path_loss_exponent": fp.path_loss_exponent,
    }


# Loading -------------------------------------------------------------------------


def seed_from_env() -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or not raw.strip():
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None


def parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("at least one seed is required")
    return seeds


def _device_table(data: Mapping[str, Any]) -> dict[str, DeviceProfile]:
    table = dict(DEVICE_CATALOG)
    for name, raw in (data.get("devices") or {}).items():
        if not isinstance(raw, Mapping):
            raise ConfigError(f"device {name!r} must be an object")
        try:
            table[name] = DeviceProfile(device_id=name, **raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid device {name!r}: {exc}") from exc
    return table


def _resolve_device(table: Mapping[str, DeviceProfile], raw: Any) -> DeviceProfile:
    if isinstance(raw, Mapping):
        try:
            return DeviceProfile(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid device profile {dict(raw)!r}: {exc}") from exc
    if raw not in table:
        raise ConfigError(f"unknown device {raw!r}; known: {', '.join(sorted(table))}")
    return table[raw]


def _train_config(raw: Mapping[str, Any] | None, default: TrainConfig) -> TrainConfig:
    if not raw:
        return default
    allowed = {"learning_rate", "epochs", "batch_size", "seed", "loss", "frozen_layers"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown training keys: {', '.join(sorted(unknown))}")
    changes = dict(raw)
    if "frozen_layers" in changes:
        changes["frozen_layers"] = tuple(int(i) for i in changes["frozen_layers"])
    return default.with_overrides(**changes)


def _training_settings(raw: Mapping[str, Any] | None) -> TrainingSettings:
    base = TrainingSettings()
    if not raw:
        return base
    scalars = {
        key: raw[key]
        for key in (
            "augmentation",
            "multiplicity",
            "freeze_borrowed",
            "offline_per_rp",
            "online_per_rp",
            "output_activation",
        )
        if key in raw
    }
    return TrainingSettings(
        sae=_train_config(raw.get("sae"), base.sae),
        offline=_train_config(raw.get("offline"), base.offline),
        online=_train_config(raw.get("online"), base.online),
        **scalars,
    )


def _floorplans(raw: Any) -> tuple[FloorplanSpec, ...]:
    if raw == "catalog":
        raw = list(BUILDING_CATALOG)
    if not isinstance(raw, list):
        raise ConfigError('"floorplans" must be a list or "catalog"')
    plans: list[FloorplanSpec] = []
    for entry in raw:
        if isinstance(entry, str):
            plans.append(catalog_floorplan(entry))
        elif isinstance(entry, Mapping) and "building_id" in entry and set(entry) <= {"building_id", "layout_seed"}:
            plans.append(catalog_floorplan(str(entry["building_id"]), layout_seed=int(entry.get("layout_seed", 0))))
        elif isinstance(entry, Mapping):
            plans.append(floorplan_from_dict(entry))
        else:
            raise ConfigError(f"invalid floorplan entry {entry!r}")
    return tuple(plans)


def scenario_from_dict(
    data: Mapping[str, Any],
    *,
    default_seeds: Sequence[int] | None = None,
    default_bandwidth: float = 125_000.0,
) -> ScenarioConfig:
    """Validate a decoded scenario document.

    Seeds fall back to ``default_seeds``, then ``FEDLOC_SEED``, then 0.
    """

    if not isinstance(data, Mapping):
        raise ConfigError("scenario document must be a JSON object")
    for key in ("floorplans", "training_device", "clients"):
        if key not in data:
            raise ConfigError(f"scenario is missing {key!r}")
    try:
        return _scenario_from_dict(data, default_seeds, default_bandwidth)
    except ConfigError:
        raise
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc


def _scenario_from_dict(
    data: Mapping[str, Any], default_seeds: Sequence[int] | None, default_bandwidth: float
) -> ScenarioConfig:
    table = _device_table(data)
    if not isinstance(data["clients"], list):
        raise ConfigError('"clients" must be a list')

    clients: list[ClientGroup] = []
    for entry in data["clients"]:
        if isinstance(entry, str):
            clients.append(ClientGroup(_resolve_device(table, entry)))
            continue
        if not isinstance(entry, Mapping) or "device" not in entry:
            raise ConfigError(f"client entry needs a device: {entry!r}")
        clients.append(ClientGroup(_resolve_device(table, entry["device"]), int(entry.get("count", 1))))

    seeds = data.get("seeds")
    if seeds is None:
        seeds = list(default_seeds) if default_seeds else [seed_from_env()]
    noise = data.get("noise_injection") or {}
    return ScenarioConfig(
        name=str(data.get("name", "scenario")),
        floorplans=_floorplans(data["floorplans"]),
        training_device=_resolve_device(table, data["training_device"]),
        clients=tuple(clients),
        aggregator=str(data.get("aggregator", "fedhil")),
        h=HParam(float(data.get("h", 20.0))),
        rounds=int(data.get("rounds", 10)),
        noise_injection=NoiseInjection(
            burst_std_db=float(noise.get("burst_std_db", 0.0)),
            rp_fraction=float(noise.get("rp_fraction", 0.0)),
        ),
        seeds=tuple(int(s) for s in seeds),
        bandwidth_bytes_per_s=float(data.get("bandwidth_bytes_per_s", default_bandwidth)),
        training=_training_settings(data.get("training")),
        mode=data.get("mode", "synchronous"),
        literal_sum=bool(data.get("literal_sum", False)),
        h_values=tuple(float(h) for h in data.get("h_values", DEFAULT_H_VALUES)),
        stability_band_m=float(data.get("stability_band_m", 3.0)),
    )


def load_scenario_config(
    path: Path, *, default_seeds: Sequence[int] | None = None, default_bandwidth: float = 125_000.0
) -> ScenarioConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scenario config {path}: {exc}") from exc
    cfg = scenario_from_dict(data, default_seeds=default_seeds, default_bandwidth=default_bandwidth)
    logger.debug("loaded scenario %s from %s (hash %s)", cfg.name, path, cfg.config_hash()[:12])
    return cfg


# Protocol variants -----------------------------------------------------------------


def clients_from_devices(
    devices: Sequence[str], table: Mapping[str, DeviceProfile] | None = None
) -> tuple[ClientGroup, ...]:
    """Group a device list into ClientGroups, keeping first-appearance order."""

    table = table or DEVICE_CATALOG
    counts: dict[str, int] = {}
    for device in devices:
        counts[device] = counts.get(device, 0) + 1
    return tuple(ClientGroup(_resolve_device(table, device), count) for device, count in counts.items())


def skew_variants(cfg: ScenarioConfig) -> list[tuple[str, ScenarioConfig]]:
    return [
        (f"skew{i}", cfg.with_overrides(clients=clients_from_devices(devices)))
        for i, devices in enumerate(SKEW_CASES, start=1)
    ]


def scale_variants(cfg: ScenarioConfig) -> list[tuple[str, ScenarioConfig]]:
    """The six catalog devices replicated once, twice and three times."""

    variants = []
    for factor in SCALE_FACTORS:
        groups = tuple(ClientGroup(profile, factor) for profile in DEVICE_CATALOG.values())
        variants.append((f"clients{6 * factor}", cfg.with_overrides(clients=groups)))
    return variants


@dataclass
class ScenarioOverrides:
    """Command-line overrides applied on top of a loaded scenario."""

    seeds: tuple[int, ...] | None = None
    aggregator: str | None = None
    h: float | None = None
    rounds: int | None = None
    literal_sum: bool = False
    training_device: str | None = None
    bandwidth_bytes_per_s: float | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def apply(self, cfg: ScenarioConfig) -> ScenarioConfig:
        changes: dict[str, Any] = {}
        if self.seeds:
            changes["seeds"] = tuple(self.seeds)
        if self.aggregator:
            changes["aggregator"] = self.aggregator
        if self.h is not None:
            try:
                changes["h"] = HParam(float(self.h))
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if self.rounds is not None:
            changes["rounds"] = int(self.rounds)
        if self.literal_sum:
            changes["literal_sum"] = True
        if self.training_device:
            changes["training_device"] = _resolve_device(DEVICE_CATALOG, self.training_device)
        if self.bandwidth_bytes_per_s is not None:
            changes["bandwidth_bytes_per_s"] = float(self.bandwidth_bytes_per_s)
        changes.update(self.extra)
        return cfg.with_overrides(**changes) if changes else cfg

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data.pop("extra")
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in data.items() if v not in (None, False)}

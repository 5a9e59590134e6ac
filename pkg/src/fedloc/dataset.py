"""Fingerprint data model, CSV ingestion, synthetic radio maps and device transforms."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DatasetError

logger = logging.getLogger(__name__)

MISSING_DBM = -100.0
MAX_DBM = 0.0
RP_SPACING_M = 1.0

_CSV_FIXED_COLUMNS = ("rp_id", "x", "y", "z", "device_id")

Coordinate = tuple[float, float, float]


def derive_rng(seed: int, *keys: object) -> np.random.Generator:
    """Independent, reproducible stream for ``seed`` and a path of keys."""

    entropy = [int(seed) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, (int, np.integer)) and not isinstance(key, bool):
            entropy.append(int(key) & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(key).encode("utf-8")))
    return np.random.default_rng(entropy)


# Normalization ----------------------------------------------------------------


def normalize_rss(raw_dbm: float) -> float:
    """Map [-100, 0] dBm linearly onto [0, 1], clamping outside the range."""

    value = float(raw_dbm)
    if not math.isfinite(value):
        raise ValueError(f"RSS must be finite, got {raw_dbm!r}")
    return min(1.0, max(0.0, (value - MISSING_DBM) / (MAX_DBM - MISSING_DBM)))


def normalize_matrix(raw_dbm: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw_dbm, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("RSS values must be finite")
    return np.clip((raw - MISSING_DBM) / (MAX_DBM - MISSING_DBM), 0.0, 1.0)


def denormalize_rss(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * (MAX_DBM - MISSING_DBM) + MISSING_DBM


# Domain types --------------------------------------------------------------------


@dataclass(frozen=True)
class Fingerprint:
    rss: np.ndarray
    rp_id: str
    device_id: str

    def __post_init__(self) -> None:
        rss = np.array(self.rss, dtype=np.float64)
        if rss.ndim != 1:
            raise ValueError("fingerprint RSS must be a vector")
        if not np.all((rss >= 0.0) & (rss <= 1.0)):
            raise ValueError(f"fingerprint RSS for {self.rp_id} must lie in [0, 1]")
        rss.setflags(write=False)
        object.__setattr__(self, "rss", rss)


@dataclass(frozen=True)
class RpMap:
    """RP id → (x, y, z) in meters; insertion order defines class indices."""

    entries: Mapping[str, Coordinate]

    def __post_init__(self) -> None:
        cleaned: dict[str, Coordinate] = {}
        for rp_id, coords in self.entries.items():
            point = tuple(float(c) for c in coords)
            if len(point) != 3 or not all(math.isfinite(c) for c in point):
                raise ValueError(f"RP {rp_id} needs three finite coordinates, got {coords!r}")
            cleaned[str(rp_id)] = point  # type: ignore[assignment]
        object.__setattr__(self, "entries", cleaned)
        object.__setattr__(self, "_index", {rp: i for i, rp in enumerate(cleaned)})

    @property
    def rp_ids(self) -> list[str]:
        return list(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, rp_id: object) -> bool:
        return rp_id in self.entries

    def coords(self, rp_id: str) -> Coordinate:
        return self.entries[rp_id]

    def class_index(self, rp_id: str) -> int:
        return self._index[rp_id]  # type: ignore[attr-defined]

    def rp_at(self, class_index: int) -> str:
        return self.rp_ids[class_index]


@dataclass(frozen=True)
class FingerprintDataset:
    samples: tuple[Fingerprint, ...]
    ap_index: Mapping[str, int]
    rp_map: RpMap

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        columns = sorted(self.ap_index.values())
        if columns != list(range(len(columns))):
            raise DatasetError("AP index must map onto columns 0..AP_count-1 without gaps")
        width = len(columns)
        for sample in self.samples:
            if sample.rss.shape[0] != width:
                raise DatasetError(f"sample for {sample.rp_id} has {sample.rss.shape[0]} APs, expected {width}")
            if sample.rp_id not in self.rp_map:
                raise DatasetError(f"sample references unknown RP {sample.rp_id}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ap_count(self) -> int:
        return len(self.ap_index)

    @property
    def ap_ids(self) -> list[str]:
        return sorted(self.ap_index, key=self.ap_index.__getitem__)

    def features(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.ap_count))
        return np.vstack([s.rss for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.array([self.rp_map.class_index(s.rp_id) for s in self.samples], dtype=np.int64)

    def with_samples(self, samples: Sequence[Fingerprint]) -> "FingerprintDataset":
        return FingerprintDataset(samples=tuple(samples), ap_index=self.ap_index, rp_map=self.rp_map)

    def for_device(self, device_id: str) -> "FingerprintDataset":
        return self.with_samples([s for s in self.samples if s.device_id == device_id])


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    gain: float = 1.0
    offset_db: float = 0.0
    jitter_std_db: float = 0.0
    ap_dropout_prob: float = 0.0

    def __post_init__(self) -> None:
        if not self.jitter_std_db >= 0:
            raise ValueError(f"{self.device_id}: jitter_std_db must be >= 0")
        if not 0.0 <= self.ap_dropout_prob <= 1.0:
            raise ValueError(f"{self.device_id}: ap_dropout_prob must lie in [0, 1]")
        if not (math.isfinite(self.gain) and math.isfinite(self.offset_db)):
            raise ValueError(f"{self.device_id}: gain and offset must be finite")

    @property
    def is_identity(self) -> bool:
        return self.gain == 1.0 and self.offset_db == 0.0 and self.jitter_std_db == 0.0 and self.ap_dropout_prob == 0.0


@dataclass(frozen=True)
class FloorplanSpec:
    building_id: str
    ap_positions: tuple[Coordinate, ...]
    rp_path: tuple[Coordinate, ...]
    shadowing_std_db: float = 0.0
    p0_dbm: float = -30.0
    path_loss_exponent: float = 3.0
    reference_distance_m: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "ap_positions", tuple(tuple(float(c) for c in p) for p in self.ap_positions))
        object.__setattr__(self, "rp_path", tuple(tuple(float(c) for c in p) for p in self.rp_path))
        if self.ap_count < 1:
            raise ConfigError(f"{self.building_id}: at least one AP is required")
        if self.shadowing_std_db < 0:
            raise ConfigError(f"{self.building_id}: shadowing_std_db must be >= 0")
        if self.reference_distance_m <= 0:
            raise ConfigError(f"{self.building_id}: reference_distance_m must be > 0")
        for a, b in zip(self.rp_path, self.rp_path[1:]):
            step = math.dist(a, b)
            if abs(step - RP_SPACING_M) > 1e-9:
                raise ConfigError(f"{self.building_id}: RPs {a} and {b} are {step:.6f} m apart, expected 1 m")

    @property
    def ap_count(self) -> int:
        return len(self.ap_positions)

    @property
    def rp_ids(self) -> list[str]:
        return [f"{self.building_id}-RP{i:03d}" for i in range(len(self.rp_path))]

    def rp_map(self) -> RpMap:
        return RpMap(dict(zip(self.rp_ids, self.rp_path)))

    def ap_ids(self) -> list[str]:
        tag = hashlib.sha256(self.building_id.encode("utf-8")).digest()[:2]
        return [f"02:{tag[0]:02x}:{tag[1]:02x}:00:{i >> 8:02x}:{i & 0xFF:02x}" for i in range(self.ap_count)]


def _walking_path(path_length_m: int, rng: np.random.Generator) -> list[Coordinate]:
    """Serpentine walk on the 1 m grid: corridors along x joined by short climbs along +y."""

    points: list[Coordinate] = [(0.0, 0.0, 0.0)]
    x = y = 0
    direction = 1
    remaining = path_length_m
    while remaining > 0:
        run = int(min(remaining, rng.integers(8, 25)))
        for _ in range(run):
            x += direction
            points.append((float(x), float(y), 0.0))
        remaining -= run
        if remaining <= 0:
            break
        climb = int(min(remaining, rng.integers(2, 6)))
        for _ in range(climb):
            y += 1
            points.append((float(x), float(y), 0.0))
        remaining -= climb
        direction = -direction
    return points


def make_floorplan(
    building_id: str,
    *,
    ap_count: int,
    path_length_m: int,
    shadowing_std_db: float,
    layout_seed: int = 0,
    p0_dbm: float = -30.0,
    path_loss_exponent: float = 3.0,
) -> FloorplanSpec:
    """Synthesize a floorplan: ``path_length_m + 1`` RPs 1 m apart and APs scattered around them."""

    if path_length_m < 0:
        raise ConfigError("path_length_m must be >= 0")
    rng = derive_rng(layout_seed, "floorplan", building_id)
    path = _walking_path(int(path_length_m), rng)
    xy = np.array([p[:2] for p in path])
    lo = xy.min(axis=0) - 6.0
    hi = xy.max(axis=0) + 6.0
    aps = [
        (float(rng.uniform(lo[0], hi[0])), float(rng.uniform(lo[1], hi[1])), float(rng.uniform(2.5, 3.5)))
        for _ in range(ap_count)
    ]
    return FloorplanSpec(
        building_id=building_id,
        ap_positions=tuple(aps),
        rp_path=tuple(path),
        shadowing_std_db=shadowing_std_db,
        p0_dbm=p0_dbm,
        path_loss_exponent=path_loss_exponent,
    )


def floorplan_from_dict(data: Mapping) -> FloorplanSpec:
    """Build a floorplan from a JSON object: explicit positions or generator parameters."""

    try:
        building_id = str(data["building_id"])
        shadowing = float(data.get("shadowing_std_db", 0.0))
        p0 = float(data.get("p0_dbm", -30.0))
        exponent = float(data.get("path_loss_exponent", 3.0))
        if "ap_positions" in data:
            return FloorplanSpec(
                building_id=building_id,
                ap_positions=tuple(tuple(p) for p in data["ap_positions"]),
                rp_path=tuple(tuple(p) for p in data["rp_path"]),
                shadowing_std_db=shadowing,
                p0_dbm=p0,
                path_loss_exponent=exponent,
            )
        return make_floorplan(
            building_id,
            ap_count=int(data["ap_count"]),
            path_length_m=int(data["path_length_m"]),
            shadowing_std_db=shadowing,
            layout_seed=int(data.get("layout_seed", 0)),
            p0_dbm=p0,
            path_loss_exponent=exponent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid floorplan entry {dict(data)!r}: {exc}") from exc


def load_floorplans(path: Path) -> list[FloorplanSpec]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read floorplans from {path}: {exc}") from exc
    entries = data.get("floorplans", data) if isinstance(data, dict) else data
    if not isinstance(entries, list):
        raise ConfigError(f"{path}: expected a list of floorplans")
    return [floorplan_from_dict(entry) for entry in entries]


# Radio maps ---------------------------------------------------------------------


@dataclass(frozen=True)
class RadioMap:
    """Ground-truth mean RSS (raw dBm) per RP and AP for one building."""

    floorplan: FloorplanSpec
    rss_dbm: np.ndarray  # (rp_count, ap_count)

    @property
    def rp_ids(self) -> list[str]:
        return self.floorplan.rp_ids

    @property
    def ap_ids(self) -> list[str]:
        return self.floorplan.ap_ids()

    def __call__(self, rp_id: str) -> np.ndarray:
        return self.rss_dbm[self.floorplan.rp_ids.index(rp_id)].copy()


def generate_radio_map(spec: FloorplanSpec, seed: int) -> RadioMap:
    """Log-distance path loss with static lognormal shadowing, clamped to [-100, 0] dBm."""

    rps = np.array(spec.rp_path, dtype=np.float64).reshape(-1, 3)
    aps = np.array(spec.ap_positions, dtype=np.float64).reshape(-1, 3)
    d0 = spec.reference_distance_m
    if rps.shape[0] == 0:
        return RadioMap(floorplan=spec, rss_dbm=np.zeros((0, aps.shape[0])))
    distances = np.linalg.norm(rps[:, np.newaxis, :] - aps[np.newaxis, :, :], axis=2)
    rss = spec.p0_dbm - 10.0 * spec.path_loss_exponent * np.log10(np.maximum(distances, d0) / d0)
    if spec.shadowing_std_db > 0:
        rng = derive_rng(seed, "radio-map", spec.building_id)
        rss = rss + rng.normal(0.0, spec.shadowing_std_db, size=rss.shape)
    return RadioMap(floorplan=spec, rss_dbm=np.clip(rss, MISSING_DBM, MAX_DBM))


def apply_device_profile(
    fp_raw_dbm: np.ndarray, profile: DeviceProfile, seed: int | np.random.Generator
) -> np.ndarray:
    """Apply one device's affine dB response, jitter and AP dropout to a raw fingerprint.

    Every AP that is not dropped goes through the response, so a hot device can lift
    readings off the missing sentinel.
    """

    raw = np.asarray(fp_raw_dbm, dtype=np.float64)
    if profile.is_identity:
        return raw.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dropped = rng.random(raw.shape) < profile.ap_dropout_prob
    out = profile.gain * raw + profile.offset_db
    if profile.jitter_std_db > 0:
        out = out + rng.normal(0.0, profile.jitter_std_db, size=raw.shape)
    out = np.clip(out, MISSING_DBM, MAX_DBM)
    out[dropped] = MISSING_DBM
    return out


def inject_burst_noise(fp_raw_dbm: np.ndarray, std_db: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian burst on every visible AP of one capture."""

    raw = np.asarray(fp_raw_dbm, dtype=np.float64)
    if std_db <= 0:
        return raw.copy()
    noisy = np.clip(raw + rng.normal(0.0, std_db, size=raw.shape), MISSING_DBM, MAX_DBM)
    noisy[raw <= MISSING_DBM] = MISSING_DBM
    return noisy


def capture(
    radio_map: RadioMap,
    profile: DeviceProfile,
    rng: np.random.Generator,
    *,
    per_rp: int = 1,
    burst_rps: frozenset[str] = frozenset(),
    burst_std_db: float = 0.0,
) -> FingerprintDataset:
    """Walk the RP path with one device, quantizing readings to integer dBm."""

    samples: list[Fingerprint] = []
    for row, rp_id in enumerate(radio_map.rp_ids):
        for _ in range(per_rp):
            raw = apply_device_profile(radio_map.rss_dbm[row], profile, rng)
            if rp_id in burst_rps:
                raw = inject_burst_noise(raw, burst_std_db, rng)
            samples.append(Fingerprint(rss=normalize_matrix(np.rint(raw)), rp_id=rp_id, device_id=profile.device_id))
    ap_index = {ap: i for i, ap in enumerate(radio_map.ap_ids)}
    return FingerprintDataset(samples=tuple(samples), ap_index=ap_index, rp_map=radio_map.floorplan.rp_map())


def build_offline_online_split(
    radio_map: RadioMap,
    profiles: tuple[DeviceProfile, Sequence[DeviceProfile]],
    seed: int,
    *,
    offline_per_rp: int = 5,
    online_per_rp: int = 1,
) -> tuple[FingerprintDataset, FingerprintDataset]:
    """Five training-device fingerprints per RP offline, one per RP per testing device online.

    ``profiles`` is ``(training_profile, testing_profiles)``.
    """

    training, testing = profiles[0], list(profiles[1])
    if not testing:
        raise ConfigError("at least one testing device profile is required")
    if not radio_map.rp_ids:
        raise DatasetError("radio map has an empty RP path")

    offline = capture(
        radio_map, training, derive_rng(seed, "offline", radio_map.floorplan.building_id), per_rp=offline_per_rp
    )
    online_samples: list[Fingerprint] = []
    for profile in testing:
        rng = derive_rng(seed, "online", radio_map.floorplan.building_id, profile.device_id)
        online_samples.extend(capture(radio_map, profile, rng, per_rp=online_per_rp).samples)
    return offline, offline.with_samples(online_samples)


# CSV ------------------------------------------------------------------------------


def _format_dbm(value: float) -> str:
    rounded = round(value)
    if abs(value - rounded) < 1e-9:
        return str(int(rounded))
    return repr(float(value))


def save_csv(dataset: FingerprintDataset, path: Path) -> None:
    """Write one coordinate row per RP in class order, then the raw dBm sample rows.

    Coordinate rows carry an empty device and empty cells; sample rows leave the
    coordinates blank. The RP map is rebuilt in file order on load.
    """

    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([*_CSV_FIXED_COLUMNS, *dataset.ap_ids])
        for rp_id in dataset.rp_map.rp_ids:
            coords = [repr(c) for c in dataset.rp_map.coords(rp_id)]
            writer.writerow([rp_id, *coords, "", *[""] * dataset.ap_count])
        for sample in dataset.samples:
            cells = [_format_dbm(v) for v in denormalize_rss(sample.rss)]
            writer.writerow([sample.rp_id, "", "", "", sample.device_id, *cells])


def load_csv(path: Path) -> FingerprintDataset:
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError("missing header", line=1) from None
        if tuple(header[: len(_CSV_FIXED_COLUMNS)]) != _CSV_FIXED_COLUMNS:
            raise DatasetError(f"header must start with {','.join(_CSV_FIXED_COLUMNS)}", line=1)
        ap_ids = header[len(_CSV_FIXED_COLUMNS) :]
        if len(set(ap_ids)) != len(ap_ids) or any(not ap for ap in ap_ids):
            raise DatasetError("AP columns must be unique and non-empty", line=1)
        ap_index = {ap: i for i, ap in enumerate(ap_ids)}

        coords: dict[str, Coordinate] = {}
        rows: list[tuple[str, str, np.ndarray]] = []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"expected {len(header)} cells, found {len(row)}", line=line)
            rp_id, x, y, z, device_id = row[:5]
            if x or y or z:
                try:
                    point = (float(x), float(y), float(z))
                except ValueError:
                    raise DatasetError(f"bad coordinates for {rp_id}", line=line) from None
                coords.setdefault(rp_id, point)
            elif rp_id not in coords:
                raise DatasetError(f"RP {rp_id} has no coordinates", line=line)
            cells = row[5:]
            if not device_id and not any(cells):
                continue
            try:
                raw = np.array([float(c) for c in cells], dtype=np.float64)
                rss = normalize_matrix(raw)
            except ValueError:
                raise DatasetError(f"non-numeric or non-finite RSS for {rp_id}", line=line) from None
            rows.append((rp_id, device_id, rss))

    samples = tuple(Fingerprint(rss=rss, rp_id=rp, device_id=dev) for rp, dev, rss in rows)
    return FingerprintDataset(samples=samples, ap_index=ap_index, rp_map=RpMap(coords))


@dataclass
class CaptureSummary:
    """Counts written by ``gen-data`` for one building."""

    building_id: str
    rp_count: int
    ap_count: int
    offline_samples: int
    online_samples: int
    paths: list[Path] = field(default_factory=list)

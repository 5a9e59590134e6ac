from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Coordinate, Fingerprint, FingerprintDataset, RpMap
from .errors import ConfigError, ShapeError
from .nn_core import Network, TrainConfig, TrainResult, forward, init_network, load_network, save_network, sgd_train

logger = logging.getLogger(__name__)

OFFLINE_DEFAULTS = TrainConfig(
    learning_rate=0.1, epochs=1200, batch_size=32, loss="sparse_categorical_crossentropy"
)
ONLINE_DEFAULTS = TrainConfig(learning_rate=0.1, epochs=10, batch_size=32, loss="sparse_categorical_crossentropy")


@dataclass(frozen=True)
class SnnConfig:
    input_dim: int
    class_count: int
    projection_width: int = 128
    hidden_width: int = 256
    output_activation: str = "sigmoid"

    def __post_init__(self) -> None:
        dims = (self.input_dim, self.class_count, self.projection_width, self.hidden_width)
        if min(dims) < 1:
            raise ConfigError(f"SNN widths must all be >= 1, got {dims}")
        if self.output_activation not in ("sigmoid", "softmax"):
            raise ConfigError(f"SNN output must be sigmoid or softmax, not {self.output_activation}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.input_dim, self.projection_width, self.hidden_width, self.class_count)


@dataclass(frozen=True)
class Prediction:
    rp_id: str
    scores: np.ndarray
    coords: Coordinate


def build_snn(cfg: SnnConfig, seed: int) -> Network:
    return init_network(cfg.dims, ("relu", "relu", cfg.output_activation), seed)


def _check_labels(net: Network, dataset: FingerprintDataset) -> None:
    if dataset.ap_count != net.input_dim:
        raise ShapeError(f"network expects {net.input_dim} APs, dataset has {dataset.ap_count}")
    if len(dataset.rp_map) > net.output_dim:
        raise ShapeError(f"dataset has {len(dataset.rp_map)} RPs but the network only {net.output_dim} classes")


def train_offline(net: Network, dataset: FingerprintDataset, cfg: TrainConfig = OFFLINE_DEFAULTS) -> TrainResult:
    """Pretrain the global model on the (augmented) offline fingerprints."""

    _check_labels(net, dataset)
    cfg = cfg.with_overrides(loss="sparse_categorical_crossentropy")
    return sgd_train(net, dataset.features(), dataset.labels(), cfg)


def retrain_local(lm: Network, local_data: FingerprintDataset, cfg: TrainConfig = ONLINE_DEFAULTS) -> Network:
    """Retrain a client's clone of the global model on its own captures only."""

    if len(local_data) == 0:
        logger.warning("retrain_local called with no local fingerprints; model left unchanged")
        return lm.copy()
    _check_labels(lm, local_data)
    cfg = cfg.with_overrides(loss="sparse_categorical_crossentropy")
    return sgd_train(lm, local_data.features(), local_data.labels(), cfg).network


def predict(net: Network, fp: Fingerprint | np.ndarray, rp_map: RpMap) -> Prediction:
    rss = fp.rss if isinstance(fp, Fingerprint) else np.asarray(fp, dtype=np.float64)
    if rss.shape != (net.input_dim,):
        raise ShapeError(f"network expects {net.input_dim} APs, got {rss.shape}")
    scores = forward(net, rss)
    rp_id = _rp_for_scores(scores, rp_map)
    return Prediction(rp_id=rp_id, scores=scores, coords=rp_map.coords(rp_id))


def _rp_for_scores(scores: np.ndarray, rp_map: RpMap) -> str:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties.
    index = int(np.argmax(scores))
    if index >= len(rp_map):
        raise ShapeError(f"class index {index} has no RP in the map")
    return rp_map.rp_at(index)


def localization_error(truth: Sequence[float], pred: Sequence[float]) -> float:
    return math.dist(tuple(float(c) for c in truth), tuple(float(c) for c in pred))


def evaluate(net: Network, dataset: FingerprintDataset) -> np.ndarray:
    """Per-sample localization error in meters, in dataset order."""

    if len(dataset) == 0:
        return np.zeros(0)
    _check_labels(net, dataset)
    scores = forward(net, dataset.features())
    rp_map = dataset.rp_map
    errors = np.empty(len(dataset))
    for i, (sample, row) in enumerate(zip(dataset.samples, scores)):
        predicted = _rp_for_scores(row, rp_map)
        errors[i] = localization_error(rp_map.coords(sample.rp_id), rp_map.coords(predicted))
    return errors


def accuracy(net: Network, dataset: FingerprintDataset) -> float:
    if len(dataset) == 0:
        return 0.0
    predicted = np.argmax(forward(net, dataset.features()), axis=1)
    return float(np.mean(predicted == dataset.labels()))


def save_checkpoint(net: Network, cfg: SnnConfig, rp_map: RpMap, path: Path) -> tuple[Path, Path]:
    """Write ``<path>.fnet`` plus a ``<path>.json`` sidecar with the SnnConfig and RP map."""

    weights_path = path.with_suffix(".fnet")
    sidecar_path = path.with_suffix(".json")
    save_network(net, weights_path)
    sidecar = {
        "snn": asdict(cfg),
        "rp_map": [[rp, *coords] for rp, coords in rp_map.entries.items()],
    }
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return weights_path, sidecar_path


def load_checkpoint(path: Path) -> tuple[Network, SnnConfig, RpMap]:
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    net = load_network(path.with_suffix(".fnet"))
    cfg = SnnConfig(**sidecar["snn"])
    rp_map = RpMap({str(row[0]): tuple(row[1:]) for row in sidecar["rp_map"]})
    if net.shape.dims != cfg.dims:
        raise ShapeError(f"checkpoint weights {net.shape.dims} do not match sidecar {cfg.dims}")
    return net, cfg, rp_map

"""Layer-wise stacked autoencoder used to synthesize augmented fingerprints.

Three autoencoders are involved. AE1 (D→h1→h1→D) learns the raw fingerprints,
AE3 (h1→h2→h2→h1) learns the codes emitted by AE1's second layer, and AE2
(D→h1→h1→h2→h1→D) is assembled from AE1's two encoder layers, AE3's encoder and
decoder layers and AE1's decoder layer, then fine-tuned end to end.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Fingerprint, FingerprintDataset
from .errors import ConfigError, ShapeError, WireFormatError
from .nn_core import (
    Network,
    TrainConfig,
    decode_network,
    encode_network,
    forward,
    init_network,
    loss_value,
    param_count,
    sgd_train,
)

logger = logging.getLogger(__name__)

_SAE_MAGIC = b"FSAE"


@dataclass(frozen=True)
class AeSpec:
    input_dim: int
    h1: int
    h2: int
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self) -> None:
        if not self.input_dim >= self.h1 >= self.h2 >= 1:
            raise ConfigError(
                f"autoencoder widths must satisfy D >= h1 >= h2 >= 1, got {self.input_dim}/{self.h1}/{self.h2}"
            )

    @classmethod
    def default_for(cls, input_dim: int) -> "AeSpec":
        return cls(input_dim=input_dim, h1=math.ceil(input_dim / 2), h2=math.ceil(input_dim / 4))


@dataclass
class StackedSae:
    spec: AeSpec
    ae1: Network
    ae3: Network
    ae2: Network

    def __post_init__(self) -> None:
        if len(self.ae2.layers) != 5:
            raise ShapeError(f"AE2 must have 5 dense layers, found {len(self.ae2.layers)}")

    @property
    def param_count(self) -> int:
        return param_count(self.ae1) + param_count(self.ae2) + param_count(self.ae3)


@dataclass
class SaeTrainReport:
    ae1: list[float] = field(default_factory=list)
    ae3: list[float] = field(default_factory=list)
    ae2: list[float] = field(default_factory=list)
    ae2_initial_mse: float | None = None
    ae2_final_mse: float | None = None


def _build_ae1(spec: AeSpec, seed: int) -> Network:
    hidden, out = spec.hidden_activation, spec.output_activation
    return init_network((spec.input_dim, spec.h1, spec.h1, spec.input_dim), (hidden, hidden, out), seed)


def _build_ae3(spec: AeSpec, seed: int) -> Network:
    # AE3 reconstructs ReLU codes, so its output stays non-negative and unbounded.
    hidden = spec.hidden_activation
    return init_network((spec.h1, spec.h2, spec.h2, spec.h1), (hidden, hidden, hidden), seed)


def assemble_ae2(ae1: Network, ae3: Network) -> Network:
    if ae3.input_dim != ae1.layers[1].out_dim:
        raise ShapeError(
            f"AE3 expects {ae3.input_dim} inputs but AE1's second layer emits {ae1.layers[1].out_dim}"
        )
    layers = [ae1.layers[0], ae1.layers[1], ae3.layers[0], ae3.layers[2], ae1.layers[2]]
    return Network(layers=copy.deepcopy(layers))


def _check_data(data: FingerprintDataset, spec: AeSpec) -> np.ndarray:
    if len(data) == 0:
        raise ShapeError("cannot train an autoencoder on an empty dataset")
    if data.ap_count != spec.input_dim:
        raise ShapeError(f"autoencoder expects {spec.input_dim} APs, dataset has {data.ap_count}")
    return data.features()


def reconstruction_mse(net: Network, features: np.ndarray) -> float:
    return loss_value(net, features, features, "mse")


def train_layerwise(
    data: FingerprintDataset, spec: AeSpec, cfg: TrainConfig, *, freeze_borrowed: bool = False
) -> tuple[StackedSae, SaeTrainReport]:
    """Greedy three-phase training: AE1, then AE3 on AE1 codes, then AE2 fine-tuning."""

    x = _check_data(data, spec)
    cfg = cfg.with_overrides(loss="mse", frozen_layers=())
    report = SaeTrainReport()

    phase1 = sgd_train(_build_ae1(spec, cfg.seed), x, x, cfg)
    ae1 = phase1.network
    report.ae1 = phase1.losses

    codes = forward(Network(layers=ae1.layers[:2]), x)
    phase3 = sgd_train(_build_ae3(spec, cfg.seed + 1), codes, codes, cfg.with_overrides(seed=cfg.seed + 1))
    ae3 = phase3.network
    report.ae3 = phase3.losses

    ae2 = assemble_ae2(ae1, ae3)
    report.ae2_initial_mse = reconstruction_mse(ae2, x)
    # Freezing keeps AE1's outer layers fixed and lets only the AE3 bridge adapt.
    frozen = (0, 1, 4) if freeze_borrowed else ()
    fine_tune = sgd_train(ae2, x, x, cfg.with_overrides(seed=cfg.seed + 2, frozen_layers=frozen))
    ae2 = fine_tune.network
    report.ae2 = fine_tune.losses
    report.ae2_final_mse = reconstruction_mse(ae2, x)
    logger.info(
        "layer-wise SAE trained: AE2 reconstruction MSE %.6g -> %.6g",
        report.ae2_initial_mse,
        report.ae2_final_mse,
    )
    return StackedSae(spec=spec, ae1=ae1, ae3=ae3, ae2=ae2), report


def train_end_to_end(data: FingerprintDataset, spec: AeSpec, cfg: TrainConfig) -> tuple[StackedSae, SaeTrainReport]:
    """Traditional SAE: the AE2 architecture trained from scratch, without greedy phases."""

    x = _check_data(data, spec)
    cfg = cfg.with_overrides(loss="mse", frozen_layers=())
    ae1 = _build_ae1(spec, cfg.seed)
    ae3 = _build_ae3(spec, cfg.seed + 1)
    ae2 = assemble_ae2(ae1, ae3)
    report = SaeTrainReport(ae2_initial_mse=reconstruction_mse(ae2, x))
    # Epoch budget matches the three layer-wise phases combined.
    result = sgd_train(ae2, x, x, cfg.with_overrides(epochs=3 * cfg.epochs, seed=cfg.seed + 2))
    report.ae2 = result.losses
    report.ae2_final_mse = reconstruction_mse(result.network, x)
    return StackedSae(spec=spec, ae1=ae1, ae3=ae3, ae2=result.network), report


def reconstruct(sae: StackedSae, fp: Fingerprint | np.ndarray) -> np.ndarray:
    rss = fp.rss if isinstance(fp, Fingerprint) else np.asarray(fp, dtype=np.float64)
    if rss.shape[-1] != sae.spec.input_dim:
        raise ShapeError(f"SAE expects {sae.spec.input_dim} APs, got {rss.shape[-1]}")
    return np.clip(forward(sae.ae2, rss), 0.0, 1.0)


def augment(sae: StackedSae, dataset: FingerprintDataset, *, multiplicity: int = 1) -> FingerprintDataset:
    """Originals followed by ``multiplicity`` synthetic copies each.

    The k-th synthetic copy is the reconstruction applied k times.
    """

    if multiplicity < 0:
        raise ConfigError("augmentation multiplicity must be >= 0")
    if len(dataset) == 0 or multiplicity == 0:
        return dataset.with_samples(dataset.samples)
    current = dataset.features()
    synthetic: list[Fingerprint] = []
    for _ in range(multiplicity):
        current = reconstruct(sae, current)
        synthetic.extend(
            Fingerprint(rss=row, rp_id=sample.rp_id, device_id=sample.device_id)
            for row, sample in zip(current, dataset.samples)
        )
    return dataset.with_samples([*dataset.samples, *synthetic])


def encode_sae(sae: StackedSae) -> bytes:
    spec_json = json.dumps(asdict(sae.spec), sort_keys=True).encode("utf-8")
    parts = [_SAE_MAGIC, struct.pack("<I", len(spec_json)), spec_json]
    for net in (sae.ae1, sae.ae2, sae.ae3):
        parts.append(encode_network(net))
    return b"".join(parts)


def decode_sae(payload: bytes) -> StackedSae:
    if payload[:4] != _SAE_MAGIC:
        raise WireFormatError("not an SAE snapshot (bad magic)")
    try:
        (spec_len,) = struct.unpack_from("<I", payload, 4)
        spec = AeSpec(**json.loads(payload[8 : 8 + spec_len].decode("utf-8")))
    except (struct.error, ValueError, TypeError) as exc:
        raise WireFormatError(f"bad SAE spec header: {exc}") from exc
    offset = 8 + spec_len
    nets = []
    for _ in range(3):
        net, used = decode_network(payload[offset:])
        nets.append(net)
        offset += used
    ae1, ae2, ae3 = nets
    return StackedSae(spec=spec, ae1=ae1, ae3=ae3, ae2=ae2)


def save_sae(sae: StackedSae, path: Path) -> None:
    path.write_bytes(encode_sae(sae))


def load_sae(path: Path) -> StackedSae:
    return decode_sae(path.read_bytes())

from __future__ import annotations

import shutil
from pathlib import Path

import pytest

from fedloc.dataset import FloorplanSpec, make_floorplan
from fedloc.nn_core import TrainConfig
from fedloc.scenario import DEVICE_CATALOG, ClientGroup, NoiseInjection, ScenarioConfig, TrainingSettings

_CONFIGS_ROOT = Path(__file__).resolve().parents[1] / "configs"

SCE = "sparse_categorical_crossentropy"


@pytest.fixture(scope="session")
def project_root() -> Path:
    return Path(__file__).resolve().parents[1]


@pytest.fixture
def smoke_config(tmp_path: Path) -> Path:
    dest = tmp_path / "desk_smoke.json"
    shutil.copyfile(_CONFIGS_ROOT / "desk_smoke.json", dest)
    return dest


@pytest.fixture
def tiny_floorplan() -> FloorplanSpec:
    return make_floorplan("T1", ap_count=8, path_length_m=5, shadowing_std_db=0.5, layout_seed=3)


@pytest.fixture
def tiny_training() -> TrainingSettings:
    return TrainingSettings(
        sae=TrainConfig(learning_rate=0.05, epochs=3, batch_size=8),
        offline=TrainConfig(learning_rate=0.1, epochs=30, batch_size=8, loss=SCE),
        online=TrainConfig(learning_rate=0.1, epochs=2, batch_size=8, loss=SCE),
    )


@pytest.fixture
def tiny_scenario(tiny_floorplan: FloorplanSpec, tiny_training: TrainingSettings) -> ScenarioConfig:
    return ScenarioConfig(
        name="tiny",
        floorplans=(tiny_floorplan,),
        training_device=DEVICE_CATALOG["MOTO"],
        clients=(ClientGroup(DEVICE_CATALOG["BLU"]), ClientGroup(DEVICE_CATALOG["S7"])),
        rounds=2,
        seeds=(0,),
        noise_injection=NoiseInjection(burst_std_db=6.0, rp_fraction=0.5),
        training=tiny_training,
        h_values=(10.0, 50.0, 100.0),
    )

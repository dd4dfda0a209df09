"""Session fixtures: desk-scale assets and trained desk generators.

Building these once keeps the whole suite inside a single desk-scale budget;
the acceptance tests assert on the recorded wall-clock durations.
"""

import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from advguide.data import ManifestDataset
from advguide.desk import build_desk_assets
from advguide.generator import GeneratorConfig
from advguide.guides import load_guide_manifest
from advguide.losses import LossConfig
from advguide.training import TrainConfig, train

DESK_TARGET_CLASS = 3

DESK_GEN_CFG = dict(
    residual_blocks=6,
    sim_placements=(1, 2, 3, 4, 5, 6),
    input_size=(32, 32),
    base_width=16,
    trunk_channels=32,
)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    return build_desk_assets(
        root,
        train_n=4000,
        eval_n=300,
        guide_train_n=300,
        guide_eval_n=150,
        seed=7,
        classifier_epochs=3,
    )


@pytest.fixture(scope="session")
def desk_pools(desk):
    return load_guide_manifest(desk.guide_manifest)


@pytest.fixture(scope="session")
def desk_train_ds(desk):
    return ManifestDataset(desk.train_manifest, image_size=32)


@pytest.fixture(scope="session")
def desk_eval_ds(desk):
    return ManifestDataset(desk.eval_manifest, image_size=32)


@pytest.fixture(scope="session")
def desk_surrogate(desk):
    return desk.surrogate()


@pytest.fixture(scope="session")
def desk_transfer(desk):
    return desk.transfer_model()


def desk_generator_config(**overrides):
    return GeneratorConfig(**{**DESK_GEN_CFG, **overrides})


@pytest.fixture(scope="session")
def desk_targeted(desk, desk_train_ds, desk_pools, desk_surrogate, tmp_path_factory):
    """One-epoch targeted training run; returns result + wall-clock seconds."""
    out = tmp_path_factory.mktemp("run_targeted")
    cfg = TrainConfig(
        mode="targeted", target_class=DESK_TARGET_CLASS, seed=1, epochs=1, loss=LossConfig()
    )
    t0 = time.perf_counter()
    result = train(
        desk_train_ds, desk_surrogate, desk_pools["train"], cfg, desk_generator_config(), out
    )
    return {"result": result, "seconds": time.perf_counter() - t0, "cfg": cfg}


@pytest.fixture(scope="session")
def desk_untargeted(desk, desk_train_ds, desk_pools, desk_surrogate, tmp_path_factory):
    """One-epoch untargeted training run; returns result + wall-clock seconds."""
    out = tmp_path_factory.mktemp("run_untargeted")
    cfg = TrainConfig(mode="untargeted", seed=1, epochs=1, loss=LossConfig())
    t0 = time.perf_counter()
    result = train(
        desk_train_ds, desk_surrogate, desk_pools["train"], cfg, desk_generator_config(), out
    )
    return {"result": result, "seconds": time.perf_counter() - t0, "cfg": cfg}

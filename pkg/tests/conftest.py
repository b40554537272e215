from dataclasses import replace

import pytest

from lamp.config import Stage1Config, Stage2Config
from lamp.gradcore import Rng
from lamp.motionrep import GridSpec
from lamp.toyworld.dataset import generate_dataset

TINY_S1 = replace(Stage1Config(), steps=4, batch_size=4, d_z=16, percept_layers=1, percept_heads=2,
                  d_m=16, motion_layers=1, motion_heads=2, time_dim=8, probe_batches=1)
TINY_S2 = replace(Stage2Config(), steps=4, batch_size=4, d_a=16, action_layers=1, action_heads=2,
                  time_dim=8, guidance_heads=2, guidance_hidden=16, probe_batches=1, freeze_check_every=2)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.lampds"
    return generate_dataset(["push", "pick_place", "stack"], 3, GridSpec(), 4, Rng(0), path)


@pytest.fixture(scope="session")
def tiny_stage1(tiny_data, tmp_path_factory):
    from lamp.trainer import train_stage1

    return train_stage1(TINY_S1, tiny_data, tmp_path_factory.mktemp("s1"))


@pytest.fixture(scope="session")
def tiny_stage2(tiny_data, tiny_stage1, tmp_path_factory):
    from lamp.checkpoint import checkpoint_bytes
    from lamp.trainer import load_checkpoint, train_stage2

    s1 = load_checkpoint(checkpoint_bytes(tiny_stage1.checkpoint))
    return train_stage2(TINY_S2, tiny_data, s1, tmp_path_factory.mktemp("s2"))

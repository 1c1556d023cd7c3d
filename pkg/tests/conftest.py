"""Shared fixtures: small trained models, cached for the whole session.

Training runs once per session per variant on a reduced schedule; the
acceptance suite does its own full-budget training run.
"""

import numpy as np
import pytest
import torch

from trackseg.model import ModelConfig
from trackseg.synthdata import generate, random_scene
from trackseg.train import TrainConfig, train

TOY_MODEL = dict(
    backbone_kind="toy_convnet",
    feature_channels=64,
    mask_side=31,
    toy_channels=(16, 32, 64, 64),
)


def overfit_scenes(n=4, n_frames=12, seed0=0, **kw):
    defaults = dict(size_range=(40.0, 70.0), aspect_range=(1.0, 2.0), rotation_rate=(0.0, 0.04))
    defaults.update(kw)
    return [generate(random_scene(seed=seed0 + s, n_frames=n_frames, **defaults)) for s in range(n)]


@pytest.fixture(scope="session")
def toy_scenes():
    return overfit_scenes()


@pytest.fixture(scope="session")
def trained_three_branch(toy_scenes):
    cfg = ModelConfig(**TOY_MODEL)
    tcfg = TrainConfig(
        batch_size=6,
        steps_per_epoch=30,
        warmup_epochs=2,
        decay_epochs=8,
        refined_positives_per_pair=3,
        seed=0,
    )
    net, history = train(toy_scenes, cfg, tcfg, variant="three_branch")
    return net, toy_scenes, history

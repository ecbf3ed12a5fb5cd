"""Shared fixtures: micro-scale model configs and a tiny on-disk dataset.

The micro scale keeps forward passes in the millisecond range; anything that
needs the default configuration lives in test_acceptance.py behind the slow
marker.
"""

from __future__ import annotations

import numpy as np
import pytest
import torch

from maskmotion import config as config_mod
from maskmotion import data
from maskmotion.codec import LatentCodec
from maskmotion.model import MMDiT, ModelConfig

# World settings for the tiny dataset: 8 frames of 32x32 keeps every sample
# around 25 KB while leaving room for a couple of collisions.
TINY_CONFIG = {
    "seed": 0,
    "world": {
        "frames": 8,
        "height": 32,
        "width": 32,
        "min_objects": 2,
        "max_objects": 3,
        "radius_range": [4.0, 6.0],
        "speed_range": [1.0, 2.5],
        "train_scenes": 8,
        "val_scenes": 4,
    },
    "model": {"depth": 4, "width": 32, "heads": 2},
    "flow": {"sample_steps": 4},
    "train": {
        "pretrain_epochs": 1,
        "ranking_samples": 2,
        "n_skip": 1,
        "stage1_epochs": 1,
        "stage2_epochs": 1,
        "batch_size": 4,
        "pretrain_batch_size": 4,
    },
    "eval": {"scenes": 2},
}


def tiny_run_config() -> config_mod.RunConfig:
    return config_mod.from_dict(TINY_CONFIG)


def micro_model_config(**overrides) -> ModelConfig:
    """A model small enough that a forward pass is ~1 ms."""
    kwargs = dict(
        depth=3,
        width=16,
        heads=2,
        text_len=4,
        vocab_size=16,
        latent_t=2,
        latent_h=4,
        latent_w=4,
        latent_channels=6,
        mlp_ratio=2.0,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


def randomize(module: torch.nn.Module, seed: int = 0, scale: float = 0.05) -> torch.nn.Module:
    """Give every parameter a small random value.

    Fresh models are exact identities by construction; tests of nontrivial
    behavior (attention recording, skipping, checkpoint round trips) need the
    gates and heads moved off zero.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * scale)
    return module


def micro_inputs(cfg: ModelConfig, batch: int = 2, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    latent = torch.randn(
        (batch, cfg.latent_channels, cfg.latent_t, cfg.latent_h, cfg.latent_w), generator=gen
    )
    first = torch.randn(
        (batch, cfg.latent_channels, 1, cfg.latent_h, cfg.latent_w), generator=gen
    )
    text = torch.randint(0, cfg.vocab_size, (batch, cfg.text_len), generator=gen)
    t = torch.rand(batch, generator=gen)
    return latent, first, text, t


@pytest.fixture
def micro_cfg() -> ModelConfig:
    return micro_model_config()


@pytest.fixture
def micro_model(micro_cfg) -> MMDiT:
    torch.manual_seed(0)
    return MMDiT(micro_cfg)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A generated tiny dataset shared across the session (read-only)."""
    root = tmp_path_factory.mktemp("tiny_dataset")
    cfg = tiny_run_config()
    data.generate_dataset(cfg.world, root)
    return root


@pytest.fixture(scope="session")
def tiny_codec() -> LatentCodec:
    return LatentCodec()

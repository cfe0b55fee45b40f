"""Shared tiny model configs for fast CPU tests."""

import dataclasses

import pytest
import torch

from hcvae.model import AttnStageSpec, ModelConfig, PRESETS, StageSpec


@pytest.fixture(autouse=True)
def _fixed_seed():
    torch.manual_seed(0)


@pytest.fixture
def micro_cfg() -> ModelConfig:
    """Smallest convolutional config: widths 8/16, f = 2x4x4."""
    return ModelConfig(
        compression=(2, 4, 4),
        spatial_stages=(StageSpec(8, 1, (1, 2, 2)),),
        st_stages=(StageSpec(16, 1, (2, 2, 2)),),
        attn=None,
        latent_channels=4,
    )


@pytest.fixture
def micro_attn_cfg() -> ModelConfig:
    """Adds a 2-head transformer bottleneck stage: f = 4x8x8."""
    return ModelConfig(
        compression=(4, 8, 8),
        spatial_stages=(StageSpec(8, 1, (1, 2, 2)),),
        st_stages=(StageSpec(16, 1, (2, 2, 2)),),
        attn=AttnStageSpec(16, 1, heads=2),
        latent_channels=4,
    )


def scaled_preset(name: str, multiplier: float = 0.125) -> ModelConfig:
    return dataclasses.replace(PRESETS[name], width_multiplier=multiplier)

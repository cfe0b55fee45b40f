"""High-compression causal video autoencoder."""

from .blocks import (
    AttnConfig,
    CausalAttention3d,
    CausalConv3d,
    Conv2dVideo,
    PixelNorm,
    ResidualBlock,
    build_block_causal_mask,
    pixel_norm,
    pixel_shuffle_3d,
    pixel_unshuffle_3d,
)
from .losses import (
    LossWeights,
    haar_dwt_loss,
    kl_to_prior,
    latent_consistency,
    recon_l1,
    total_loss,
)
from .model import (
    AttnStageSpec,
    LatentPosterior,
    ModelConfig,
    PRESETS,
    StageSpec,
    VideoAutoencoder,
    latent_frames,
)
from .profiling import ProfileReport, profile
from .training import TrainConfig, TrainState, init_state, run_training, train_step

__all__ = [
    "AttnConfig",
    "AttnStageSpec",
    "CausalAttention3d",
    "CausalConv3d",
    "Conv2dVideo",
    "LatentPosterior",
    "LossWeights",
    "ModelConfig",
    "PRESETS",
    "PixelNorm",
    "ProfileReport",
    "ResidualBlock",
    "StageSpec",
    "TrainConfig",
    "TrainState",
    "VideoAutoencoder",
    "build_block_causal_mask",
    "haar_dwt_loss",
    "init_state",
    "kl_to_prior",
    "latent_consistency",
    "latent_frames",
    "pixel_norm",
    "pixel_shuffle_3d",
    "pixel_unshuffle_3d",
    "profile",
    "recon_l1",
    "run_training",
    "total_loss",
    "train_step",
]

# architecture.py
"""
U-Net-like masked autoencoder with a VGG-style 3D encoder, and the
lesion classifiers derived from its encoder.

Encoder stage i: convs_per_stage[i] x (3x3x3 conv -> batchnorm -> ReLU) with
base_channels * 2**i channels, then a 2x2x2 max pool. The decoder mirrors it:
nearest upsample -> optional skip concatenation -> the same number of conv
blocks, and a final 1x1x1 conv + sigmoid.
"""

import copy
import logging
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, model_validator

import neuralops as ops
from config import VoxmimError

logger = logging.getLogger(__name__)

VGG16_CONVS = (2, 2, 3, 3, 3)


class ArchitectureError(VoxmimError, ValueError):
    """Invalid model config, input shape, or encoder source."""


# ----------------------------
# Config
# ----------------------------
class ModelConfig(BaseModel):
    """input_dims are (x, y, z) voxels; the network sees (z, y, x)."""

    model_config = ConfigDict(extra="forbid")

    input_dims: Tuple[int, int, int] = (32, 32, 16)
    base_channels: int = Field(8, ge=1)
    stages: int = Field(3, ge=2, le=5)
    convs_per_stage: Optional[Tuple[int, ...]] = None
    skip_connections: bool = True

    @model_validator(mode="after")
    def _fill_convs(self):
        if self.convs_per_stage is None:
            self.convs_per_stage = VGG16_CONVS[: self.stages]
        if len(self.convs_per_stage) != self.stages:
            raise ValueError(f"convs_per_stage has {len(self.convs_per_stage)} entries for {self.stages} stages")
        if min(self.convs_per_stage) < 1 or min(self.input_dims) < 1:
            raise ValueError("convs_per_stage and input_dims must be positive")
        return self

    def check_divisible(self) -> None:
        factor = 2 ** self.stages
        for axis, d in zip("xyz", self.input_dims):
            if d % factor:
                raise ArchitectureError(f"input dim {axis}={d} not divisible by 2^{self.stages}={factor}")

    def widths(self) -> List[int]:
        return [self.base_channels * 2 ** i for i in range(self.stages)]

    @property
    def tensor_dims(self) -> Tuple[int, int, int]:
        x, y, z = self.input_dims
        return z, y, x

    @property
    def latent_dims(self) -> Tuple[int, int, int]:
        f = 2 ** self.stages
        return tuple(d // f for d in self.tensor_dims)


class ClassifierMode(str, Enum):
    LINEAR_PROBE = "probe"
    FINE_TUNE = "finetune"
    RANDOM_INIT = "random"
    EXTERNAL_WEIGHTS = "external"


# ----------------------------
# Building blocks
# ----------------------------
class ConvBlock(nn.Module):
    """3x3x3 conv (padding 1) -> batchnorm -> ReLU."""

    def __init__(self, in_channels: int, out_channels: int, generator: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, 3, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.gamma = nn.Parameter(torch.ones(out_channels))
        self.beta = nn.Parameter(torch.zeros(out_channels))
        self.register_buffer("running_mean", torch.zeros(out_channels))
        self.register_buffer("running_var", torch.ones(out_channels))
        nn.init.kaiming_uniform_(self.weight, mode="fan_in", nonlinearity="relu", generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = ops.conv3d(x, self.weight, self.bias, padding=1)
        x = ops.batchnorm3d(x, self.gamma, self.beta, self.running_mean, self.running_var, training=self.training)
        return ops.activation(x, "relu")


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig, generator: torch.Generator):
        super().__init__()
        self.config = config
        self.stages = nn.ModuleList()
        in_ch = 1
        for width, n_convs in zip(config.widths(), config.convs_per_stage):
            blocks = []
            for _ in range(n_convs):
                blocks.append(ConvBlock(in_ch, width, generator))
                in_ch = width
            self.stages.append(nn.Sequential(*blocks))
        self.out_channels = in_ch

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """Returns (latent, per-stage features before pooling)."""
        skips = []
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
            x = ops.maxpool3d(x, 2)
        return x, skips


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig, generator: torch.Generator):
        super().__init__()
        self.skip_connections = config.skip_connections
        widths = config.widths()
        self.stages = nn.ModuleList()
        in_ch = widths[-1]
        for i in reversed(range(config.stages)):
            blocks = []
            ch = in_ch + (widths[i] if config.skip_connections else 0)
            for _ in range(config.convs_per_stage[i]):
                blocks.append(ConvBlock(ch, widths[i], generator))
                ch = widths[i]
            self.stages.append(nn.Sequential(*blocks))
            in_ch = widths[i]
        self.out_weight = nn.Parameter(torch.empty(1, in_ch, 1, 1, 1))
        self.out_bias = nn.Parameter(torch.zeros(1))
        nn.init.kaiming_uniform_(self.out_weight, mode="fan_in", nonlinearity="relu", generator=generator)

    def forward(self, latent: torch.Tensor, skips: List[torch.Tensor]) -> torch.Tensor:
        x = latent
        for stage, skip in zip(self.stages, reversed(skips)):
            x = ops.upsample_nearest3d(x, 2)
            if self.skip_connections:
                x = torch.cat([x, skip], dim=1)
            x = stage(x)
        x = ops.conv3d(x, self.out_weight, self.out_bias, padding=0)
        return ops.activation(x, "sigmoid")


# ----------------------------
# Models
# ----------------------------
class MaskedAutoencoder(nn.Module):
    def __init__(self, config: ModelConfig, generator: torch.Generator):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config, generator)
        self.decoder = Decoder(config, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        latent, skips = self.encoder(x)
        return self.decoder(latent, skips)


class Classifier(nn.Module):
    """Encoder -> global average pool -> one linear unit -> sigmoid."""

    def __init__(self, config: ModelConfig, encoder: Encoder, mode: ClassifierMode, generator: torch.Generator):
        super().__init__()
        self.config = config
        self.mode = ClassifierMode(mode)
        self.encoder = encoder
        self.head_weight = nn.Parameter(torch.empty(1, encoder.out_channels))
        self.head_bias = nn.Parameter(torch.zeros(1))
        nn.init.kaiming_uniform_(self.head_weight, mode="fan_in", nonlinearity="relu", generator=generator)
        if self.mode == ClassifierMode.LINEAR_PROBE:
            for p in self.encoder.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.mode == ClassifierMode.LINEAR_PROBE:
            # frozen encoder keeps its batchnorm running statistics too
            self.encoder.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        latent, _ = self.encoder(x)
        logits = ops.linear(ops.global_avg_pool3d(latent), self.head_weight, self.head_bias)
        return ops.activation(logits, "sigmoid").reshape(-1)

    def head_parameters(self) -> List[nn.Parameter]:
        return [self.head_weight, self.head_bias]


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ----------------------------
# Operations
# ----------------------------
def build_mae(config: ModelConfig, generator: torch.Generator) -> MaskedAutoencoder:
    config.check_divisible()
    mae = MaskedAutoencoder(config, generator)
    logger.debug("Built MAE with %d parameters for input %s", parameter_count(mae), config.input_dims)
    return mae


def _check_input(config: ModelConfig, batch: torch.Tensor) -> None:
    expected = (1,) + config.tensor_dims
    if batch.dim() != 5 or tuple(batch.shape[1:]) != expected:
        raise ArchitectureError(f"Expected a batch of shape (N, {', '.join(map(str, expected))}), got {tuple(batch.shape)}")


def reconstruct(mae: MaskedAutoencoder, corrupted_batch: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    _check_input(mae.config, corrupted_batch)
    mae.train(mode == "train")
    return mae(corrupted_batch)


def _external_encoder(path: Union[str, Path], config: ModelConfig) -> Encoder:
    from trainer import load_checkpoint

    source = load_checkpoint(path)  # CheckpointError when missing or truncated
    encoder = getattr(source, "encoder", None)
    if encoder is None:
        raise ArchitectureError(f"Checkpoint {path} holds no encoder")
    if source.config.widths() != config.widths() or source.config.convs_per_stage != config.convs_per_stage:
        raise ArchitectureError(
            f"External encoder shape mismatch: widths {source.config.widths()} / convs {source.config.convs_per_stage} "
            f"vs requested {config.widths()} / {config.convs_per_stage}"
        )
    return _trainable_copy(encoder)


def _trainable_copy(encoder: Encoder) -> Encoder:
    # a probe checkpoint stores its encoder frozen
    encoder = copy.deepcopy(encoder)
    for p in encoder.parameters():
        p.requires_grad_(True)
    return encoder


def build_classifier(
    encoder_source: Optional[MaskedAutoencoder],
    mode: Union[ClassifierMode, str],
    generator: torch.Generator,
    config: Optional[ModelConfig] = None,
    external_path: Optional[Union[str, Path]] = None,
) -> Classifier:
    """
    Args:
        encoder_source: pretrained MAE for probe/finetune; ignored otherwise.
        mode: probe | finetune | random | external.
        generator: seeds the fresh head (and the fresh encoder in random mode).
        config: model config when no MAE is given.
        external_path: checkpoint to take the encoder from in external mode.
    """
    mode = ClassifierMode(mode)
    config = config or (encoder_source.config if encoder_source is not None else None)
    if config is None:
        raise ArchitectureError("build_classifier needs a ModelConfig or an encoder source")
    config.check_divisible()

    if mode in (ClassifierMode.LINEAR_PROBE, ClassifierMode.FINE_TUNE):
        if encoder_source is None:
            raise ArchitectureError(f"Mode '{mode.value}' needs a pretrained masked autoencoder")
        encoder = _trainable_copy(encoder_source.encoder)
    elif mode == ClassifierMode.RANDOM_INIT:
        encoder = Encoder(config, generator)
    else:
        if external_path is None:
            raise ArchitectureError("Mode 'external' needs a checkpoint path")
        encoder = _external_encoder(external_path, config)

    return Classifier(config, encoder, mode, generator)


@torch.no_grad()
def predict(classifier: Classifier, batch: torch.Tensor) -> np.ndarray:
    """Eval-mode probabilities, one per case."""
    _check_input(classifier.config, batch)
    classifier.eval()
    return classifier(batch).double().cpu().numpy()

"""Segmentation networks and the registry that builds them from a config."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

NETWORKS: dict[str, type[nn.Module]] = {}


def register_network(kind: str):
    def wrap(cls):
        NETWORKS[kind] = cls
        return cls
    return wrap


@dataclass
class NetworkConfig:
    kind: str = "cnn_unet"
    in_channels: int = 3
    num_classes: int = 3
    base_channels: int = 16
    unet_depth: int = 4
    embed_dim: int = 48
    depths: list[int] = field(default_factory=lambda: [2, 2, 2])
    num_heads: list[int] = field(default_factory=lambda: [3, 6, 12])
    window_size: int = 7
    patch_size: int = 4
    projection_dim: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in NETWORKS:
            raise ValueError(f"unknown network kind {self.kind!r}; known: {sorted(NETWORKS)}")
        if self.num_classes != 3:
            raise ValueError("num_classes must be 3")
        if len(self.depths) != len(self.num_heads):
            raise ValueError("depths and num_heads must have the same length")


class ProjectionHead(nn.Module):
    """linear -> ReLU -> linear, then L2 normalisation."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, x):
        return F.normalize(self.fc2(F.relu(self.fc1(x))), dim=1, eps=1e-12)


def build_network(cfg: NetworkConfig) -> nn.Module:
    """Construct a network; the initial weights depend only on ``cfg``."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = NETWORKS[cfg.kind](cfg)
    model.config = replace(cfg)
    return model


def forward(model: nn.Module, images: torch.Tensor, with_representation: bool = False):
    """Run ``model`` and return ``(logits, z)``; ``z`` is None unless requested.

    Raises FloatingPointError if the network produced non-finite values.
    """
    logits, z = model(images, with_representation=with_representation)
    if not torch.isfinite(logits).all():
        raise FloatingPointError(
            f"{type(model).__name__} produced non-finite logits for input of shape {tuple(images.shape)}"
        )
    if z is not None and not torch.isfinite(z).all():
        raise FloatingPointError(f"{type(model).__name__} produced a non-finite representation")
    return logits, z


def parameter_vector(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


from crossseg.models.unet import UNet  # noqa: E402,F401
from crossseg.models.swin_unet import SwinUNet  # noqa: E402,F401

"""Encoder backbones, classifier and projection heads, EMA mirror.

The model is an encoder producing penultimate features, a linear
classifier over those features, and a small projection head mapping
features to unit-norm embeddings. The encoder and projection head keep
slowly-moving EMA mirrors that feed the memory queues and evaluation;
mirrors never receive gradients.
"""
from __future__ import annotations

import copy
import dataclasses
from typing import Iterable, Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import diagnostics


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Row-wise L2 normalization; zero rows map to the first basis vector."""
    norms = x.norm(dim=-1, keepdim=True)
    zero = norms <= eps
    if bool(zero.any()):
        diagnostics.bump("zero_vector_projection", int(zero.sum()))
        basis = torch.zeros_like(x)
        basis[..., 0] = 1.0
        return torch.where(zero, basis, x / norms.clamp_min(eps))
    return x / norms


class SmallCNN(nn.Module):
    """Four-block conv encoder for desk-scale and synthetic runs."""

    def __init__(self, in_channels: int = 3, channels: tuple = (16, 32, 64, 128)):
        super().__init__()
        layers = []
        prev = in_channels
        for i, ch in enumerate(channels):
            layers += [nn.Conv2d(prev, ch, 3, padding=1, bias=False), nn.BatchNorm2d(ch), nn.ReLU(inplace=True)]
            if i < len(channels) - 1:
                layers.append(nn.MaxPool2d(2))
            prev = ch
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = channels[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(x)).flatten(1)


class _WideBlock(nn.Module):
    def __init__(self, in_planes: int, out_planes: int, stride: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, out_planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_planes)
        self.conv2 = nn.Conv2d(out_planes, out_planes, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != out_planes:
            self.shortcut = nn.Conv2d(in_planes, out_planes, 1, stride=stride, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(x))
        skip = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv2(F.relu(self.bn2(self.conv1(out))))
        return out + skip


class WideResNet(nn.Module):
    """Wide ResNet (pre-activation) encoder; depth 28 / width 2 by default."""

    def __init__(self, depth: int = 28, widen: int = 2, in_channels: int = 3):
        super().__init__()
        if (depth - 4) % 6 != 0:
            raise ValueError("depth must be 6n + 4")
        n = (depth - 4) // 6
        widths = [16, 16 * widen, 32 * widen, 64 * widen]
        self.conv1 = nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False)
        blocks = []
        in_planes = widths[0]
        for group, stride in enumerate((1, 2, 2)):
            for b in range(n):
                blocks.append(_WideBlock(in_planes, widths[group + 1], stride if b == 0 else 1))
                in_planes = widths[group + 1]
        self.blocks = nn.Sequential(*blocks)
        self.bn = nn.BatchNorm2d(widths[3])
        self.feature_dim = widths[3]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.blocks(self.conv1(x))
        out = F.relu(self.bn(out))
        return F.adaptive_avg_pool2d(out, 1).flatten(1)


class ProjectionHead(nn.Module):
    """Two-layer MLP head; output is L2-normalized by the caller."""

    def __init__(self, in_dim: int, out_dim: int = 64, hidden_dim: int | None = None):
        super().__init__()
        hidden_dim = hidden_dim or in_dim
        self.net = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(inplace=True), nn.Linear(hidden_dim, out_dim))
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


BACKBONES = {
    "small-cnn": lambda in_channels: SmallCNN(in_channels=in_channels),
    "wrn-28-2": lambda in_channels: WideResNet(depth=28, widen=2, in_channels=in_channels),
}


def _ema_copy(module: nn.Module) -> nn.Module:
    mirror = copy.deepcopy(module)
    for p in mirror.parameters():
        p.requires_grad_(False)
    mirror.eval()
    return mirror


@dataclasses.dataclass
class ModelState:
    """Online encoder/classifier/projector plus their EMA mirrors.

    ``ema_momentum`` is the retention factor: mirror <- rho * mirror +
    (1 - rho) * online at every :meth:`ema_update`. Mirrors are reached
    only through that update; gradients never touch them.
    """

    encoder: nn.Module
    classifier: nn.Linear
    projector: nn.Module
    ema_encoder: nn.Module
    ema_projector: nn.Module
    ema_momentum: float
    in_channels: int = 3

    def __post_init__(self):
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError(f"ema_momentum must be in [0, 1], got {self.ema_momentum}")

    @classmethod
    def build(
        cls,
        backbone: str,
        num_classes: int,
        proj_dim: int = 64,
        ema_momentum: float = 0.999,
        in_channels: int = 3,
    ) -> "ModelState":
        if backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone!r}; choose from {sorted(BACKBONES)}")
        encoder = BACKBONES[backbone](in_channels)
        classifier = nn.Linear(encoder.feature_dim, num_classes)
        projector = ProjectionHead(encoder.feature_dim, proj_dim)
        return cls(
            encoder=encoder,
            classifier=classifier,
            projector=projector,
            ema_encoder=_ema_copy(encoder),
            ema_projector=_ema_copy(projector),
            ema_momentum=ema_momentum,
            in_channels=in_channels,
        )

    @property
    def feature_dim(self) -> int:
        return self.encoder.feature_dim

    @property
    def num_classes(self) -> int:
        return self.classifier.out_features

    def encode(self, images: torch.Tensor, use_ema: bool = False) -> torch.Tensor:
        """Penultimate-layer features; the EMA path carries no gradient."""
        if images.ndim != 4 or images.shape[1] != self.in_channels:
            raise ValueError(
                f"expected images [B, {self.in_channels}, H, W], got shape {tuple(images.shape)}"
            )
        if use_ema:
            with torch.no_grad():
                return self.ema_encoder(images)
        return self.encoder(images)

    def classify(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.feature_dim:
            raise ValueError(
                f"expected features of dim {self.feature_dim}, got {features.shape[-1]}"
            )
        return self.classifier(features)

    def project(self, features: torch.Tensor, use_ema: bool = False) -> torch.Tensor:
        """Unit-norm embeddings of encoder features."""
        if use_ema:
            with torch.no_grad():
                return l2_normalize(self.ema_projector(features))
        return l2_normalize(self.projector(features))

    @torch.no_grad()
    def ema_update(self) -> None:
        """mirror <- rho * mirror + (1 - rho) * online; buffers are copied."""
        rho = self.ema_momentum
        for online, mirror in ((self.encoder, self.ema_encoder), (self.projector, self.ema_projector)):
            for p_on, p_mi in zip(online.parameters(), mirror.parameters()):
                p_mi.mul_(rho).add_(p_on, alpha=1.0 - rho)
            for b_on, b_mi in zip(online.buffers(), mirror.buffers()):
                b_mi.copy_(b_on)

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        for module in (self.encoder, self.classifier, self.projector):
            yield from module.parameters()

    def train_mode(self) -> None:
        for module in (self.encoder, self.classifier, self.projector):
            module.train()

    def eval_mode(self) -> None:
        for module in (self.encoder, self.classifier, self.projector):
            module.eval()

    def state_dict(self) -> dict:
        return {
            "encoder": self.encoder.state_dict(),
            "classifier": self.classifier.state_dict(),
            "projector": self.projector.state_dict(),
            "ema_encoder": self.ema_encoder.state_dict(),
            "ema_projector": self.ema_projector.state_dict(),
            "ema_momentum": self.ema_momentum,
        }

    def load_state_dict(self, state: dict) -> None:
        self.encoder.load_state_dict(state["encoder"])
        self.classifier.load_state_dict(state["classifier"])
        self.projector.load_state_dict(state["projector"])
        self.ema_encoder.load_state_dict(state["ema_encoder"])
        self.ema_projector.load_state_dict(state["ema_projector"])
        self.ema_momentum = float(state["ema_momentum"])

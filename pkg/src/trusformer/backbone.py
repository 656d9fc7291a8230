"""ROI feature extractor and VICReg projector."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

FEATURE_DIM = 512


@dataclass(frozen=True)
class BackboneConfig:
    """Compact residual CNN for 1-channel ROIs.

    One residual stage per entry of ``stage_channels``; every stage after the
    first halves the resolution. If the last stage is narrower than
    ``feature_dim`` a 1x1 conv widens it before global average pooling.
    """

    stem_channels: int = 64
    stage_channels: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_stage: int = 1
    stem_stride: int = 2
    feature_dim: int = FEATURE_DIM
    input_size_px: tuple[int, int] = (256, 256)

    def __post_init__(self):
        if self.feature_dim != FEATURE_DIM:
            raise ValueError(f"feature_dim must be {FEATURE_DIM}")
        if len(self.stage_channels) != 4:
            raise ValueError("backbone has exactly 4 stages")
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "input_size_px", tuple(self.input_size_px))


# Small enough to train on a single CPU core; used by the acceptance run.
DESK_BACKBONE = BackboneConfig(
    stem_channels=8, stage_channels=(8, 16, 32, 64), stem_stride=2, input_size_px=(32, 32)
)


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = nn.Identity()
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class ResNetBackbone(nn.Module):
    """(B, 1, H, W) -> (B, 512)."""

    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.config = config
        c = config.stem_channels
        self.stem = nn.Sequential(
            nn.Conv2d(1, c, 3, config.stem_stride, 1, bias=False),
            nn.BatchNorm2d(c),
            nn.ReLU(inplace=True),
        )
        layers = []
        for i, width in enumerate(config.stage_channels):
            for b in range(config.blocks_per_stage):
                stride = 2 if (i > 0 and b == 0) else 1
                layers.append(BasicBlock(c, width, stride))
                c = width
        self.stages = nn.Sequential(*layers)
        self.head = nn.Identity()
        if c != config.feature_dim:
            self.head = nn.Sequential(
                nn.Conv2d(c, config.feature_dim, 1, bias=False),
                nn.BatchNorm2d(config.feature_dim),
                nn.ReLU(inplace=True),
            )
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        x = self.head(self.stages(self.stem(x)))
        return torch.flatten(self.pool(x), 1)


@dataclass(frozen=True)
class ProjectorConfig:
    widths: tuple[int, ...] = (1024, 1024, 1024)

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("projector needs at least one hidden layer")
        object.__setattr__(self, "widths", tuple(self.widths))


class Projector(nn.Sequential):
    """MLP 512 -> widths[0] -> ... -> widths[-1]; BN+ReLU between layers."""

    def __init__(self, config: ProjectorConfig = ProjectorConfig(), in_dim: int = FEATURE_DIM):
        layers: list[nn.Module] = []
        dims = (in_dim, *config.widths)
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers += [nn.BatchNorm1d(dims[i + 1]), nn.ReLU(inplace=True)]
        super().__init__(*layers)

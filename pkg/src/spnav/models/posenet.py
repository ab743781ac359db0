"""18-layer residual regressor from a masked slice to 9 pose parameters.

Main path: one stem convolution, four stages of two 2-convolution
residual blocks (16 convolutions), and one fully connected output
layer: 18 weighted layers in the classic residual-network sense
(1x1 projection shortcuts are not counted). The head emits 9 reals:
translation first, then the 6 rotation parameters.
"""

from __future__ import annotations

import torch
from torch import nn


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        y = self.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return self.relu(y + self.shortcut(x))


class PoseNet(nn.Module):
    def __init__(self, width: int = 64, in_channels: int = 3, out_dim: int = 9):
        super().__init__()
        self.out_dim = out_dim
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
        )
        stages = []
        ch = width
        for s, mult in enumerate((1, 2, 4, 8)):
            out_ch = width * mult
            stages.append(ResidualBlock(ch, out_ch, stride=1 if s == 0 else 2))
            stages.append(ResidualBlock(out_ch, out_ch))
            ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(ch, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.stages(self.stem(x))
        return self.head(y.mean(dim=(2, 3)))

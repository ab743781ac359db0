"""Encoder-decoder segmentation network with a classification head.

A 5-level convolutional encoder feeds a skip-connected decoder that
emits per-pixel mask logits at input resolution, plus a brain /
not-brain head (global average pool over the bottleneck, one fully
connected layer, sigmoid at prediction time). Any encoder exposing
`widths` and returning one feature map per level can be substituted.
"""

from __future__ import annotations

from typing import Optional

import torch
from torch import nn


class DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class SmallEncoder(nn.Module):
    """Plain downsampling encoder; level k halves resolution k times."""

    def __init__(self, in_channels: int, widths: tuple[int, ...]):
        super().__init__()
        self.widths = tuple(widths)
        self.levels = nn.ModuleList()
        prev = in_channels
        for w in self.widths:
            self.levels.append(DoubleConv(prev, w))
            prev = w
        self.pool = nn.MaxPool2d(2)

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for k, level in enumerate(self.levels):
            if k > 0:
                x = self.pool(x)
            x = level(x)
            feats.append(x)
        return feats


class SegNet(nn.Module):
    def __init__(
        self,
        widths: tuple[int, ...] = (12, 24, 48, 96, 192),
        in_channels: int = 3,
        encoder: Optional[nn.Module] = None,
    ):
        super().__init__()
        self.encoder = encoder if encoder is not None else SmallEncoder(in_channels, widths)
        widths = tuple(self.encoder.widths)
        self.widths = widths
        ups, decs = [], []
        for k in range(len(widths) - 1, 0, -1):
            ups.append(nn.ConvTranspose2d(widths[k], widths[k - 1], 2, stride=2))
            decs.append(DoubleConv(widths[k - 1] * 2, widths[k - 1]))
        self.ups = nn.ModuleList(ups)
        self.decoders = nn.ModuleList(decs)
        self.mask_head = nn.Conv2d(widths[0], 1, 1)
        self.class_head = nn.Linear(widths[-1], 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Mask logits (B, 1, H, W) at input resolution and class logits (B,)."""
        feats = self.encoder(x)
        y = feats[-1]
        class_logits = self.class_head(y.mean(dim=(2, 3))).squeeze(-1)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(feats[:-1])):
            y = up(y)
            y = dec(torch.cat([y, skip], dim=1))
        return self.mask_head(y), class_logits

    @torch.no_grad()
    def predict_mask_probs(self, x: torch.Tensor) -> torch.Tensor:
        mask_logits, _ = self.forward(x)
        return torch.sigmoid(mask_logits)

    @torch.no_grad()
    def predict_brain_prob(self, x: torch.Tensor) -> torch.Tensor:
        _, class_logits = self.forward(x)
        return torch.sigmoid(class_logits)

"""Disentangled feature encoding: transmitter embedding, Tx-Prompts, building encoder."""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn

from .core import TransmitterSpec


def group_count(channels: int) -> int:
    g = min(8, channels)
    if channels % g:
        raise ValueError(f"group count {g} does not divide {channels} channels")
    return g


class ConvG(nn.Module):
    """Conv -> GN -> ReLU -> Conv -> GN -> ReLU, 3x3 same-padded convolutions."""

    def __init__(self, in_channels: int, out_channels: int, groups: int | None = None):
        super().__init__()
        g = groups if groups is not None else group_count(out_channels)
        if out_channels % g:
            raise ValueError(f"group count {g} does not divide {out_channels} channels")
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.gn1 = nn.GroupNorm(g, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.gn2 = nn.GroupNorm(g, out_channels)
        self.act = nn.ReLU()

    def forward(self, x):
        x = self.act(self.gn1(self.conv1(x)))
        return self.act(self.gn2(self.conv2(x)))


class TransmitterEmbedding(nn.Module):
    """Lift the single-channel transmitter map to ``embed_dim`` channels.

    Conv -> ReLU -> BN -> Conv; two 3x3 convolutions give each output pixel a
    5x5 receptive field on the input map.
    """

    def __init__(self, embed_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(1, embed_dim, 3, padding=1)
        self.act = nn.ReLU()
        self.bn = nn.BatchNorm2d(embed_dim)
        self.conv2 = nn.Conv2d(embed_dim, embed_dim, 3, padding=1)

    def forward(self, s):
        return self.conv2(self.bn(self.act(self.conv1(s))))


class BuildingEncoder(nn.Module):
    """ConvG branch plus a 1x1 projection of the raw map on the residual path."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.convg = ConvG(1, embed_dim)
        self.proj = nn.Conv2d(1, embed_dim, 1)

    def forward(self, b):
        return self.convg(b) + self.proj(b)


def gather_prompts(s_feat: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Batched prompt lookup.

    s_feat: (B, E, H, W); positions: (B, n, 2) integer (row, col).
    Returns (B, n, E) with row k equal to ``s_feat[b, :, i_k, j_k]``.
    """
    B, E, H, W = s_feat.shape
    positions = positions.long()
    i, j = positions[..., 0], positions[..., 1]
    if bool(((i < 0) | (i >= H) | (j < 0) | (j >= W)).any()):
        bad = positions[(i < 0) | (i >= H) | (j < 0) | (j >= W)][0].tolist()
        raise IndexError(f"prompt position {tuple(bad)} outside a {H}x{W} feature map")
    flat = s_feat.flatten(2)  # (B, E, HW)
    idx = (i * W + j).unsqueeze(1).expand(B, E, positions.shape[1])
    return torch.gather(flat, 2, idx).transpose(1, 2)


def extract_prompts(s_feat: torch.Tensor, specs: Sequence[TransmitterSpec]) -> torch.Tensor:
    """Unbatched form: (E, H, W) features and a transmitter list -> (n, E)."""
    pos = torch.tensor([[s.i, s.j] for s in specs], dtype=torch.long).reshape(1, -1, 2)
    return gather_prompts(s_feat.unsqueeze(0), pos)[0]

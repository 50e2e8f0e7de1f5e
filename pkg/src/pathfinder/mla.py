"""Mask-guided low-rank cross-attention between map tokens and Tx-Prompts."""
from __future__ import annotations

from typing import Optional

import torch
import torch.nn as nn
from einops import rearrange

from .dfe import ConvG


def fuse_inputs(b_feat: torch.Tensor, s_feat: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Z = (M*B' + (1-M)*B') + S'.

    The building/receiver partition of B' is written out even though it sums
    back to B', so the masked form stays visible.
    """
    if b_feat.shape != s_feat.shape:
        raise ValueError(f"feature shapes differ: {tuple(b_feat.shape)} vs {tuple(s_feat.shape)}")
    if mask.shape[-2:] != b_feat.shape[-2:]:
        raise ValueError(f"mask {tuple(mask.shape)} does not cover features {tuple(b_feat.shape)}")
    m = mask.to(b_feat.dtype)
    return (m * b_feat + (1 - m) * b_feat) + s_feat


def masked_softmax(scores: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis with ``keep == False`` entries at -inf.

    Rows with nothing kept come out as exact zeros instead of NaN.
    """
    keep = keep.expand_as(scores)
    dead = ~keep.any(dim=-1, keepdim=True)
    scores = scores.masked_fill(~keep, float("-inf")).masked_fill(dead, 0.0)
    return torch.softmax(scores, dim=-1).masked_fill(dead, 0.0)


class LowRank(nn.Module):
    """BN then 1x1 conv, D -> E channels with E < D."""

    def __init__(self, in_channels: int, embed_dim: int):
        super().__init__()
        if embed_dim >= in_channels:
            raise ValueError(f"low-rank width E={embed_dim} must be smaller than D={in_channels}")
        self.bn = nn.BatchNorm2d(in_channels)
        self.conv = nn.Conv2d(in_channels, embed_dim, 1)

    def forward(self, x):
        return self.conv(self.bn(x))


class MaskedCrossAttention(nn.Module):
    """Dual cross-attention of building / receiver tokens against prompt tokens."""

    def __init__(self, embed_dim: int, out_channels: int, heads: int = 4):
        super().__init__()
        if embed_dim % heads:
            raise ValueError(f"embed_dim {embed_dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = (embed_dim // heads) ** -0.5
        self.ln_tokens = nn.LayerNorm(embed_dim)
        self.ln_prompts = nn.LayerNorm(embed_dim)
        self.q_building = nn.Linear(embed_dim, embed_dim)
        self.q_receiver = nn.Linear(embed_dim, embed_dim)
        self.k_prompt = nn.Linear(embed_dim, embed_dim)
        self.v_prompt = nn.Linear(embed_dim, embed_dim)
        self.w_out = nn.Linear(embed_dim, embed_dim)
        self.restore = nn.Conv2d(embed_dim, out_channels, 1)

    def tokenize(self, x_lr: torch.Tensor, prompts: torch.Tensor):
        """(B, E, H, W) map and (B, n, E) prompts -> building, receiver, prompt tokens."""
        tokens = self.ln_tokens(rearrange(x_lr, "b e h w -> b (h w) e"))
        # building and receiver tokens share one formula; the masks tell them apart
        return tokens, tokens, self.ln_prompts(prompts)

    def attend(
        self,
        b_tok: torch.Tensor,
        r_tok: torch.Tensor,
        p_tok: torch.Tensor,
        mask: torch.Tensor,
        prompt_valid: Optional[torch.Tensor] = None,
    ):
        """Return the two branch outputs (O1, O2), each (B, HW, E).

        ``mask`` is the flattened building mask, shape (B, HW); O1 only keeps
        rows with mask 1 and O2 only rows with mask 0.
        """
        B, L, _ = b_tok.shape
        n = p_tok.shape[1]
        if n == 0:
            raise ValueError("no prompts")
        if mask.shape != (B, L):
            raise ValueError(f"mask has shape {tuple(mask.shape)}, expected {(B, L)}")
        if prompt_valid is None:
            prompt_valid = torch.ones(B, n, dtype=torch.bool, device=p_tok.device)
        split = lambda t: rearrange(t, "b l (h d) -> b h l d", h=self.heads)  # noqa: E731
        k = split(self.k_prompt(p_tok))
        v = split(self.v_prompt(p_tok))
        in_building = (mask > 0.5)[:, None, :, None]
        key_ok = prompt_valid[:, None, None, :]

        outs = []
        for q_proj, tok, rows in ((self.q_building, b_tok, in_building), (self.q_receiver, r_tok, ~in_building)):
            q = split(q_proj(tok))
            scores = torch.einsum("bhld,bhnd->bhln", q, k) * self.scale
            attn = masked_softmax(scores, rows & key_ok)
            outs.append(rearrange(attn @ v, "b h l d -> b l (h d)"))
        return outs[0], outs[1]

    def aggregate(self, o1: torch.Tensor, o2: torch.Tensor, H: int, W: int) -> torch.Tensor:
        o = self.w_out((o1 + o2) / 2)
        return self.restore(rearrange(o, "b (h w) e -> b e h w", h=H, w=W))

    def forward(self, x_lr, prompts, mask, prompt_valid=None):
        H, W = x_lr.shape[-2:]
        b_tok, r_tok, p_tok = self.tokenize(x_lr, prompts)
        o1, o2 = self.attend(b_tok, r_tok, p_tok, mask.flatten(1), prompt_valid)
        return self.aggregate(o1, o2, H, W)


class MLABlock(nn.Module):
    """Two ConvG layers followed by the mask-guided attention layer.

    Output is ``X1 + O`` where ``X1`` is the ConvG output and ``O`` the
    attention output restored to the block width.
    """

    def __init__(self, in_channels: int, out_channels: int, embed_dim: int, heads: int = 4):
        super().__init__()
        self.pre = nn.Sequential(ConvG(in_channels, out_channels), ConvG(out_channels, out_channels))
        self.low_rank = LowRank(out_channels, embed_dim)
        self.attn = MaskedCrossAttention(embed_dim, out_channels, heads)

    def forward(self, x, prompts, mask, prompt_valid=None):
        x1 = self.pre(x)
        return x1 + self.attn(self.low_rank(x1), prompts, mask, prompt_valid)

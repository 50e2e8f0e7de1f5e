"""UNet assembly: MLA encoder, ConvG bottleneck, MLA decoder with skips, head."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .core import PathLossMap, Sample
from .dfe import BuildingEncoder, ConvG, TransmitterEmbedding, gather_prompts
from .mla import MLABlock, fuse_inputs


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class NetworkConfig:
    depth: int = 4
    base_width: int = 64
    embed_dim: int = 32
    heads: int = 4
    head: str = "sigmoid"

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**j for j in range(self.depth)]

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if self.embed_dim >= self.base_width:
            raise ValueError(f"embed_dim {self.embed_dim} must be smaller than base_width {self.base_width}")
        if self.head != "sigmoid":
            raise ValueError(f"unknown head type {self.head!r}")

    def check_input(self, H: int, W: int) -> None:
        f = 2 ** (self.depth - 1)
        if H % f or W % f:
            raise ValueError(f"input {H}x{W} not divisible by 2**(depth-1) = {f}")

    def schedule(self, H: int = 64, W: int = 64) -> list[dict]:
        """Per-stage table of resolutions and channel widths."""
        self.check_input(H, W)
        w, E, L = self.widths, self.embed_dim, self.depth
        rows = []
        for j in range(L):
            s = 2**j
            rows.append({"stage": f"enc{j + 1}", "size": (H // s, W // s),
                         "in": E if j == 0 else w[j - 1], "out": w[j]})
        s = 2 ** (L - 1)
        rows.append({"stage": "bottleneck", "size": (H // s, W // s), "in": w[-1], "out": w[-1]})
        for j in range(L):
            level = L - 1 - j
            s = 2**level
            rows.append({"stage": f"dec{j + 1}", "size": (H // s, W // s),
                         "in": 2 * w[level], "out": w[level]})
        return rows

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "NetworkConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = raw if kinds[key] == "str" else int(raw)
        return cls(**values)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        return cls.from_text(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


PRESETS = {
    "desk": NetworkConfig(depth=4, base_width=64, embed_dim=32, heads=4),
    "small": NetworkConfig(depth=3, base_width=16, embed_dim=8, heads=2),
    "tiny": NetworkConfig(depth=2, base_width=16, embed_dim=8, heads=2),
}


def preset(name: str) -> NetworkConfig:
    try:
        return NetworkConfig(**asdict(PRESETS[name]))
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


class UpSample(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def forward(self, x):
        return self.conv(self.up(x))


def downsample_mask(mask: torch.Tensor, level: int) -> torch.Tensor:
    s = 2**level
    return mask[..., ::s, ::s]


class PathFinder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        E, h, w, L = cfg.embed_dim, cfg.heads, cfg.widths, cfg.depth
        self.tx_embed = TransmitterEmbedding(E)
        self.building = BuildingEncoder(E)
        self.encoder = nn.ModuleList(
            MLABlock(E if j == 0 else w[j - 1], w[j], E, h) for j in range(L)
        )
        self.down = nn.ModuleList(nn.Conv2d(w[j], w[j], 3, stride=2, padding=1) for j in range(L - 1))
        self.bottleneck = nn.Sequential(ConvG(w[-1], w[-1]), ConvG(w[-1], w[-1]))
        # decoder block j works at encoder level L-1-j; every block after the
        # first is preceded by an upsample that halves the width
        self.up = nn.ModuleList(UpSample(w[L - j], w[L - 1 - j]) for j in range(1, L))
        self.decoder = nn.ModuleList(MLABlock(2 * w[L - 1 - j], w[L - 1 - j], E, h) for j in range(L))
        self.head = nn.Conv2d(w[0], 1, 1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="linear")
                nn.init.zeros_(m.bias)

    def encode_inputs(self, env, tx_map, tx_pos):
        s_feat = self.tx_embed(tx_map)
        return self.building(env), s_feat, gather_prompts(s_feat, tx_pos)

    def forward(self, env, tx_map, tx_pos, tx_valid=None, return_layers: bool = False):
        """env, tx_map: (B, 1, H, W); tx_pos: (B, n, 2); tx_valid: (B, n) bool."""
        self.cfg.check_input(*env.shape[-2:])
        if tx_pos.shape[1] == 0:
            raise ValueError("no transmitters")
        mask = (env > 0).to(env.dtype)
        b_feat, s_feat, prompts = self.encode_inputs(env, tx_map, tx_pos)
        x = fuse_inputs(b_feat, s_feat, mask)

        enc = []
        for j, block in enumerate(self.encoder):
            x = block(x, prompts, downsample_mask(mask, j), tx_valid)
            enc.append(x)
            if j < len(self.down):
                x = self.down[j](x)
        bottleneck = self.bottleneck(enc[-1])

        x = bottleneck
        dec = []
        L = self.cfg.depth
        for j, block in enumerate(self.decoder):
            level = L - 1 - j
            if j > 0:
                x = self.up[j - 1](x)
            skip = enc[level]
            if x.shape[-2:] != skip.shape[-2:]:
                raise ValueError(f"decoder layer {j + 1}: {tuple(x.shape)} cannot join skip {tuple(skip.shape)}")
            x = block(torch.cat([x, skip], dim=1), prompts, downsample_mask(mask, level), tx_valid)
            dec.append(x)
        y = torch.sigmoid(self.head(x))
        if return_layers:
            return y, {"encoder": enc, "bottleneck": bottleneck, "decoder": dec}
        return y


def collate(samples: Sequence[Sample], dtype=torch.float32, with_target: bool = True) -> dict:
    """Stack samples into network tensors, padding transmitter lists."""
    if not samples:
        raise ValueError("empty batch")
    n_max = max(len(s.transmitters) for s in samples)
    if n_max == 0:
        raise ValueError("no transmitters")
    B = len(samples)
    pos = np.zeros((B, n_max, 2), dtype=np.int64)
    valid = np.zeros((B, n_max), dtype=bool)
    for b, s in enumerate(samples):
        if not s.transmitters:
            raise ValueError(f"sample {s.sample_id or b} has no transmitters")
        for k, tx in enumerate(s.transmitters):
            pos[b, k] = (tx.i, tx.j)
            valid[b, k] = True
    out = {
        "env": torch.as_tensor(np.stack([s.env.heights for s in samples])[:, None], dtype=dtype),
        "tx_map": torch.as_tensor(np.stack([s.tx_map.values for s in samples])[:, None], dtype=dtype),
        "tx_pos": torch.from_numpy(pos),
        "tx_valid": torch.from_numpy(valid),
    }
    if with_target and all(s.target is not None for s in samples):
        out["target"] = torch.as_tensor(np.stack([s.target.values for s in samples])[:, None], dtype=dtype)
    return out


def forward_batch(model: PathFinder, batch: dict) -> torch.Tensor:
    return model(batch["env"], batch["tx_map"], batch["tx_pos"], batch["tx_valid"])


@torch.no_grad()
def predict_many(model: PathFinder, samples: Sequence[Sample], batch_size: int = 16) -> list[np.ndarray]:
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            y = forward_batch(model, collate(chunk, dtype=dtype, with_target=False))
            if not torch.isfinite(y).all():
                raise NonFiniteError("non-finite prediction")
            out.extend(y[:, 0].double().numpy())
    finally:
        model.train(was_training)
    return out


def predict(model: PathFinder, sample: Sample) -> PathLossMap:
    return PathLossMap(predict_many(model, [sample])[0])


def build_model(cfg: NetworkConfig, seed: Optional[int] = None) -> PathFinder:
    if seed is not None:
        torch.manual_seed(seed)
    return PathFinder(cfg)

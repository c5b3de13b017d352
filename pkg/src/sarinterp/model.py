"""Spatial pose encoder -> masked temporal decoder -> spatial pose decoder."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import Tensor, nn

from . import nn as snn
from .errors import FormatError, InvalidInputError


@dataclass(frozen=True)
class ModelConfig:
    J: int
    N: int
    D: int = 8
    spatial_blocks: int = 2
    spatial_heads: int = 2
    temporal_blocks: int = 2
    temporal_heads: int = 4
    ff_multiplier: int = 4

    def __post_init__(self):
        for name in ("J", "N", "D", "spatial_heads", "temporal_heads", "ff_multiplier"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.D % self.spatial_heads:
            raise InvalidInputError(f"D={self.D} not divisible by {self.spatial_heads} spatial heads")
        if (self.J * self.D) % self.temporal_heads:
            raise InvalidInputError(
                f"J*D={self.J * self.D} not divisible by {self.temporal_heads} temporal heads")
        if (self.J * self.D) % 2:
            raise InvalidInputError("J*D must be even for the sinusoidal encoding")

    @property
    def width(self) -> int:
        return self.J * self.D

    @classmethod
    def large_scale(cls, N: int = 31) -> "ModelConfig":
        return cls(J=52, N=N, D=24, spatial_blocks=4, spatial_heads=12,
                   temporal_blocks=6, temporal_heads=8)

    def parameter_count(self) -> int:
        f = self.ff_multiplier

        def block(d):
            # two layer norms, q/v/out with bias, k without, two-layer feed-forward
            return (4 + 2 * f) * d * d + (8 + f) * d

        D, W, J = self.D, self.width, self.J
        return (4 * D + 2 * J * D + self.spatial_blocks * block(D) + 2 * D
                + self.temporal_blocks * block(W) + 2 * W
                + W * f * W + f * W + f * W * 3 * J + 3 * J)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        try:
            return cls(**obj)
        except TypeError as e:
            raise FormatError(f"bad model config: {e}") from None


class SARModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        c = config
        gen = torch.Generator().manual_seed(seed)
        self.in_proj = snn.Linear(3, c.D, gen)
        bound = 1.0 / math.sqrt(c.D)
        self.joint_embed = snn._uniform(gen, (c.J, c.D), bound)
        self.empty_embed = snn._uniform(gen, (c.J, c.D), bound)
        self.spatial = nn.ModuleList(
            snn.Block(c.D, c.spatial_heads, c.ff_multiplier, gen) for _ in range(c.spatial_blocks))
        self.spatial_ln = snn.LayerNorm(c.D)
        self.temporal = nn.ModuleList(
            snn.Block(c.width, c.temporal_heads, c.ff_multiplier, gen) for _ in range(c.temporal_blocks))
        self.ln_f = snn.LayerNorm(c.width)
        self.dec1 = snn.Linear(c.width, c.ff_multiplier * c.width, gen)
        self.dec2 = snn.Linear(c.ff_multiplier * c.width, 3 * c.J, gen)
        self.register_buffer("pos_enc", snn.sinusoidal_position_encoding(c.N, c.width), persistent=False)

    def encode_poses(self, P: Tensor, empty: Tensor | None = None, add_position: bool = True) -> Tensor:
        """``P`` (..., N, J, 3) -> embeddings (..., N, J*D); frames are encoded independently."""
        c = self.config
        P = torch.as_tensor(P, dtype=snn.DTYPE)
        if P.shape[-3:] != (c.N, c.J, 3):
            raise InvalidInputError(f"expected poses (..., {c.N}, {c.J}, 3), got {tuple(P.shape)}")
        x = self.in_proj(P) + self.joint_embed
        if empty is not None:
            flag = torch.as_tensor(empty, dtype=snn.DTYPE)[..., None, None]
            x = x + flag * self.empty_embed
        for block in self.spatial:
            x = block(x)
        x = self.spatial_ln(x).reshape(*P.shape[:-2], c.width)
        return x + self.pos_enc if add_position else x

    def temporal_decode(self, E: Tensor, mask) -> Tensor:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        for block in self.temporal:
            E = block(E, mask)
        return self.ln_f(E)

    def decode_poses(self, E: Tensor) -> Tensor:
        h = torch.nn.functional.gelu(self.dec1(E))
        return self.dec2(h).reshape(*E.shape[:-1], self.config.J, 3)

    def forward(self, P: Tensor, mask, empty: Tensor | None = None) -> Tensor:
        return self.decode_poses(self.temporal_decode(self.encode_poses(P, empty), mask))


def save_model(model: SARModel, path, store: snn.ParamStore | None = None) -> None:
    """Write ``<path>`` (SARM binary) and ``<path>.json`` (model config)."""
    path = Path(path)
    if store is None:
        store = snn.ParamStore(model)
    snn.save_store(store, path)
    Path(str(path) + ".json").write_text(json.dumps(model.config.to_json(), indent=1))


def load_model(path, store: bool = False):
    path = Path(path)
    cfg_path = Path(str(path) + ".json")
    try:
        config = ModelConfig.from_json(json.loads(cfg_path.read_text()))
    except FileNotFoundError:
        raise FileNotFoundError(f"model config not found: {cfg_path}") from None
    model = SARModel(config)
    ps = snn.load_store(snn.ParamStore(model), path)
    return (model, ps) if store else model

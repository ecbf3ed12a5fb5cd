"""Low-rank adaptation of attention projections.

attach_lora wraps the eight attention projections (Q/K/V/output, both
modalities) of the chosen blocks. Each wrapper adds (alpha/rank) * up(down(x))
to the frozen base projection; up starts at zero, so attaching is exactly a
no-op until training moves the new weights. Projections carry no bias terms
in the low-rank path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import torch
from torch import nn

from .model import ATTENTION_PROJECTIONS, MMDiT


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


class LoraLinear(nn.Module):
    """A frozen Linear plus a trainable rank-r bypass."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        if rank > min(base.in_features, base.out_features):
            raise ValueError(
                f"rank {rank} exceeds projection size "
                f"{base.out_features}x{base.in_features}"
            )
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        self.down = nn.Parameter(torch.empty(rank, base.in_features))
        self.up = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.down, a=5**0.5)
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        return out + self.scaling * ((x @ self.down.t()) @ self.up.t())

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features


def attach_lora(model: MMDiT, layers: list[int], cfg: LoraConfig | None = None) -> list[str]:
    """Wrap the attention projections of the given blocks; returns the wrapped
    module paths. Attaching twice, or to an out-of-range layer, raises."""
    cfg = cfg or LoraConfig()
    wrapped = []
    for layer in sorted(set(layers)):
        if not 0 <= layer < model.cfg.depth:
            raise ValueError(f"layer {layer} outside [0, {model.cfg.depth})")
        if layer in model.lora_layers:
            raise ValueError(f"layer {layer} already carries adapters")
        block = model.blocks[layer]
        for name in ATTENTION_PROJECTIONS:
            proj = getattr(block, name)
            if isinstance(proj, LoraLinear):
                raise ValueError(f"blocks.{layer}.{name} already wrapped")
            setattr(block, name, LoraLinear(proj, cfg.rank, cfg.alpha))
            wrapped.append(f"blocks.{layer}.{name}")
        model.lora_layers.add(layer)
    return wrapped


def lora_named_parameters(model: nn.Module) -> Iterator[tuple[str, nn.Parameter]]:
    """The low-rank parameters only, under their wrapper paths."""
    for name, param in model.named_parameters():
        if name.endswith(".down") or name.endswith(".up"):
            yield name, param


def base_named_parameters(model: nn.Module) -> Iterator[tuple[str, nn.Parameter]]:
    """Backbone parameters with wrapper-introduced ".base" segments stripped,
    so names (and any hash over them) are stable across attach_lora."""
    for name, param in model.named_parameters():
        if name.endswith(".down") or name.endswith(".up"):
            continue
        yield name.replace(".base.", "."), param


def count_parameters(named) -> int:
    return sum(p.numel() for _, p in named)

"""Mask conditioning adapter.

Turns a zero-centered latent-grid mask into an additive residual for the
transformer's latent input: two 3D conv stages with a smooth nonlinearity,
then a per-position linear projection up to the latent channel count. The
projection is zero-initialized, so a fresh adapter emits exactly zero and
attaching it cannot change the base model's behavior.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

_ACTIVATIONS = {"silu": nn.SiLU, "relu": nn.ReLU, "gelu": nn.GELU}


@dataclass
class AdapterConfig:
    hidden: int = 32
    kernel: int = 3
    activation: str = "silu"
    # Multiplier on the default conv weight scale. The conditioning budget is
    # a few hundred optimizer steps, so the hidden features start loud enough
    # for the zero-init projection to pick them up quickly.
    init_gain: float = 1.0

    def __post_init__(self) -> None:
        if self.hidden < 1:
            raise ValueError(f"hidden must be >= 1, got {self.hidden}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(
                f"activation {self.activation!r} not one of {sorted(_ACTIVATIONS)}"
            )
        if self.init_gain <= 0:
            raise ValueError(f"init_gain must be positive, got {self.init_gain}")


class MaskAdapter(nn.Module):
    """Latent mask (B, 1, T', H', W') -> residual (B, C, T', H', W')."""

    def __init__(self, latent_channels: int, cfg: AdapterConfig | None = None):
        super().__init__()
        cfg = cfg or AdapterConfig()
        self.cfg = cfg
        act = _ACTIVATIONS[cfg.activation]
        pad = cfg.kernel // 2
        self.conv1 = nn.Conv3d(1, cfg.hidden, cfg.kernel, padding=pad)
        self.conv2 = nn.Conv3d(cfg.hidden, cfg.hidden, cfg.kernel, padding=pad)
        self.act = act()
        self.proj = nn.Conv3d(cfg.hidden, latent_channels, 1)
        with torch.no_grad():
            self.conv1.weight.mul_(cfg.init_gain)
            self.conv2.weight.mul_(cfg.init_gain)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        if mask.ndim != 5 or mask.shape[1] != 1:
            raise ValueError(
                f"adapter input must be (B, 1, T', H', W'), got {tuple(mask.shape)}"
            )
        h = self.act(self.conv1(mask))
        h = self.act(self.conv2(h))
        return self.proj(h)


def inject(latent: torch.Tensor, residual: torch.Tensor, weight: float) -> torch.Tensor:
    """latent + weight * residual, with the zero-weight case exact by construction."""
    if latent.shape != residual.shape:
        raise ValueError(
            f"latent shape {tuple(latent.shape)} != residual shape {tuple(residual.shape)}"
        )
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"injection weight must lie in [0, 1], got {weight}")
    if weight == 0.0:
        return latent
    return latent + weight * residual

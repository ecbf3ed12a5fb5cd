"""Rectified flow matching: training objective and Euler sampler.

The forward process interpolates linearly between data (t=0) and noise (t=1);
the model regresses the constant velocity x0 - eps. Sampling runs tau uniform
Euler steps from pure noise down to t=0, feeding the model t = 1 - s/tau at
step s. Mask conditioning enters as an additive latent residual whose
strength follows a cosine schedule over the steps: full at the start, zero by
the last step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .model import AttentionRecord, MMDiT


class SamplingError(RuntimeError):
    """Raised when the sampler produces a non-finite state."""


@dataclass
class FlowBatch:
    """One training batch: clean latents with their conditioning."""

    x0: torch.Tensor  # (B, C, T', H', W')
    eps: torch.Tensor  # same shape, unit Gaussian
    t: torch.Tensor  # (B,), uniform in [0, 1]
    text: torch.Tensor  # (B, text_len) token ids
    first_frame: torch.Tensor  # (B, C, 1, H', W')

    def __post_init__(self) -> None:
        if self.eps.shape != self.x0.shape:
            raise ValueError(f"eps shape {tuple(self.eps.shape)} != x0 {tuple(self.x0.shape)}")
        if self.t.shape != (self.x0.shape[0],):
            raise ValueError(f"t must be (B,), got {tuple(self.t.shape)}")
        if torch.any(self.t < 0) or torch.any(self.t > 1):
            raise ValueError("t values must lie in [0, 1]")


def interp(x0: torch.Tensor, eps: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """x_t = (1 - t) * x0 + t * eps, t broadcast per sample."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    tb = t.reshape(-1, *([1] * (x0.ndim - 1)))
    return torch.lerp(x0, eps, tb)


def fm_loss(
    model: MMDiT,
    batch: FlowBatch,
    delta_z: torch.Tensor | None = None,
    weight: torch.Tensor | float = 1.0,
) -> torch.Tensor:
    """MSE between predicted velocity and x0 - eps.

    delta_z, when given, is added to the interpolated latent before the model
    sees it, scaled by `weight` (scalar or per-sample)."""
    x_t = interp(batch.x0, batch.eps, batch.t)
    if delta_z is not None:
        if delta_z.shape != x_t.shape:
            raise ValueError(
                f"delta_z shape {tuple(delta_z.shape)} != latent {tuple(x_t.shape)}"
            )
        w = weight
        if isinstance(w, torch.Tensor):
            w = w.reshape(-1, *([1] * (x_t.ndim - 1)))
        x_t = x_t + w * delta_z
    velocity, _ = model(x_t, batch.first_frame, batch.text, batch.t)
    return F.mse_loss(velocity, batch.x0 - batch.eps)


def cosine_weight(step: int, steps: int) -> float:
    """Injection weight at `step` of a `steps`-step run: 1 at the first step,
    0 at the last, half a cosine in between."""
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    if not 0 <= step < steps:
        raise ValueError(f"step {step} outside [0, {steps})")
    return 0.5 * (1.0 + math.cos(math.pi * step / (steps - 1)))


def schedule_weights(steps: int, mode: str = "cosine") -> np.ndarray:
    """Per-step injection weights. Modes: cosine (default), constant (all 1),
    off (all 0)."""
    if mode == "cosine":
        return np.array([cosine_weight(s, steps) for s in range(steps)])
    if mode == "constant":
        return np.ones(steps)
    if mode == "off":
        return np.zeros(steps)
    raise ValueError(f"unknown schedule mode {mode!r}")


def train_weight_for_t(t: torch.Tensor, mode: str) -> torch.Tensor | float:
    """Training-time injection weight for sampled times t.

    constant: w = 1 everywhere (schedule applied only at sampling).
    cosine: w = (1 + cos(pi * (1 - t))) / 2, the sampling schedule read at the
    model time t, so training and cosine-scheduled sampling see matching
    strengths."""
    if mode == "constant":
        return 1.0
    if mode == "cosine":
        return 0.5 * (1.0 + torch.cos(math.pi * (1.0 - t)))
    raise ValueError(f"unknown train injection mode {mode!r}")


@torch.no_grad()
def sample(
    model: MMDiT,
    noise: torch.Tensor,
    text: torch.Tensor,
    first_frame: torch.Tensor,
    steps: int = 20,
    delta_z: torch.Tensor | None = None,
    weights: np.ndarray | None = None,
    skip_layers: tuple[int, ...] = (),
    record: AttentionRecord | None = None,
) -> torch.Tensor:
    """Euler integration from noise to a clean latent.

    Step s evaluates the model at t = 1 - s/steps and advances by velocity /
    steps. When delta_z is given it is scaled by weights[s] (cosine schedule
    unless weights override it) and added to the state fed to the model; the
    integration state itself is never modified. A zero weight skips the add
    entirely, so conditioning with all-zero weights is bit-identical to no
    conditioning. Pass an AttentionRecord to capture attention at every layer
    and step (batch size must be 1)."""
    if steps < 2:
        raise ValueError(f"steps must be >= 2, got {steps}")
    if delta_z is not None:
        if delta_z.shape != noise.shape:
            raise ValueError(
                f"delta_z shape {tuple(delta_z.shape)} != noise {tuple(noise.shape)}"
            )
        if weights is None:
            weights = schedule_weights(steps)
        if len(weights) != steps:
            raise ValueError(f"got {len(weights)} weights for {steps} steps")
    if record is not None and noise.shape[0] != 1:
        raise ValueError("attention recording requires batch size 1")

    z = noise
    B = noise.shape[0]
    for s in range(steps):
        t = torch.full((B,), 1.0 - s / steps, dtype=noise.dtype, device=noise.device)
        z_in = z
        if delta_z is not None and weights[s] != 0.0:
            z_in = z + float(weights[s]) * delta_z
        velocity, rec = model(
            z_in, first_frame, text, t, skip_layers=skip_layers, record=record is not None
        )
        if record is not None:
            for layer, entry in rec.items():
                record.add(
                    layer,
                    s,
                    entry["t2v"][0].float().cpu().numpy(),
                    entry["v2t"][0].float().cpu().numpy(),
                )
        z = z + velocity / steps
        if not torch.isfinite(z).all():
            raise SamplingError(f"non-finite latent state after step {s} (t={1.0 - s / steps:.3f})")
    return z

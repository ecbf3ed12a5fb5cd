"""Scene -> tensor assembly shared by training, analysis and sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .codec import LatentCodec, TEMPORAL_WINDOW
from .data import Sample


@dataclass
class SceneTensors:
    """Everything the model needs about one scene, as torch tensors
    (unbatched; stack along a new leading axis to batch)."""

    x0: torch.Tensor  # (C, T', H', W') clean latent
    first_frame: torch.Tensor  # (C, 1, H', W') conditioning latent
    text: torch.Tensor  # (text_len,) token ids
    mask_raw: np.ndarray  # (1, T', H', W') {0,1} latent mask
    mask_norm: torch.Tensor  # (1, T', H', W') zero-centered latent mask


def first_frame_latent(video: np.ndarray, codec: LatentCodec) -> torch.Tensor:
    """Latent of the first frame alone: the frame fills one temporal window."""
    window = np.repeat(video[0:1], TEMPORAL_WINDOW, axis=0)
    return torch.from_numpy(codec.encode_video(window))


def encode_scene(sample: Sample, codec: LatentCodec, mask: np.ndarray | None = None) -> SceneTensors:
    """Encode one dataset sample; `mask` overrides the stored control mask."""
    latent_mask = codec.latentize_mask(sample.mask if mask is None else mask)
    return SceneTensors(
        x0=torch.from_numpy(codec.encode_video(sample.video)),
        first_frame=first_frame_latent(sample.video, codec),
        text=torch.tensor(sample.caption_ids, dtype=torch.long),
        mask_raw=latent_mask.raw,
        mask_norm=torch.from_numpy(latent_mask.normalized),
    )


def stack_scenes(scenes: list[SceneTensors]) -> dict[str, torch.Tensor]:
    return {
        "x0": torch.stack([s.x0 for s in scenes]),
        "first_frame": torch.stack([s.first_frame for s in scenes]),
        "text": torch.stack([s.text for s in scenes]),
        "mask_norm": torch.stack([s.mask_norm for s in scenes]),
    }

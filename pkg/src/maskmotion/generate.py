"""One-scene generation and batch evaluation on top of the sampler."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import data, features, flow, metrics
from .adapter import MaskAdapter
from .codec import LatentCodec
from .data import Sample
from .model import MMDiT


@dataclass
class GenerationResult:
    video: np.ndarray  # uint8 (T, H, W, 3)
    latent: np.ndarray  # float32 (C, T', H', W')
    mask_used: np.ndarray | None  # uint8 (T, H, W) {0,1} control mask, if conditioned


def generate(
    model: MMDiT,
    adapter: MaskAdapter | None,
    sample: Sample,
    codec: LatentCodec,
    steps: int = 20,
    schedule: str = "cosine",
    skip_layers: tuple[int, ...] = (),
    seed: int = 0,
    mask: np.ndarray | None = None,
    noise: torch.Tensor | None = None,
) -> GenerationResult:
    """Generate one video for a scene's first frame and caption.

    Conditioning on the control mask (the sample's own unless `mask`
    overrides it) requires an adapter; pass adapter=None for the base model's
    unconditioned behavior."""
    cfg = model.cfg
    scene = features.encode_scene(sample, codec, mask=mask)
    if noise is None:
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn(
            (1, cfg.latent_channels, cfg.latent_t, cfg.latent_h, cfg.latent_w), generator=gen
        )
    delta_z = None
    weights = None
    if adapter is not None:
        with torch.no_grad():
            delta_z = adapter(scene.mask_norm[None])
        weights = flow.schedule_weights(steps, schedule)
    latent = flow.sample(
        model,
        noise,
        scene.text[None],
        scene.first_frame[None],
        steps=steps,
        delta_z=delta_z,
        weights=weights,
        skip_layers=skip_layers,
    )
    latent_np = latent[0].numpy()
    video = codec.decode_video(latent_np)
    mask_used = None
    if adapter is not None:
        mask_used = (sample.mask if mask is None else mask).astype(np.uint8)
    return GenerationResult(video=video, latent=latent_np, mask_used=mask_used)


def save_generation(out_dir: Path, result: GenerationResult, run_info: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data.write_rgb24(out_dir / "video.rgb24", result.video)
    if result.mask_used is not None:
        data.write_gray8(out_dir / "mask_used.gray8", result.mask_used)
    T, H, W, _ = result.video.shape
    data.write_json(out_dir / "run.json", {**run_info, "T": T, "H": H, "W": W})


def score_pair(
    gen_video: np.ndarray,
    ref: Sample,
    control_mask: np.ndarray | None,
    threshold: float,
    tolerance: int,
    ssim_window: int,
) -> dict:
    """All metrics for one generated/reference pair.

    Masks are color-extracted from the generated video with the reference's
    subject color; J/F compare them to the reference's ground-truth masks,
    and the mask-following IoU compares them to the control mask when one is
    given."""
    extracted = metrics.extract_subject_masks(gen_video, ref.subject_color, threshold)
    row = {
        "psnr": metrics.psnr(gen_video, ref.video),
        "ssim": metrics.ssim_video(gen_video, ref.video, window=ssim_window),
        **metrics.jf_video(extracted, ref.mask, tolerance),
    }
    if control_mask is not None:
        row["mask_iou"] = metrics.mask_following_iou(extracted, control_mask)
    return row


def aggregate_scores(rows: list[dict]) -> dict:
    """Mean of every metric; psnr means can be +inf and stay that way."""
    if not rows:
        raise ValueError("no rows to aggregate")
    keys = sorted(rows[0])
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}

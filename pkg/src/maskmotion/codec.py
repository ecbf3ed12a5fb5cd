"""Lossless video <-> latent packing.

Stands in for a learned VAE: non-overlapping space-to-depth over p x p spatial
patches and windows of 4 frames, with uint8 values mapped to [-1, 1]. Every
byte round-trips exactly, so pixel-space metrics measure the model, not the
codec. Masks pack through the same grid via any-pooling.

Latent layout is channel-first (C, T', H', W') with
channel = ((dt * p + dy) * p + dx) * 3 + rgb for in-window frame offset dt and
in-patch offsets (dy, dx).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TEMPORAL_WINDOW = 4


class CodecShapeError(ValueError):
    """Raised when an input's axes do not divide by the packing factors."""


@dataclass(frozen=True)
class LatentMask:
    """Mask on the latent grid.

    raw is {0,1} float32 (1, T', H', W'): 1 where any covered pixel is masked.
    normalized is raw minus its scalar mean, the zero-centered variant fed to
    the conditioning adapter.
    """

    raw: np.ndarray
    normalized: np.ndarray


@dataclass(frozen=True)
class LatentCodec:
    spatial_patch: int = 4

    @property
    def channels(self) -> int:
        return 3 * self.spatial_patch * self.spatial_patch * TEMPORAL_WINDOW

    def latent_shape(self, frames: int, height: int, width: int) -> tuple[int, int, int, int]:
        self._check_dims(frames, height, width)
        p = self.spatial_patch
        return (self.channels, frames // TEMPORAL_WINDOW, height // p, width // p)

    def _check_dims(self, frames: int, height: int, width: int) -> None:
        p = self.spatial_patch
        if frames % TEMPORAL_WINDOW != 0:
            raise CodecShapeError(
                f"frame axis T={frames} is not divisible by the temporal window {TEMPORAL_WINDOW}"
            )
        if height % p != 0:
            raise CodecShapeError(f"height axis H={height} is not divisible by patch size {p}")
        if width % p != 0:
            raise CodecShapeError(f"width axis W={width} is not divisible by patch size {p}")

    def encode_video(self, video: np.ndarray) -> np.ndarray:
        """uint8 (T, H, W, 3) -> float32 (C, T', H', W') in [-1, 1]."""
        if video.ndim != 4 or video.shape[-1] != 3:
            raise CodecShapeError(f"expected (T, H, W, 3) video, got shape {video.shape}")
        if video.dtype != np.uint8:
            raise CodecShapeError(f"expected uint8 video, got {video.dtype}")
        T, H, W, _ = video.shape
        self._check_dims(T, H, W)
        p = self.spatial_patch
        scaled = video.astype(np.float32) / 127.5 - 1.0
        blocks = scaled.reshape(T // TEMPORAL_WINDOW, TEMPORAL_WINDOW, H // p, p, W // p, p, 3)
        # -> (dt, dy, dx, rgb, T', H', W')
        blocks = blocks.transpose(1, 3, 5, 6, 0, 2, 4)
        return np.ascontiguousarray(
            blocks.reshape(self.channels, T // TEMPORAL_WINDOW, H // p, W // p)
        )

    def decode_video(self, latent: np.ndarray) -> np.ndarray:
        """float32 (C, T', H', W') -> uint8 (T, H, W, 3), clamped and rounded."""
        if latent.ndim != 4:
            raise CodecShapeError(f"expected (C, T', H', W') latent, got shape {latent.shape}")
        C, Tl, Hl, Wl = latent.shape
        if C != self.channels:
            raise CodecShapeError(
                f"channel axis C={C} does not match packing "
                f"(3 * {self.spatial_patch}^2 * {TEMPORAL_WINDOW} = {self.channels})"
            )
        p = self.spatial_patch
        blocks = np.asarray(latent, dtype=np.float32).reshape(TEMPORAL_WINDOW, p, p, 3, Tl, Hl, Wl)
        # inverse of the encode transpose: -> (T', dt, H', dy, W', dx, rgb)
        scaled = blocks.transpose(4, 0, 5, 1, 6, 2, 3).reshape(
            Tl * TEMPORAL_WINDOW, Hl * p, Wl * p, 3
        )
        pixels = np.rint((scaled + 1.0) * 127.5)
        return np.clip(pixels, 0.0, 255.0).astype(np.uint8)

    def latentize_mask(self, mask: np.ndarray) -> LatentMask:
        """{0,1} (T, H, W) -> latent-grid mask via any-pooling over each cell."""
        if mask.ndim != 3:
            raise CodecShapeError(f"expected (T, H, W) mask, got shape {mask.shape}")
        vals = np.unique(mask)
        if not np.all(np.isin(vals, (0, 1))):
            raise CodecShapeError(f"mask must be binary with values in {{0, 1}}, got {vals}")
        T, H, W = mask.shape
        self._check_dims(T, H, W)
        p = self.spatial_patch
        cells = mask.astype(bool).reshape(T // TEMPORAL_WINDOW, TEMPORAL_WINDOW, H // p, p, W // p, p)
        raw = cells.any(axis=(1, 3, 5)).astype(np.float32)[None]
        normalized = (raw - raw.mean(dtype=np.float64)).astype(np.float32)
        return LatentMask(raw=raw, normalized=normalized)

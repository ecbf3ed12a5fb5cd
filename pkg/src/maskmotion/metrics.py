"""Mask and reconstruction metrics.

Region similarity J, contour accuracy F (boundary matching within a Chebyshev
tolerance), their J&F mean, PSNR, and a windowed SSIM. All functions take
numpy arrays; masks are binary {0,1} per frame.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; both empty scores 1.0."""
    pred = _as_binary(pred, "pred")
    gt = _as_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    inter = int(np.logical_and(pred, gt).sum())
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return inter / union


def _as_binary(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return mask
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0, 1))):
        raise ValueError(f"{name} must be binary, got values {vals}")
    return mask.astype(bool)


def boundary_map(mask: np.ndarray) -> np.ndarray:
    """Pixels of mask with at least one 4-neighbor outside it.

    Pixels on the array edge count as boundary (the outside continues past the
    frame-like border).
    """
    mask = _as_binary(mask, "mask")
    if mask.ndim != 2:
        raise ValueError(f"boundary_map takes a single (H, W) frame, got {mask.shape}")
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def contour_f(pred: np.ndarray, gt: np.ndarray, tolerance: int = 1) -> float:
    """Boundary F-measure with Chebyshev matching tolerance.

    A boundary pixel matches when some boundary pixel of the other mask lies
    within `tolerance` in Chebyshev distance, i.e. inside the other boundary's
    dilation by a (2*tolerance+1) square. Both boundaries empty scores 1.0,
    exactly one empty scores 0.0.
    """
    if tolerance < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance}")
    pb = boundary_map(pred)
    gb = boundary_map(gt)
    if pb.shape != gb.shape:
        raise ValueError(f"mask shapes differ: {pb.shape} vs {gb.shape}")
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    if tolerance == 0:
        gb_zone, pb_zone = gb, pb
    else:
        footprint = np.ones((2 * tolerance + 1,) * 2, dtype=bool)
        gb_zone = ndimage.binary_dilation(gb, structure=footprint)
        pb_zone = ndimage.binary_dilation(pb, structure=footprint)
    precision = float((pb & gb_zone).sum()) / float(pb.sum())
    recall = float((gb & pb_zone).sum()) / float(gb.sum())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def jf_frame(pred: np.ndarray, gt: np.ndarray, tolerance: int = 1) -> tuple[float, float, float]:
    j = jaccard(pred, gt)
    f = contour_f(pred, gt, tolerance)
    return j, f, 0.5 * (j + f)


def jf_video(pred: np.ndarray, gt: np.ndarray, tolerance: int = 1) -> dict:
    """Frame-averaged J, F and J&F for (T, H, W) mask stacks."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask stacks differ in shape: {pred.shape} vs {gt.shape}")
    js, fs = [], []
    for f in range(pred.shape[0]):
        js.append(jaccard(pred[f], gt[f]))
        fs.append(contour_f(pred[f], gt[f], tolerance))
    j = float(np.mean(js))
    f = float(np.mean(fs))
    return {"J": j, "F": f, "JF": 0.5 * (j + f)}


def extract_subject_masks(video: np.ndarray, subject_color, threshold: float = 75.0) -> np.ndarray:
    """Per-frame mask of pixels within an RGB distance threshold of a color.

    The oracle that turns generated videos back into masks: with the palette's
    pairwise separation, additive noise below threshold/2 cannot flip a pixel.
    Strictly-less comparison, so threshold 0 selects nothing.
    """
    video = np.asarray(video)
    if video.ndim != 4 or video.shape[-1] != 3:
        raise ValueError(f"expected (T, H, W, 3) video, got {video.shape}")
    color = np.asarray(subject_color, dtype=np.float32)
    if color.shape != (3,):
        raise ValueError(f"subject_color must be 3 RGB values, got {subject_color!r}")
    diff = video.astype(np.float32) - color
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return (dist < threshold).astype(np.uint8)


def mask_following_iou(extracted: np.ndarray, control: np.ndarray) -> float:
    """Mean per-frame IoU between extracted subject masks and the control mask."""
    if extracted.shape != control.shape:
        raise ValueError(f"mask stacks differ in shape: {extracted.shape} vs {control.shape}")
    return float(np.mean([jaccard(extracted[f], control[f]) for f in range(extracted.shape[0])]))


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(data_range * data_range / mse)


def ssim_frame(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 255.0,
) -> float:
    """Mean local SSIM over one frame, uniform window, channel-averaged.

    Local means/variances come from a window x window uniform filter with
    reflect padding; variances are biased (plain second moment minus squared
    mean), the common convention.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C) frames, got {a.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    if min(a.shape[0], a.shape[1]) < window:
        raise ValueError(f"frame {a.shape[:2]} smaller than window {window}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x = ndimage.uniform_filter(x, size=window, mode="reflect")
        mu_y = ndimage.uniform_filter(y, size=window, mode="reflect")
        xx = ndimage.uniform_filter(x * x, size=window, mode="reflect")
        yy = ndimage.uniform_filter(y * y, size=window, mode="reflect")
        xy = ndimage.uniform_filter(x * y, size=window, mode="reflect")
        var_x = xx - mu_x * mu_x
        var_y = yy - mu_y * mu_y
        cov = xy - mu_x * mu_y
        ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        )
        scores.append(float(ssim_map.mean()))
    return float(np.mean(scores))


def ssim_video(a: np.ndarray, b: np.ndarray, **kwargs) -> float:
    """Frame-averaged SSIM for (T, H, W[, C]) stacks."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean([ssim_frame(a[t], b[t], **kwargs) for t in range(a.shape[0])]))

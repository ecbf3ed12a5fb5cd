"""Locating the layers that move the subject.

The score of a layer is the fraction of subject-token attention mass that
falls inside the subject's mask: per (sample, step), average the subject
row of the text->video attention with the subject column of the video->text
attention (both head-averaged), normalize each latent frame to unit mass,
and accumulate in-mask mass over frames, steps and samples. Layers are split
into "motion" and "other" groups at the largest gap in the sorted scores,
and the split is validated by skipping random members of each group at
sampling time and measuring how much the output masks degrade.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np
import torch

from . import features, flow, metrics
from .codec import LatentCodec
from .data import Sample
from .model import AttentionRecord, MMDiT, extract_frame_attention


@dataclass
class LayerRanking:
    scores: list[float]  # per layer, in layer order
    dispersion: list[float]  # std of per-sample scores, same order
    selected: list[int]  # motion layers, ascending
    rule: str  # rule that actually applied (may be a fallback)
    sample_count: int

    @property
    def others(self) -> list[int]:
        chosen = set(self.selected)
        return [i for i in range(len(self.scores)) if i not in chosen]

    def to_dict(self) -> dict:
        return {
            "scores": self.scores,
            "dispersion": self.dispersion,
            "selected": self.selected,
            "others": self.others,
            "rule": self.rule,
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerRanking":
        return cls(
            scores=list(d["scores"]),
            dispersion=list(d["dispersion"]),
            selected=list(d["selected"]),
            rule=d["rule"],
            sample_count=int(d["sample_count"]),
        )


def sample_layer_scores(
    record: AttentionRecord, subject_pos: int, mask_raw: np.ndarray
) -> dict[int, float]:
    """In-mask attention fraction per layer for one sample's record."""
    mask = np.asarray(mask_raw, dtype=np.float64)
    if mask.ndim == 4:
        mask = mask[0]
    if mask.shape != record.grid:
        raise ValueError(f"mask grid {mask.shape} != record grid {record.grid}")
    frames = record.grid[0]
    scores: dict[int, float] = {}
    for layer in record.layers():
        acc = 0.0
        count = 0
        for step in record.steps():
            t2v = extract_frame_attention(record, layer, step, subject_pos, "t2v")
            v2t = extract_frame_attention(record, layer, step, subject_pos, "v2t")
            m = 0.5 * (t2v.astype(np.float64) + v2t.astype(np.float64))
            totals = m.reshape(frames, -1).sum(axis=1)
            in_mask = (m * mask).reshape(frames, -1).sum(axis=1)
            for f in range(frames):
                if totals[f] > 0.0:
                    acc += in_mask[f] / totals[f]
                    count += 1
        scores[layer] = acc / count if count else 0.0
    return scores


def attention_score(
    samples: Iterable[tuple[AttentionRecord, int, np.ndarray]], depth: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Aggregate per-layer scores over (record, subject_pos, mask) samples.

    Returns (mean_scores, dispersion, per_sample) where per_sample is
    (n_samples, depth). Records must cover all `depth` layers."""
    rows = []
    for record, subject_pos, mask_raw in samples:
        per_layer = sample_layer_scores(record, subject_pos, mask_raw)
        if sorted(per_layer) != list(range(depth)):
            raise ValueError(
                f"record covers layers {sorted(per_layer)}, expected 0..{depth - 1}"
            )
        rows.append([per_layer[i] for i in range(depth)])
    if not rows:
        raise ValueError("no samples provided")
    per_sample = np.array(rows)
    return per_sample.mean(axis=0), per_sample.std(axis=0), per_sample


def select_motion_layers(
    scores: np.ndarray,
    rule: str = "largest-gap",
    k: int | None = None,
    min_group: int = 1,
) -> tuple[list[int], str]:
    """Split layers into motion/other by score.

    largest-gap: sort descending and cut where consecutive scores drop the
    most (first such gap on ties). Falls back to fixed-k when scores are all
    equal or the cut would leave either group smaller than min_group; the
    fallback k is the configured k when given, depth//2 otherwise. fixed-k:
    take the top k. Ties in score break toward the lower layer index.
    Returns (ascending selected indices, applied rule)."""
    scores = np.asarray(scores, dtype=np.float64)
    depth = len(scores)
    if depth < 2:
        raise ValueError(f"need at least 2 layers, got {depth}")
    if min_group < 1 or 2 * min_group > depth:
        raise ValueError(f"min_group {min_group} impossible for depth {depth}")
    kk = depth // 2 if k is None else k
    if not min_group <= kk <= depth - min_group:
        raise ValueError(f"k={kk} leaves a group below min_group={min_group}")
    # Stable order: descending score, ascending index within ties.
    order = np.lexsort((np.arange(depth), -scores))

    if rule == "fixed-k":
        return sorted(int(i) for i in order[:kk]), f"fixed-k({kk})"
    if rule != "largest-gap":
        raise ValueError(f"unknown selection rule {rule!r}")

    ranked = scores[order]
    gaps = ranked[:-1] - ranked[1:]
    if np.all(gaps == 0.0):
        return (
            sorted(int(i) for i in order[:kk]),
            f"fixed-k({kk}) fallback: all scores equal",
        )
    cut = int(np.argmax(gaps)) + 1  # size of the upper group
    if cut < min_group or depth - cut < min_group:
        return (
            sorted(int(i) for i in order[:kk]),
            f"fixed-k({kk}) fallback: largest-gap split {cut}/{depth - cut} "
            f"below min_group={min_group}",
        )
    return sorted(int(i) for i in order[:cut]), "largest-gap"


def record_scene(
    model: MMDiT,
    scene: features.SceneTensors,
    steps: int,
    seed: int,
) -> AttentionRecord:
    """One unconditioned sampling run with full attention capture."""
    cfg = model.cfg
    record = AttentionRecord(cfg.grid, cfg.text_len, cfg.heads)
    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn(
        (1, cfg.latent_channels, cfg.latent_t, cfg.latent_h, cfg.latent_w), generator=gen
    )
    flow.sample(
        model,
        noise,
        scene.text[None],
        scene.first_frame[None],
        steps=steps,
        record=record,
    )
    return record


def rank_model_layers(
    model: MMDiT,
    samples: list[Sample],
    codec: LatentCodec,
    steps: int = 20,
    seed: int = 0,
    rule: str = "largest-gap",
    k: int | None = None,
    min_group: int = 3,
) -> LayerRanking:
    """Score every layer over sampling runs on `samples` and select the
    motion group. Runs the base model without injection: the measurement
    targets what the backbone itself attends to."""
    if not samples:
        raise ValueError("need at least one sample to rank layers")

    def stream() -> Iterator[tuple[AttentionRecord, int, np.ndarray]]:
        for i, s in enumerate(samples):
            scene = features.encode_scene(s, codec)
            rec = record_scene(model, scene, steps, seed + i)
            yield rec, s.subject_token_pos, scene.mask_raw

    mean_scores, dispersion, _ = attention_score(stream(), model.cfg.depth)
    selected, applied = select_motion_layers(mean_scores, rule=rule, k=k, min_group=min_group)
    return LayerRanking(
        scores=[float(x) for x in mean_scores],
        dispersion=[float(x) for x in dispersion],
        selected=selected,
        rule=applied,
        sample_count=len(samples),
    )


@dataclass
class SkipAblationResult:
    per_sample: list[dict]
    aggregate: dict[str, dict[str, float]]  # variant -> mean J/F/JF (fractions)
    videos: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"per_sample": self.per_sample, "aggregate": self.aggregate}


VARIANTS = ("full", "skip_motion", "skip_other")


def skip_ablation(
    model: MMDiT,
    adapter,
    samples: list[Sample],
    codec: LatentCodec,
    motion_layers: list[int],
    other_layers: list[int],
    n_skip: int = 3,
    steps: int = 20,
    threshold: float = 75.0,
    tolerance: int = 1,
    seed: int = 0,
    schedule: str = "cosine",
    keep_videos: bool = True,
) -> SkipAblationResult:
    """Skip random layers from each group during conditioned sampling and
    score the damage.

    Per sample: one shared noise draw; three runs (no skips, n_skip random
    motion layers skipped, n_skip random other layers skipped); masks are
    color-extracted from the decoded videos and the skip runs are scored
    against the full run's masks. Deterministic in (seed, model, samples)."""
    if len(motion_layers) < n_skip:
        raise ValueError(f"cannot skip {n_skip} of {len(motion_layers)} motion layers")
    if len(other_layers) < n_skip:
        raise ValueError(f"cannot skip {n_skip} of {len(other_layers)} other layers")
    rng = np.random.default_rng(seed)
    weights = flow.schedule_weights(steps, schedule)
    cfg = model.cfg
    per_sample = []
    videos: dict[str, dict[str, np.ndarray]] = {}
    for i, s in enumerate(samples):
        scene = features.encode_scene(s, codec)
        skip_m = sorted(int(x) for x in rng.choice(motion_layers, size=n_skip, replace=False))
        skip_o = sorted(int(x) for x in rng.choice(other_layers, size=n_skip, replace=False))
        gen = torch.Generator().manual_seed(seed + 7919 * i)
        noise = torch.randn(
            (1, cfg.latent_channels, cfg.latent_t, cfg.latent_h, cfg.latent_w), generator=gen
        )
        with torch.no_grad():
            delta_z = adapter(scene.mask_norm[None])
        decoded = {}
        masks = {}
        for variant, skips in (("full", ()), ("skip_motion", skip_m), ("skip_other", skip_o)):
            latent = flow.sample(
                model,
                noise,
                scene.text[None],
                scene.first_frame[None],
                steps=steps,
                delta_z=delta_z,
                weights=weights,
                skip_layers=tuple(skips),
            )
            video = codec.decode_video(latent[0].numpy())
            decoded[variant] = video
            masks[variant] = metrics.extract_subject_masks(video, s.subject_color, threshold)
        row = {"name": s.name, "skip_motion": skip_m, "skip_other": skip_o}
        for variant in ("skip_motion", "skip_other"):
            row[f"{variant}_metrics"] = metrics.jf_video(
                masks[variant], masks["full"], tolerance
            )
        per_sample.append(row)
        if keep_videos:
            videos[s.name] = decoded
    aggregate = {}
    for variant in ("skip_motion", "skip_other"):
        rows = [r[f"{variant}_metrics"] for r in per_sample]
        aggregate[variant] = {
            key: float(np.mean([r[key] for r in rows])) for key in ("J", "F", "JF")
        }
    return SkipAblationResult(per_sample=per_sample, aggregate=aggregate, videos=videos)

"""Conditioning ablation: full method vs constant-weight injection vs LoRA
placed on the lowest-scoring layers.

Rows share the evaluation protocol: generate every eval scene conditioned on
its ground-truth control mask, then score SSIM / PSNR against the reference
video, J / F / J&F of the color-extracted masks against the reference masks,
and the mask-following IoU against the control mask.

The variant row retrains the conditioning stack from the same frozen base
with LoRA attached to the k lowest-ranked layers (k matching the full run's
motion-layer count); the constant-weight row reuses the full checkpoint and
only changes the sampling schedule.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from . import checkpoint, data, generate, training
from .config import RunConfig
from .motion_layers import LayerRanking

ROWS = ("full", "constant_injection", "lora_lowest")


def lowest_k_ranking(ranking: LayerRanking, k: int) -> LayerRanking:
    """The mirror selection: k layers with the smallest scores."""
    order = np.lexsort((np.arange(len(ranking.scores)), np.asarray(ranking.scores)))
    selected = sorted(int(i) for i in order[:k])
    return LayerRanking(
        scores=ranking.scores,
        dispersion=ranking.dispersion,
        selected=selected,
        rule=f"lowest-k({k})",
        sample_count=ranking.sample_count,
    )


def run_ablation(cfg: RunConfig, data_dir: Path, out_dir: Path, log=print) -> dict:
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    # Row 1 artifacts: a finished conditioned run (reused when the config
    # points at one, trained here otherwise).
    if cfg.train.full_checkpoint:
        full_ckpt = Path(cfg.train.full_checkpoint)
        if not cfg.train.ranking_path or not cfg.train.base_checkpoint:
            raise ValueError(
                "train.full_checkpoint needs train.ranking_path and "
                "train.base_checkpoint so the variant row can retrain from the "
                "same base"
            )
        ranking = LayerRanking.from_dict(json.loads(Path(cfg.train.ranking_path).read_text()))
        base_ckpt = Path(cfg.train.base_checkpoint)
        log(f"reusing full checkpoint {full_ckpt}")
    else:
        full_dir = out_dir / "full_run"
        log("training the full conditioned model")
        training.train_pipeline(cfg, data_dir, full_dir, log=log)
        full_ckpt = full_dir / "checkpoints" / "final"
        base_ckpt = full_dir / "checkpoints" / "base"
        ranking = LayerRanking.from_dict(json.loads((full_dir / "ranking.json").read_text()))

    # Row 3: same recipe, LoRA on the k lowest-scoring layers.
    k = len(ranking.selected)
    low_ranking = lowest_k_ranking(ranking, k)
    low_ranking_path = out_dir / "ranking_lowest.json"
    data.write_json(low_ranking_path, low_ranking.to_dict())
    low_cfg = copy.deepcopy(cfg)
    low_cfg.train.base_checkpoint = str(base_ckpt)
    low_cfg.train.ranking_path = str(low_ranking_path)
    low_cfg.train.full_checkpoint = None
    low_dir = out_dir / "lowest_run"
    log(f"training the variant with LoRA on {low_ranking.selected}")
    training.train_pipeline(low_cfg, data_dir, low_dir, log=log)
    low_ckpt = low_dir / "checkpoints" / "final"

    eval_samples = data.load_split(data_dir / cfg.paths.val_split, limit=cfg.eval.scenes)
    codec = cfg.codec_obj()
    specs = {
        "full": (full_ckpt, "cosine"),
        "constant_injection": (full_ckpt, "constant"),
        "lora_lowest": (low_ckpt, "cosine"),
    }
    rows = {}
    for name, (ckpt_path, schedule) in specs.items():
        model, adapter, _ = checkpoint.load_checkpoint(ckpt_path)
        if adapter is None:
            raise checkpoint.CheckpointError(f"{ckpt_path} holds no adapter weights")
        model.eval()
        scores = []
        for i, s in enumerate(eval_samples):
            result = generate.generate(
                model,
                adapter,
                s,
                codec,
                steps=cfg.flow.sample_steps,
                schedule=schedule,
                seed=cfg.seed + 7919 * i,
            )
            scores.append(
                generate.score_pair(
                    result.video,
                    s,
                    s.mask,
                    cfg.eval.threshold,
                    cfg.eval.tolerance,
                    cfg.eval.ssim_window,
                )
            )
        rows[name] = {
            "checkpoint": str(ckpt_path),
            "schedule": schedule,
            "per_sample": scores,
            "aggregate": generate.aggregate_scores(scores),
        }
        agg = rows[name]["aggregate"]
        log(
            f"[{name}] ssim {agg['ssim']:.4f} psnr {agg['psnr']:.2f} "
            f"J&F {agg['JF']:.4f} mask-iou {agg['mask_iou']:.4f}"
        )

    report = {"rows": rows, "motion_layers": ranking.selected, "lowest_layers": low_ranking.selected}
    data.write_json(out_dir / "rows.json", report)
    (out_dir / "table.txt").write_text(format_rows(rows))
    return report


def format_rows(rows: dict) -> str:
    header = f"{'row':20s}  {'ssim':>7s}  {'psnr':>7s}  {'J':>6s}  {'F':>6s}  {'J&F':>6s}  {'m-iou':>6s}"
    lines = [header, "-" * len(header)]
    for name in ROWS:
        if name not in rows:
            continue
        a = rows[name]["aggregate"]
        lines.append(
            f"{name:20s}  {a['ssim']:7.4f}  {a['psnr']:7.2f}  {a['J']:6.3f}  "
            f"{a['F']:6.3f}  {a['JF']:6.3f}  {a['mask_iou']:6.3f}"
        )
    return "\n".join(lines) + "\n"

"""Command-line entry points.

Subcommands cover the full workflow: gen-data, train, rank-layers,
skip-ablate, sample, eval, ablate. Every command echoes its resolved config
into the output directory, exits nonzero with a message on error, and leaves
a failed.marker in any output directory it had started writing.

COMOGEN_SEED, when set, overrides the config seed for every command.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import ablate, checkpoint, data, generate, metrics, training, world
from .config import ConfigError, RunConfig, load_config
from .motion_layers import LayerRanking, skip_ablation


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskmotion",
        description="mask-guided video generation on a toy collision world",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    add_common(p)
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    p = sub.add_parser("train", help="pretrain the backbone, then run the two conditioning stages")
    add_common(p)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")

    p = sub.add_parser("rank-layers", help="score layers by in-mask subject attention")
    add_common(p)
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("skip-ablate", help="skip random motion/other layers and score the damage")
    add_common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--ranking", type=Path, required=True, help="ranking.json from rank-layers or train")
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("sample", help="generate one video from a first frame and control mask")
    add_common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument(
        "--first-frame",
        type=Path,
        required=True,
        help="dataset sample directory, or a raw .rgb24 frame with a sibling meta.json",
    )
    p.add_argument(
        "--mask",
        type=Path,
        required=True,
        help="control mask: .gray8 stack, or a JSON list of per-frame rigid transforms",
    )
    p.add_argument("--steps", type=int, default=None, help="sampling steps (default from config)")
    p.add_argument("--no-cosine", action="store_true", help="constant injection weight instead of the cosine schedule")
    p.add_argument("--skip", type=str, default="", help="comma-separated layer indices to skip")

    p = sub.add_parser("eval", help="score generated videos against reference scenes")
    add_common(p)
    p.add_argument("--gen", type=Path, required=True, help="directory of generated sample dirs")
    p.add_argument("--ref", type=Path, required=True, help="reference dataset split directory")

    p = sub.add_parser("ablate", help="full method vs constant injection vs LoRA on the lowest layers")
    add_common(p)
    p.add_argument("--data", type=Path, required=True)

    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    env_seed = os.environ.get("COMOGEN_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"COMOGEN_SEED must be an integer, got {env_seed!r}")
        cfg.validate()
    return cfg


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    data.write_json(out_dir / "config.json", cfg.to_dict())


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    summary = data.generate_dataset(cfg.world, args.out, force=args.force)
    echo_config(cfg, args.out)
    for split, info in summary.items():
        print(f"{split}: {info['scenes']} scenes, {info['bytes']} bytes")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg, args.out)
    torch.manual_seed(cfg.seed)
    report = training.train_pipeline(cfg, args.data, args.out)
    print(
        f"final val loss {report['final_val_loss']:.4f} "
        f"(init {report['init_val_loss']:.4f}); motion layers {report['motion_layers']}"
    )
    return 0


def cmd_rank_layers(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg, args.out)
    model, _, _ = checkpoint.load_checkpoint(args.ckpt)
    model.eval()
    samples = data.load_split(Path(args.data) / cfg.paths.val_split, limit=cfg.train.ranking_samples)
    from .motion_layers import rank_model_layers

    ranking = rank_model_layers(
        model,
        samples,
        cfg.codec_obj(),
        steps=cfg.flow.sample_steps,
        seed=cfg.seed + 211,
        rule=cfg.train.ranking_rule,
        k=cfg.train.ranking_k,
        min_group=cfg.train.n_skip,
    )
    data.write_json(args.out / "ranking.json", ranking.to_dict())
    table = training.format_ranking(ranking)
    (args.out / "ranking.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_skip_ablate(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg, args.out)
    model, adapter, _ = checkpoint.load_checkpoint(args.ckpt)
    if adapter is None:
        raise checkpoint.CheckpointError(
            f"{args.ckpt} holds no adapter; skip ablation needs a conditioned checkpoint"
        )
    model.eval()
    ranking = LayerRanking.from_dict(json.loads(Path(args.ranking).read_text()))
    samples = data.load_split(Path(args.data) / cfg.paths.val_split, limit=cfg.eval.scenes)
    result = skip_ablation(
        model,
        adapter,
        samples,
        cfg.codec_obj(),
        motion_layers=ranking.selected,
        other_layers=ranking.others,
        n_skip=cfg.train.n_skip,
        steps=cfg.flow.sample_steps,
        threshold=cfg.eval.threshold,
        tolerance=cfg.eval.tolerance,
        seed=cfg.seed + 997,
    )
    data.write_json(args.out / "ablation.json", result.to_dict())
    for name, videos in result.videos.items():
        for variant, video in videos.items():
            generate.save_generation(
                args.out / "videos" / name / variant,
                generate.GenerationResult(video=video, latent=np.empty(0, dtype=np.float32), mask_used=None),
                {"variant": variant, "scene": name},
            )
    lines = [
        f"{'variant':12s}  {'J':>7s}  {'F':>7s}  {'J&F':>7s}   (vs the unskipped run, "
        f"{len(result.per_sample)} scenes, skip {cfg.train.n_skip})"
    ]
    for variant in ("skip_motion", "skip_other"):
        agg = result.aggregate[variant]
        lines.append(
            f"{variant:12s}  {agg['J']:7.4f}  {agg['F']:7.4f}  {agg['JF']:7.4f}"
        )
    table = "\n".join(lines) + "\n"
    (args.out / "table.txt").write_text(table)
    print(table, end="")
    return 0


def _load_first_frame(path: Path) -> data.Sample:
    path = Path(path)
    if path.is_dir():
        return data.load_sample(path)
    meta_path = path.parent / "meta.json"
    if not meta_path.exists():
        raise data.DatasetError(
            f"{path} is a raw frame; it needs a sibling meta.json for dims and caption"
        )
    meta = json.loads(meta_path.read_text())
    T, H, W = meta["T"], meta["H"], meta["W"]
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size != H * W * 3:
        raise data.DatasetError(
            f"{path} holds {raw.size} bytes; expected {H * W * 3} for one {H}x{W} rgb24 frame"
        )
    frame = raw.reshape(1, H, W, 3)
    return data.Sample(
        name=path.stem,
        meta=meta,
        video=np.repeat(frame, T, axis=0),
        mask=np.zeros((T, H, W), dtype=np.uint8),
    )


def _load_control_mask(path: Path, sample: data.Sample) -> np.ndarray:
    path = Path(path)
    T, H, W = sample.video.shape[:3]
    if path.suffix == ".json":
        spec = json.loads(path.read_text())
        if not isinstance(spec, list):
            raise ValueError(
                f"{path} must hold a JSON list of per-frame transforms "
                '[{"dx": ..., "dy": ..., "rot_deg": ...}, ...]'
            )
        if len(spec) != T:
            raise ValueError(f"{path} holds {len(spec)} transforms; scene has {T} frames")
        base = sample.mask[0]
        if not base.any():
            raise ValueError(
                "transform mask needs the first-frame mask of a dataset sample as its base; "
                "the given first frame has none"
            )
        return world.transform_mask_sequence(base, spec)
    return data.read_gray8(path, T, H, W)


def cmd_sample(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg, args.out)
    model, adapter, manifest = checkpoint.load_checkpoint(args.ckpt)
    if adapter is None:
        raise checkpoint.CheckpointError(
            f"{args.ckpt} holds no adapter; conditioned sampling needs one"
        )
    model.eval()
    sample = _load_first_frame(args.first_frame)
    mask = _load_control_mask(args.mask, sample)
    steps = args.steps if args.steps is not None else cfg.flow.sample_steps
    skip = tuple(int(x) for x in args.skip.split(",") if x.strip() != "")
    schedule = "constant" if args.no_cosine else "cosine"
    t0 = time.monotonic()
    result = generate.generate(
        model,
        adapter,
        sample,
        cfg.codec_obj(),
        steps=steps,
        schedule=schedule,
        skip_layers=skip,
        seed=cfg.seed,
        mask=mask,
    )
    generate.save_generation(
        args.out,
        result,
        {
            "checkpoint": str(args.ckpt),
            "first_frame": str(args.first_frame),
            "mask": str(args.mask),
            "steps": steps,
            "schedule": schedule,
            "skip_layers": list(skip),
            "seed": cfg.seed,
            "elapsed_sec": time.monotonic() - t0,
        },
    )
    print(f"wrote {args.out / 'video.rgb24'} ({steps} steps, schedule {schedule})")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg, args.out)
    gen_dir = Path(args.gen)
    ref_dir = Path(args.ref)
    pairs = sorted(p for p in gen_dir.iterdir() if (p / "run.json").exists())
    if not pairs:
        raise data.DatasetError(f"{gen_dir} holds no generated samples (run.json missing)")
    rows = {}
    for gen_path in pairs:
        ref = data.load_sample(ref_dir / gen_path.name)
        run = json.loads((gen_path / "run.json").read_text())
        video = data.read_rgb24(gen_path / "video.rgb24", run["T"], run["H"], run["W"])
        mask_path = gen_path / "mask_used.gray8"
        control = (
            data.read_gray8(mask_path, run["T"], run["H"], run["W"])
            if mask_path.exists()
            else ref.mask
        )
        rows[gen_path.name] = generate.score_pair(
            video, ref, control, cfg.eval.threshold, cfg.eval.tolerance, cfg.eval.ssim_window
        )
    aggregate = generate.aggregate_scores(list(rows.values()))
    data.write_json(args.out / "metrics.json", {"per_sample": rows, "aggregate": aggregate})
    header = f"{'sample':16s}  {'psnr':>7s}  {'ssim':>7s}  {'J':>6s}  {'F':>6s}  {'J&F':>6s}  {'m-iou':>6s}"
    lines = [header, "-" * len(header)]
    for name, r in rows.items():
        lines.append(
            f"{name:16s}  {r['psnr']:7.2f}  {r['ssim']:7.4f}  {r['J']:6.3f}  "
            f"{r['F']:6.3f}  {r['JF']:6.3f}  {r['mask_iou']:6.3f}"
        )
    lines.append("-" * len(header))
    a = aggregate
    lines.append(
        f"{'mean':16s}  {a['psnr']:7.2f}  {a['ssim']:7.4f}  {a['J']:6.3f}  "
        f"{a['F']:6.3f}  {a['JF']:6.3f}  {a['mask_iou']:6.3f}"
    )
    table = "\n".join(lines) + "\n"
    (args.out / "metrics.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    echo_config(cfg, args.out)
    torch.manual_seed(cfg.seed)
    ablate.run_ablation(cfg, args.data, args.out)
    print((args.out / "table.txt").read_text(), end="")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "rank-layers": cmd_rank_layers,
    "skip-ablate": cmd_skip_ablate,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except data.DatasetExistsError as exc:
        # The refusal leaves the existing dataset untouched; no marker.
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports everything
        out = getattr(args, "out", None)
        if out is not None and Path(out).exists():
            (Path(out) / "failed.marker").write_text(f"{type(exc).__name__}: {exc}\n")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

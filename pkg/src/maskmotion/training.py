"""Training pipeline.

Three phases run inside one `train` invocation:

  pretrain   backbone only, no conditioning; provisions the frozen base that
             the published recipe assumes (skipped when train.base_checkpoint
             is set)
  stage1     mask adapter only; backbone frozen, LoRA attached to the ranked
             motion layers but still frozen
  stage2     adapter + LoRA jointly; backbone stays frozen

Layer ranking runs between pretraining and stage 1 on the frozen base.
Validation loss uses a fixed noise/time grid per val scene, so values are
comparable across phases; the first CSV row records it at initialization,
before any training.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint, data, features, flow
from .adapter import MaskAdapter
from .codec import LatentCodec
from .config import RunConfig
from .lora import attach_lora, base_named_parameters, count_parameters, lora_named_parameters
from .model import MMDiT
from .motion_layers import LayerRanking, rank_model_layers


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass
class LossRow:
    step: int
    stage: str
    epoch: int
    train_loss: float | None
    val_loss: float | None

    def csv(self) -> str:
        t = "" if self.train_loss is None else f"{self.train_loss:.6f}"
        v = "" if self.val_loss is None else f"{self.val_loss:.6f}"
        return f"{self.step},{self.stage},{self.epoch},{t},{v}"


def write_loss_csv(path: Path, rows: list[LossRow]) -> None:
    lines = ["step,stage,epoch,train_loss,val_loss"]
    lines.extend(r.csv() for r in rows)
    path.write_text("\n".join(lines) + "\n")


def lr_scale(step: int, total: int, schedule: str) -> float:
    """Per-step multiplier on a phase's learning rate.

    "constant" returns 1.0 throughout and is what the conditioning stages
    use. "cosine" ramps linearly over the first 5% of steps, then follows a
    half cosine from 1.0 down to a 0.1 floor on the last step. Pretraining
    budgets here are short enough that parking the rate at its peak leaves
    the backbone at a noise floor well above what it can reach; the decay
    tail recovers most of that gap for free.
    """
    if schedule == "constant":
        return 1.0
    if schedule != "cosine":
        raise ValueError(f"unknown lr schedule {schedule!r}")
    warmup = max(1, total // 20)
    if step < warmup:
        return (step + 1) / warmup
    span = max(1, total - 1 - warmup)
    frac = min(1.0, (step - warmup) / span)
    return 0.1 + 0.45 * (1.0 + math.cos(math.pi * frac))


class ValEvaluator:
    """Validation flow-matching loss on a fixed (noise, t) grid.

    Each val scene gets a deterministic eps draw and a stratified t, so the
    loss is a stable function of the weights.
    """

    def __init__(self, scenes: list[features.SceneTensors], seed: int, batch: int = 8):
        self.scenes = scenes
        self.batch = batch
        n = len(scenes)
        gen = torch.Generator().manual_seed(seed)
        self.eps = [torch.randn(s.x0.shape, generator=gen) for s in scenes]
        self.t = torch.tensor([(i + 0.5) / n for i in range(n)], dtype=torch.float32)

    @torch.no_grad()
    def __call__(self, model: MMDiT, adapter: MaskAdapter | None, injection_mode: str) -> float:
        total = 0.0
        n = len(self.scenes)
        for lo in range(0, n, self.batch):
            hi = min(lo + self.batch, n)
            chunk = self.scenes[lo:hi]
            batch = flow.FlowBatch(
                x0=torch.stack([s.x0 for s in chunk]),
                eps=torch.stack(self.eps[lo:hi]),
                t=self.t[lo:hi],
                text=torch.stack([s.text for s in chunk]),
                first_frame=torch.stack([s.first_frame for s in chunk]),
            )
            delta = None
            weight: torch.Tensor | float = 1.0
            if adapter is not None:
                delta = adapter(torch.stack([s.mask_norm for s in chunk]))
                weight = flow.train_weight_for_t(batch.t, injection_mode)
            loss = flow.fm_loss(model, batch, delta_z=delta, weight=weight)
            total += float(loss) * (hi - lo)
        return total / n


@dataclass
class PhaseSpec:
    name: str
    epochs: int
    batch_size: int
    lr: float
    params: list[nn.Parameter]
    conditioned: bool
    schedule: str = "constant"


class Trainer:
    """Runs phases over raw samples, encoding each batch on the fly.

    Encoding is a cheap reshape and scale, so recomputing it per step costs
    a few ms per batch while keeping only the uint8 scenes resident instead
    of a full set of float latents.
    """

    def __init__(
        self,
        cfg: RunConfig,
        model: MMDiT,
        adapter: MaskAdapter,
        train_samples: list[data.Sample],
        codec: LatentCodec,
        evaluator: ValEvaluator,
        log=print,
    ):
        self.cfg = cfg
        self.model = model
        self.adapter = adapter
        self.train_samples = train_samples
        self.codec = codec
        self.evaluator = evaluator
        self.log = log
        self.rows: list[LossRow] = []
        self.global_step = 0
        self.rng = np.random.default_rng(cfg.seed + 17)
        self.gen = torch.Generator().manual_seed(cfg.seed + 29)
        self.last_checkpoint: Path | None = None

    def record_val(self, stage: str, epoch: int) -> float:
        val = self.evaluator(self.model, self.adapter, self.cfg.flow.train_injection)
        self.rows.append(LossRow(self.global_step, stage, epoch, None, val))
        return val

    def run_phase(self, spec: PhaseSpec, on_epoch=None) -> None:
        opt = torch.optim.AdamW(
            spec.params, lr=spec.lr, weight_decay=self.cfg.train.weight_decay
        )
        n = len(self.train_samples)
        steps_per_epoch = (n + spec.batch_size - 1) // spec.batch_size
        total_steps = spec.epochs * steps_per_epoch
        phase_step = 0
        t0 = time.monotonic()
        for epoch in range(spec.epochs):
            order = self.rng.permutation(n)
            epoch_losses = []
            for lo in range(0, n, spec.batch_size):
                idx = order[lo : lo + spec.batch_size]
                chunk = [
                    features.encode_scene(self.train_samples[i], self.codec) for i in idx
                ]
                x0 = torch.stack([s.x0 for s in chunk])
                batch = flow.FlowBatch(
                    x0=x0,
                    eps=torch.randn(x0.shape, generator=self.gen),
                    t=torch.rand(len(chunk), generator=self.gen),
                    text=torch.stack([s.text for s in chunk]),
                    first_frame=torch.stack([s.first_frame for s in chunk]),
                )
                delta = None
                weight: torch.Tensor | float = 1.0
                if spec.conditioned:
                    delta = self.adapter(torch.stack([s.mask_norm for s in chunk]))
                    weight = flow.train_weight_for_t(batch.t, self.cfg.flow.train_injection)
                loss = flow.fm_loss(self.model, batch, delta_z=delta, weight=weight)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at step {self.global_step} "
                        f"({spec.name} epoch {epoch}); last checkpoint: "
                        f"{self.last_checkpoint or 'none'}"
                    )
                opt.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(spec.params, self.cfg.train.grad_clip)
                scale = lr_scale(phase_step, total_steps, spec.schedule)
                for group in opt.param_groups:
                    group["lr"] = spec.lr * scale
                opt.step()
                phase_step += 1
                self.global_step += 1
                value = float(loss.detach())
                epoch_losses.append(value)
                self.rows.append(LossRow(self.global_step, spec.name, epoch, value, None))
            val = self.record_val(spec.name, epoch)
            self.log(
                f"[{spec.name}] epoch {epoch + 1}/{spec.epochs} "
                f"train {np.mean(epoch_losses):.4f} val {val:.4f} "
                f"({time.monotonic() - t0:.0f}s)"
            )
            if on_epoch is not None:
                on_epoch(epoch)


def param_report(model: MMDiT, adapter: MaskAdapter) -> dict:
    base = count_parameters(base_named_parameters(model))
    adapter_n = count_parameters(adapter.named_parameters())
    lora_n = count_parameters(lora_named_parameters(model))
    inference_pct = adapter_n / base * 100.0
    lora_pct = lora_n / base * 100.0
    return {
        "base_parameters": base,
        "adapter_parameters": adapter_n,
        "lora_parameters": lora_n,
        "inference_extra_pct": inference_pct,
        "lora_extra_pct": lora_pct,
        # Sum of the two shares by construction, so the bookkeeping identity
        # training = inference + lora holds exactly.
        "training_extra_pct": inference_pct + lora_pct,
    }


def train_pipeline(cfg: RunConfig, data_dir: Path, out_dir: Path, log=print) -> dict:
    """Run the full pipeline; returns the report written to out_dir."""
    started = time.monotonic()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    codec = cfg.codec_obj()

    train_samples = data.load_split(Path(data_dir) / cfg.paths.train_split)
    val_samples = data.load_split(Path(data_dir) / cfg.paths.val_split)
    log(f"loaded {len(train_samples)} train / {len(val_samples)} val scenes")
    val_scenes = [features.encode_scene(s, codec) for s in val_samples]

    torch.manual_seed(cfg.seed)
    model = MMDiT(cfg.model_config())
    adapter = MaskAdapter(model.cfg.latent_channels, cfg.adapter)
    evaluator = ValEvaluator(val_scenes, seed=cfg.seed + 101)
    trainer = Trainer(cfg, model, adapter, train_samples, codec, evaluator, log=log)

    init_val = trainer.record_val("init", 0)
    log(f"[init] val {init_val:.4f}")

    ckpt_root = out_dir / "checkpoints"
    base_train_info = {
        "phase": "pretrain",
        "learning_rate": cfg.train.pretrain_lr,
        "lr_schedule": cfg.train.pretrain_schedule,
        "batch_size": cfg.train.pretrain_batch_size,
        "epochs": cfg.train.pretrain_epochs,
        "grad_clip": cfg.train.grad_clip,
        "weight_decay": cfg.train.weight_decay,
    }

    def save_base(epoch: int = -1) -> None:
        checkpoint.save_checkpoint(
            ckpt_root / "base", model, None, cfg.to_dict(),
            {**base_train_info, "epochs_done": epoch + 1},
        )
        trainer.last_checkpoint = ckpt_root / "base"

    if cfg.train.base_checkpoint:
        loaded, _, manifest = checkpoint.load_checkpoint(Path(cfg.train.base_checkpoint))
        if manifest["model_config"] != vars(model.cfg):
            raise checkpoint.CheckpointError(
                f"base checkpoint config {manifest['model_config']} does not match "
                f"run config {vars(model.cfg)}"
            )
        model.load_state_dict(loaded.state_dict())
        log(f"loaded base checkpoint from {cfg.train.base_checkpoint}")
        checkpoint.save_checkpoint(
            ckpt_root / "base", model, None, cfg.to_dict(),
            {**base_train_info, "source": cfg.train.base_checkpoint},
        )
        trainer.last_checkpoint = ckpt_root / "base"
    else:
        # The rolling save at each epoch boundary doubles as the last-good
        # checkpoint should a later step produce a non-finite loss.
        trainer.run_phase(
            PhaseSpec(
                name="pretrain",
                epochs=cfg.train.pretrain_epochs,
                batch_size=cfg.train.pretrain_batch_size,
                lr=cfg.train.pretrain_lr,
                params=list(model.parameters()),
                conditioned=False,
                schedule=cfg.train.pretrain_schedule,
            ),
            on_epoch=save_base,
        )
        if cfg.train.pretrain_epochs == 0:
            save_base()

    hash_before = checkpoint.base_hash(model)

    if cfg.train.ranking_path:
        ranking = LayerRanking.from_dict(json.loads(Path(cfg.train.ranking_path).read_text()))
        log(f"loaded ranking from {cfg.train.ranking_path}")
    else:
        log(f"ranking layers on {min(cfg.train.ranking_samples, len(val_samples))} scenes")
        ranking = rank_model_layers(
            model,
            val_samples[: cfg.train.ranking_samples],
            codec,
            steps=cfg.flow.sample_steps,
            seed=cfg.seed + 211,
            rule=cfg.train.ranking_rule,
            k=cfg.train.ranking_k,
            min_group=cfg.train.n_skip,
        )
    data.write_json(out_dir / "ranking.json", ranking.to_dict())
    (out_dir / "ranking.txt").write_text(format_ranking(ranking))
    log(f"motion layers: {ranking.selected} ({ranking.rule})")

    attach_lora(model, ranking.selected, cfg.lora)
    for _, p in base_named_parameters(model):
        p.requires_grad_(False)
    lora_params = [p for _, p in lora_named_parameters(model)]
    for p in lora_params:
        p.requires_grad_(False)

    lora_digest_attach = checkpoint.weights_digest(checkpoint.named_tensors(model), "lora")

    stage_info = {
        "learning_rate": cfg.train.lr,
        "batch_size": cfg.train.batch_size,
        "stage1_epochs": cfg.train.stage1_epochs,
        "stage2_epochs": cfg.train.stage2_epochs,
        "grad_clip": cfg.train.grad_clip,
        "weight_decay": cfg.train.weight_decay,
        "train_injection": cfg.flow.train_injection,
    }

    def save_stage1(epoch: int = -1) -> None:
        checkpoint.save_checkpoint(
            ckpt_root / "stage1", model, adapter, cfg.to_dict(),
            {**stage_info, "phase": "stage1", "epochs_done": epoch + 1},
        )
        trainer.last_checkpoint = ckpt_root / "stage1"

    trainer.run_phase(
        PhaseSpec(
            name="stage1",
            epochs=cfg.train.stage1_epochs,
            batch_size=cfg.train.batch_size,
            lr=cfg.train.lr,
            params=list(adapter.parameters()),
            conditioned=True,
        ),
        on_epoch=save_stage1,
    )
    if cfg.train.stage1_epochs == 0:
        save_stage1()
    lora_digest_stage1 = checkpoint.weights_digest(checkpoint.named_tensors(model), "lora")

    def save_stage2(epoch: int = -1) -> None:
        last = epoch >= cfg.train.stage2_epochs - 1
        name = "final" if last else "stage2"
        checkpoint.save_checkpoint(
            ckpt_root / name, model, adapter, cfg.to_dict(),
            {**stage_info, "phase": "stage2", "epochs_done": epoch + 1},
        )
        trainer.last_checkpoint = ckpt_root / name

    for p in lora_params:
        p.requires_grad_(True)
    trainer.run_phase(
        PhaseSpec(
            name="stage2",
            epochs=cfg.train.stage2_epochs,
            batch_size=cfg.train.batch_size,
            lr=cfg.train.lr,
            params=list(adapter.parameters()) + lora_params,
            conditioned=True,
        ),
        on_epoch=save_stage2,
    )
    if cfg.train.stage2_epochs == 0:
        save_stage2()

    hash_after = checkpoint.base_hash(model)
    final_val = trainer.rows[-1].val_loss

    write_loss_csv(out_dir / "loss.csv", trainer.rows)
    report_params = param_report(model, adapter)
    data.write_json(out_dir / "param_report.json", report_params)

    report = {
        "init_val_loss": init_val,
        "final_val_loss": final_val,
        "base_hash_before_stage1": hash_before,
        "base_hash_after_stage2": hash_after,
        "base_hash_unchanged": hash_before == hash_after,
        "lora_digest_after_attach": lora_digest_attach,
        "lora_digest_after_stage1": lora_digest_stage1,
        "lora_unchanged_in_stage1": lora_digest_attach == lora_digest_stage1,
        "motion_layers": ranking.selected,
        "ranking_rule": ranking.rule,
        "steps": trainer.global_step,
        "wall_clock_sec": time.monotonic() - started,
        "parameters": report_params,
    }
    data.write_json(out_dir / "report.json", report)
    log(
        f"done in {report['wall_clock_sec']:.0f}s: init val {init_val:.4f} -> "
        f"final val {final_val:.4f}"
    )
    return report


def format_ranking(ranking: LayerRanking) -> str:
    lines = [
        f"in-mask attention fraction per layer ({ranking.sample_count} samples, "
        f"rule: {ranking.rule})",
        "",
        "layer    score      std  group",
    ]
    chosen = set(ranking.selected)
    for i, (s, d) in enumerate(zip(ranking.scores, ranking.dispersion)):
        group = "motion" if i in chosen else "other"
        lines.append(f"{i:5d}  {s:.5f}  {d:.5f}  {group}")
    return "\n".join(lines) + "\n"

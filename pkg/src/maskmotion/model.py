"""Joint text/video diffusion transformer.

Text tokens and packed video latents run through a stack of blocks that share
one softmax attention over the concatenated sequence while keeping separate
Q/K/V/output projections and MLPs per modality. Timestep conditioning is
adaLN with zero-initialized modulation and per-branch gates, so a fresh model
is an exact identity up to the (also zero-initialized) output head. The first
frame's latent is concatenated channel-wise onto every video token as
conditioning. A time-gated linear skip connects each noisy input token
directly to its velocity output, bypassing the narrower transformer width;
see the note on its field for why the head alone cannot do that job.

Blocks can be skipped at call time (the residual stream passes through
unchanged), and the full joint attention matrix can be recorded for analysis;
the normal path uses the fused kernel instead and never materializes it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ATTENTION_PROJECTIONS = ("q_t", "k_t", "v_t", "o_t", "q_v", "k_v", "v_v", "o_v")


@dataclass
class ModelConfig:
    depth: int = 12
    width: int = 64
    heads: int = 4
    text_len: int = 8
    vocab_size: int = 16
    latent_t: int = 4
    latent_h: int = 16
    latent_w: int = 16
    latent_channels: int = 192
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        for name in ("text_len", "vocab_size", "latent_t", "latent_h", "latent_w", "latent_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def n_video_tokens(self) -> int:
        return self.latent_t * self.latent_h * self.latent_w

    @property
    def grid(self) -> tuple[int, int, int]:
        return (self.latent_t, self.latent_h, self.latent_w)


class AttentionRecord:
    """Subject-relevant attention slices captured during a sampling run.

    Keyed by (layer, step). Each entry keeps the head-resolved text->video and
    video->text blocks of the joint attention matrix for a single sample
    (batch of one), as float32 numpy arrays.
    """

    def __init__(self, grid: tuple[int, int, int], text_len: int, heads: int):
        self.grid = grid
        self.text_len = text_len
        self.heads = heads
        self.entries: dict[tuple[int, int], dict[str, np.ndarray]] = {}

    def add(self, layer: int, step: int, t2v: np.ndarray, v2t: np.ndarray) -> None:
        key = (layer, step)
        if key in self.entries:
            raise ValueError(f"duplicate attention entry for layer={layer} step={step}")
        n_video = int(np.prod(self.grid))
        if t2v.shape != (self.heads, self.text_len, n_video):
            raise ValueError(
                f"t2v shape {t2v.shape} does not match (heads={self.heads}, "
                f"text_len={self.text_len}, video={n_video})"
            )
        if v2t.shape != (self.heads, n_video, self.text_len):
            raise ValueError(
                f"v2t shape {v2t.shape} does not match (heads={self.heads}, "
                f"video={n_video}, text_len={self.text_len})"
            )
        self.entries[key] = {"t2v": t2v, "v2t": v2t}

    def layers(self) -> list[int]:
        return sorted({layer for layer, _ in self.entries})

    def steps(self) -> list[int]:
        return sorted({step for _, step in self.entries})


def extract_frame_attention(
    record: AttentionRecord,
    layer: int,
    step: int,
    subject_pos: int,
    direction: str = "t2v",
) -> np.ndarray:
    """Head-averaged attention between the subject token and every video token,
    reshaped to the latent grid (T', H', W')."""
    if not 0 <= subject_pos < record.text_len:
        raise ValueError(f"subject_pos {subject_pos} outside text length {record.text_len}")
    entry = record.entries.get((layer, step))
    if entry is None:
        raise KeyError(f"no attention recorded for layer={layer} step={step}")
    if direction == "t2v":
        flat = entry["t2v"][:, subject_pos, :].mean(axis=0)
    elif direction == "v2t":
        flat = entry["v2t"][:, :, subject_pos].mean(axis=0)
    else:
        raise ValueError(f"direction must be 't2v' or 'v2t', got {direction!r}")
    return flat.reshape(record.grid)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of t (flow time scaled by 1000 before the call)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class JointBlock(nn.Module):
    """One transformer block: joint attention over [text; video], separate
    projections and MLPs per modality, adaLN modulation with gated residuals."""

    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.width = width
        self.heads = heads
        hidden = int(width * mlp_ratio)

        self.mod_t = nn.Linear(width, 6 * width)
        self.mod_v = nn.Linear(width, 6 * width)
        nn.init.zeros_(self.mod_t.weight)
        nn.init.zeros_(self.mod_t.bias)
        nn.init.zeros_(self.mod_v.weight)
        nn.init.zeros_(self.mod_v.bias)

        self.q_t = nn.Linear(width, width)
        self.k_t = nn.Linear(width, width)
        self.v_t = nn.Linear(width, width)
        self.o_t = nn.Linear(width, width)
        self.q_v = nn.Linear(width, width)
        self.k_v = nn.Linear(width, width)
        self.v_v = nn.Linear(width, width)
        self.o_v = nn.Linear(width, width)

        self.mlp_t = nn.Sequential(
            nn.Linear(width, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, width)
        )
        self.mlp_v = nn.Sequential(
            nn.Linear(width, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, width)
        )

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, S, _ = x.shape
        return x.view(B, S, self.heads, self.width // self.heads).transpose(1, 2)

    def forward(
        self,
        x_t: torch.Tensor,
        x_v: torch.Tensor,
        temb: torch.Tensor,
        need_attn: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
        d = self.width
        Lt = x_t.shape[1]
        sh1t, sc1t, g1t, sh2t, sc2t, g2t = self.mod_t(temb).chunk(6, dim=-1)
        sh1v, sc1v, g1v, sh2v, sc2v, g2v = self.mod_v(temb).chunk(6, dim=-1)

        h_t = _modulate(F.layer_norm(x_t, (d,)), sh1t, sc1t)
        h_v = _modulate(F.layer_norm(x_v, (d,)), sh1v, sc1v)

        q = torch.cat([self._heads(self.q_t(h_t)), self._heads(self.q_v(h_v))], dim=2)
        k = torch.cat([self._heads(self.k_t(h_t)), self._heads(self.k_v(h_v))], dim=2)
        v = torch.cat([self._heads(self.v_t(h_t)), self._heads(self.v_v(h_v))], dim=2)

        attn = None
        if need_attn:
            logits = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
            attn = logits.softmax(dim=-1)
            out = attn @ v
        else:
            out = F.scaled_dot_product_attention(q, k, v)

        B, _, S, _ = out.shape
        out = out.transpose(1, 2).reshape(B, S, d)
        x_t = x_t + g1t.unsqueeze(1) * self.o_t(out[:, :Lt])
        x_v = x_v + g1v.unsqueeze(1) * self.o_v(out[:, Lt:])

        x_t = x_t + g2t.unsqueeze(1) * self.mlp_t(_modulate(F.layer_norm(x_t, (d,)), sh2t, sc2t))
        x_v = x_v + g2v.unsqueeze(1) * self.mlp_v(_modulate(F.layer_norm(x_v, (d,)), sh2v, sc2v))
        return x_t, x_v, attn


class MMDiT(nn.Module):
    """The velocity network v(latent, first_frame, caption, t)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width

        self.patch_embed = nn.Linear(2 * cfg.latent_channels, d)
        self.token_embed = nn.Embedding(cfg.vocab_size, d)
        self.pos_t = nn.Parameter(torch.empty(cfg.latent_t, d))
        self.pos_h = nn.Parameter(torch.empty(cfg.latent_h, d))
        self.pos_w = nn.Parameter(torch.empty(cfg.latent_w, d))
        self.text_pos = nn.Parameter(torch.empty(cfg.text_len, d))
        for p in (self.pos_t, self.pos_h, self.pos_w, self.text_pos):
            nn.init.normal_(p, std=0.02)
        nn.init.normal_(self.token_embed.weight, std=0.02)

        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))

        self.blocks = nn.ModuleList(
            [JointBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )

        self.final_mod = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, cfg.latent_channels)
        nn.init.zeros_(self.final_mod.weight)
        nn.init.zeros_(self.final_mod.bias)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

        # Full-rank time-gated skip from the noisy input tokens to the
        # velocity output. The patch dimension exceeds the token width, so
        # without this path the head can only emit velocities from a
        # width-rank subspace per token and never cancels the orthogonal
        # noise component; at high noise the optimal velocity is close to an
        # elementwise affine function of the input, which this path carries
        # directly. The gate starts at zero so a fresh model still outputs
        # exact zeros.
        self.skip_proj = nn.Linear(cfg.latent_channels, cfg.latent_channels)
        self.skip_gate = nn.Linear(d, cfg.latent_channels)
        nn.init.zeros_(self.skip_gate.weight)
        nn.init.zeros_(self.skip_gate.bias)

        # Indices of blocks carrying LoRA, maintained by the attach call.
        self.lora_layers: set[int] = set()

    def _check_inputs(self, latent, first_frame, text, t, skip_layers):
        cfg = self.cfg
        expect = (cfg.latent_channels, cfg.latent_t, cfg.latent_h, cfg.latent_w)
        if latent.ndim != 5 or latent.shape[1:] != expect:
            raise ValueError(f"latent shape {tuple(latent.shape)} does not match (B,) + {expect}")
        B = latent.shape[0]
        ff_expect = (B, cfg.latent_channels, 1, cfg.latent_h, cfg.latent_w)
        if tuple(first_frame.shape) != ff_expect:
            raise ValueError(f"first_frame shape {tuple(first_frame.shape)} != {ff_expect}")
        if text.shape != (B, cfg.text_len):
            raise ValueError(f"text shape {tuple(text.shape)} != {(B, cfg.text_len)}")
        if text.dtype not in (torch.int64, torch.int32):
            raise ValueError(f"text must be integer token ids, got dtype {text.dtype}")
        if int(text.max()) >= cfg.vocab_size or int(text.min()) < 0:
            raise ValueError(
                f"token ids must lie in [0, {cfg.vocab_size}), got range "
                f"[{int(text.min())}, {int(text.max())}]"
            )
        if t.shape != (B,):
            raise ValueError(f"t shape {tuple(t.shape)} != {(B,)}")
        for layer in skip_layers:
            if not 0 <= layer < cfg.depth:
                raise ValueError(f"skip layer {layer} outside [0, {cfg.depth})")

    def forward(
        self,
        latent: torch.Tensor,
        first_frame: torch.Tensor,
        text: torch.Tensor,
        t: torch.Tensor,
        skip_layers: tuple[int, ...] = (),
        record: bool = False,
    ) -> tuple[torch.Tensor, dict[int, dict[str, torch.Tensor]] | None]:
        """Predict velocity; optionally return per-layer attention slices.

        When record is set, each entry holds the text->video and video->text
        blocks of the joint attention, shape (B, heads, text_len, N_video) and
        (B, heads, N_video, text_len).
        """
        self._check_inputs(latent, first_frame, text, t, skip_layers)
        cfg = self.cfg
        B = latent.shape[0]
        skip = set(skip_layers)

        cond = torch.cat([latent, first_frame.expand(-1, -1, cfg.latent_t, -1, -1)], dim=1)
        x_v = self.patch_embed(cond.flatten(2).transpose(1, 2))
        pos = (
            self.pos_t[:, None, None, :]
            + self.pos_h[None, :, None, :]
            + self.pos_w[None, None, :, :]
        ).reshape(cfg.n_video_tokens, cfg.width)
        x_v = x_v + pos[None]

        x_t = self.token_embed(text) + self.text_pos[None]
        temb = self.time_mlp(timestep_embedding(t * 1000.0, cfg.width))

        Lt = cfg.text_len
        records: dict[int, dict[str, torch.Tensor]] | None = {} if record else None
        for idx, block in enumerate(self.blocks):
            if idx in skip:
                continue
            x_t, x_v, attn = block(x_t, x_v, temb, need_attn=record)
            if record:
                # Clone the slices so the full joint attention matrix is not
                # kept alive as their base; at video-token counts in the
                # thousands that matrix dwarfs the slices by two orders of
                # magnitude and holding one per layer adds up fast.
                records[idx] = {
                    "t2v": attn[:, :, :Lt, Lt:].detach().clone(),
                    "v2t": attn[:, :, Lt:, :Lt].detach().clone(),
                }
                del attn

        shift, scale = self.final_mod(temb).chunk(2, dim=-1)
        out = self.head(_modulate(F.layer_norm(x_v, (cfg.width,)), shift, scale))
        out = out + self.skip_proj(latent.flatten(2).transpose(1, 2)) * self.skip_gate(
            temb
        ).unsqueeze(1)
        velocity = out.transpose(1, 2).reshape(
            B, cfg.latent_channels, cfg.latent_t, cfg.latent_h, cfg.latent_w
        )
        return velocity, records

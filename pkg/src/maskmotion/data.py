"""Dataset persistence.

A split directory holds a manifest.json plus one subdirectory per sample:

    sample_00042/
        meta.json      scene metadata (seed, dims, objects, caption tokens)
        video.rgb24    raw uint8 frames, T*H*W*3 bytes, frame-major
        mask.gray8     subject mask, T*H*W bytes, values 0 or 255
        done.marker    written last; its absence marks a partial write

Raw formats carry no header; shapes come from meta.json. Regenerating a split
from the same seed yields byte-identical files, manifest included.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import world


class DatasetError(RuntimeError):
    """Raised for missing, partial, or inconsistent on-disk samples."""


class DatasetExistsError(RuntimeError):
    """Raised when generation would overwrite an existing dataset without force."""


MANIFEST_NAME = "manifest.json"
MARKER_NAME = "done.marker"


def dump_json(obj) -> str:
    """Canonical JSON encoding used for every artifact we write."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path: Path, obj) -> None:
    path.write_text(dump_json(obj))


def write_rgb24(path: Path, video: np.ndarray) -> None:
    if video.dtype != np.uint8 or video.ndim != 4 or video.shape[-1] != 3:
        raise DatasetError(f"video must be uint8 (T, H, W, 3), got {video.dtype} {video.shape}")
    path.write_bytes(video.tobytes())


def read_rgb24(path: Path, frames: int, height: int, width: int) -> np.ndarray:
    data = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    expected = frames * height * width * 3
    if data.size != expected:
        raise DatasetError(
            f"{path} holds {data.size} bytes; expected {expected} for "
            f"T={frames} H={height} W={width} rgb24"
        )
    return data.reshape(frames, height, width, 3).copy()


def write_gray8(path: Path, mask01: np.ndarray) -> None:
    if mask01.ndim != 3:
        raise DatasetError(f"mask must be (T, H, W), got shape {mask01.shape}")
    vals = np.unique(mask01)
    if not np.all(np.isin(vals, (0, 1))):
        raise DatasetError(f"mask values must be 0/1 before export, got {vals}")
    path.write_bytes((mask01.astype(np.uint8) * 255).tobytes())


def read_gray8(path: Path, frames: int, height: int, width: int) -> np.ndarray:
    data = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    expected = frames * height * width
    if data.size != expected:
        raise DatasetError(
            f"{path} holds {data.size} bytes; expected {expected} for "
            f"T={frames} H={height} W={width} gray8"
        )
    vals = np.unique(data)
    if not np.all(np.isin(vals, (0, 255))):
        raise DatasetError(f"{path} has values outside {{0, 255}}: {vals}")
    return (data.reshape(frames, height, width) > 0).astype(np.uint8)


@dataclass
class Sample:
    name: str
    meta: dict
    video: np.ndarray  # uint8 (T, H, W, 3)
    mask: np.ndarray  # uint8 (T, H, W), values {0, 1}

    @property
    def caption_ids(self) -> tuple[int, ...]:
        return tuple(self.meta["caption_token_ids"])

    @property
    def subject_token_pos(self) -> int:
        return int(self.meta["subject_token_pos"])

    @property
    def subject_color(self) -> tuple[int, int, int]:
        color_id = self.meta["objects"][self.meta["subject_index"]]["color_id"]
        return world.PALETTE[color_id]


def scene_meta(trace: world.SceneTrace, caption: world.Caption, seed: int) -> dict:
    return {
        "seed": seed,
        "T": trace.frame_count,
        "H": trace.arena[1],
        "W": trace.arena[0],
        "objects": [
            {
                "shape": o.shape,
                "color_id": o.color_id,
                "radius": o.radius,
                "mass": o.mass,
            }
            for o in trace.objects
        ],
        "subject_index": trace.subject_index,
        "caption_token_ids": list(caption.token_ids),
        "subject_token_pos": caption.subject_token_pos,
    }


def write_sample(sample_dir: Path, meta: dict, video: np.ndarray, mask01: np.ndarray) -> None:
    sample_dir.mkdir(parents=True, exist_ok=True)
    write_json(sample_dir / "meta.json", meta)
    write_rgb24(sample_dir / "video.rgb24", video)
    write_gray8(sample_dir / "mask.gray8", mask01)
    (sample_dir / MARKER_NAME).write_bytes(b"")


def load_sample(sample_dir: Path) -> Sample:
    sample_dir = Path(sample_dir)
    if not (sample_dir / MARKER_NAME).exists():
        raise DatasetError(f"{sample_dir} has no {MARKER_NAME}; sample is incomplete")
    meta = json.loads((sample_dir / "meta.json").read_text())
    T, H, W = meta["T"], meta["H"], meta["W"]
    video = read_rgb24(sample_dir / "video.rgb24", T, H, W)
    mask = read_gray8(sample_dir / "mask.gray8", T, H, W)
    return Sample(name=sample_dir.name, meta=meta, video=video, mask=mask)


def write_manifest(split_dir: Path, entries: list[dict], config_echo: dict) -> None:
    write_json(split_dir / MANIFEST_NAME, {"samples": entries, "config": config_echo})


def load_manifest(split_dir: Path) -> list[dict]:
    path = Path(split_dir) / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"{split_dir} has no {MANIFEST_NAME}")
    manifest = json.loads(path.read_text())
    return manifest["samples"]


def load_split(split_dir: Path, limit: int | None = None) -> list[Sample]:
    split_dir = Path(split_dir)
    entries = load_manifest(split_dir)
    if limit is not None:
        entries = entries[:limit]
    return [load_sample(split_dir / e["dir"]) for e in entries]


def generate_split(
    split_dir: Path,
    n_scenes: int,
    seed_start: int,
    *,
    frames: int,
    arena: tuple[int, int],
    n_objects_range: tuple[int, int],
    radius_range: tuple[float, float],
    speed_range: tuple[float, float],
    text_len: int,
    config_echo: dict,
) -> dict:
    """Generate one split; sample i uses seed seed_start + i.

    The object count is drawn from the sample's own rng so everything about a
    sample, including its size, is a function of its seed alone.
    """
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    total_bytes = 0
    lo, hi = n_objects_range
    for i in range(n_scenes):
        seed = seed_start + i
        # Keyed sub-stream so the count draw is independent of the scene rng,
        # which is seeded with the bare seed inside simulate_scene.
        rng = np.random.default_rng([seed, 1])
        n_objects = int(rng.integers(lo, hi + 1))
        trace = world.simulate_scene(
            seed=seed,
            n_objects=n_objects,
            frames=frames,
            arena=arena,
            radius_range=radius_range,
            speed_range=speed_range,
        )
        video, mask = world.render(trace)
        caption = world.make_caption(trace, text_len=text_len)
        meta = scene_meta(trace, caption, seed)
        name = f"sample_{i:05d}"
        write_sample(split_dir / name, meta, video, mask)
        entries.append({"dir": name, "seed": seed})
        for fname in ("meta.json", "video.rgb24", "mask.gray8"):
            total_bytes += (split_dir / name / fname).stat().st_size
    write_manifest(split_dir, entries, config_echo)
    total_bytes += (split_dir / MANIFEST_NAME).stat().st_size
    return {"scenes": n_scenes, "bytes": total_bytes}


def generate_dataset(cfg, out_dir: Path, force: bool = False) -> dict:
    """Generate train/ and val/ splits under out_dir from cfg (a WorldConfig).

    Train sample i uses seed cfg.seed + i; val sample j uses
    cfg.seed + 1_000_000 + j, keeping the splits disjoint for any sane size.
    """
    out_dir = Path(out_dir)
    existing = [s for s in ("train", "val") if (out_dir / s / MANIFEST_NAME).exists()]
    if existing and not force:
        raise DatasetExistsError(
            f"{out_dir} already holds split(s) {existing}; pass force to regenerate"
        )
    echo = cfg.to_dict()
    common = dict(
        frames=cfg.frames,
        arena=(cfg.width, cfg.height),
        n_objects_range=(cfg.min_objects, cfg.max_objects),
        radius_range=tuple(cfg.radius_range),
        speed_range=tuple(cfg.speed_range),
        text_len=cfg.text_len,
        config_echo=echo,
    )
    summary = {
        "train": generate_split(out_dir / "train", cfg.train_scenes, cfg.seed, **common),
        "val": generate_split(out_dir / "val", cfg.val_scenes, cfg.seed + 1_000_000, **common),
    }
    return summary

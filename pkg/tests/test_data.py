"""Dataset persistence: raw formats, completion markers, seeded regeneration."""

from __future__ import annotations

import json

import numpy as np
import pytest

from maskmotion import data
from maskmotion.config import WorldConfig

from conftest import tiny_run_config


def small_world(**overrides) -> WorldConfig:
    base = tiny_run_config().world
    kwargs = {
        "frames": base.frames,
        "height": base.height,
        "width": base.width,
        "min_objects": base.min_objects,
        "max_objects": base.max_objects,
        "radius_range": base.radius_range,
        "speed_range": base.speed_range,
        "train_scenes": 3,
        "val_scenes": 2,
        "text_len": base.text_len,
        "seed": 0,
    }
    kwargs.update(overrides)
    return WorldConfig(**kwargs)


class TestRawFormats:
    def test_rgb24_roundtrip(self, tmp_path, rng):
        video = rng.integers(0, 256, size=(3, 4, 5, 3), dtype=np.uint8)
        path = tmp_path / "v.rgb24"
        data.write_rgb24(path, video)
        assert path.stat().st_size == 3 * 4 * 5 * 3
        back = data.read_rgb24(path, 3, 4, 5)
        assert np.array_equal(back, video)

    def test_rgb24_write_validation(self, tmp_path):
        with pytest.raises(data.DatasetError, match="uint8"):
            data.write_rgb24(tmp_path / "v", np.zeros((2, 4, 4, 3), dtype=np.float32))
        with pytest.raises(data.DatasetError, match="uint8"):
            data.write_rgb24(tmp_path / "v", np.zeros((2, 4, 4, 4), dtype=np.uint8))

    def test_rgb24_size_mismatch_names_dims(self, tmp_path):
        path = tmp_path / "v.rgb24"
        path.write_bytes(b"\x00" * 10)
        with pytest.raises(data.DatasetError, match="T=2 H=4 W=4"):
            data.read_rgb24(path, 2, 4, 4)

    def test_gray8_roundtrip_rescales(self, tmp_path, rng):
        mask = (rng.random((3, 4, 5)) < 0.5).astype(np.uint8)
        path = tmp_path / "m.gray8"
        data.write_gray8(path, mask)
        stored = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        assert set(np.unique(stored)) <= {0, 255}
        back = data.read_gray8(path, 3, 4, 5)
        assert np.array_equal(back, mask)

    def test_gray8_rejects_nonbinary_write(self, tmp_path):
        with pytest.raises(data.DatasetError, match="0/1"):
            data.write_gray8(tmp_path / "m", np.full((2, 3, 3), 7, dtype=np.uint8))

    def test_gray8_rejects_nonbinary_read(self, tmp_path):
        path = tmp_path / "m.gray8"
        path.write_bytes(bytes([0, 255, 9] + [0] * 15))
        with pytest.raises(data.DatasetError, match="outside"):
            data.read_gray8(path, 2, 3, 3)

    def test_gray8_size_mismatch(self, tmp_path):
        path = tmp_path / "m.gray8"
        path.write_bytes(b"\x00" * 5)
        with pytest.raises(data.DatasetError, match="expected 18"):
            data.read_gray8(path, 2, 3, 3)


class TestSampleIO:
    def test_write_then_load(self, tmp_path, rng):
        video = rng.integers(0, 256, size=(2, 4, 4, 3), dtype=np.uint8)
        mask = (rng.random((2, 4, 4)) < 0.4).astype(np.uint8)
        meta = {"T": 2, "H": 4, "W": 4, "caption_token_ids": [1, 7], "subject_token_pos": 0}
        data.write_sample(tmp_path / "s0", meta, video, mask)
        sample = data.load_sample(tmp_path / "s0")
        assert sample.name == "s0"
        assert np.array_equal(sample.video, video)
        assert np.array_equal(sample.mask, mask)
        assert sample.caption_ids == (1, 7)
        assert sample.subject_token_pos == 0

    def test_missing_marker_means_partial(self, tmp_path, rng):
        video = rng.integers(0, 256, size=(2, 4, 4, 3), dtype=np.uint8)
        mask = np.zeros((2, 4, 4), dtype=np.uint8)
        meta = {"T": 2, "H": 4, "W": 4}
        data.write_sample(tmp_path / "s0", meta, video, mask)
        (tmp_path / "s0" / "done.marker").unlink()
        with pytest.raises(data.DatasetError, match="incomplete"):
            data.load_sample(tmp_path / "s0")

    def test_subject_color_reads_palette(self, tmp_path, rng):
        from maskmotion import world

        video = rng.integers(0, 256, size=(2, 4, 4, 3), dtype=np.uint8)
        mask = np.zeros((2, 4, 4), dtype=np.uint8)
        meta = {
            "T": 2, "H": 4, "W": 4,
            "objects": [{"color_id": 3}, {"color_id": 1}],
            "subject_index": 1,
        }
        data.write_sample(tmp_path / "s0", meta, video, mask)
        assert data.load_sample(tmp_path / "s0").subject_color == world.PALETTE[1]


class TestGeneration:
    def test_split_layout_and_manifest(self, tmp_path):
        cfg = small_world()
        summary = data.generate_dataset(cfg, tmp_path)
        assert summary["train"]["scenes"] == 3
        assert summary["val"]["scenes"] == 2
        entries = data.load_manifest(tmp_path / "train")
        assert [e["dir"] for e in entries] == [f"sample_{i:05d}" for i in range(3)]
        assert [e["seed"] for e in entries] == [0, 1, 2]
        val_entries = data.load_manifest(tmp_path / "val")
        assert [e["seed"] for e in val_entries] == [1_000_000, 1_000_001]

    def test_regeneration_is_byte_identical(self, tmp_path):
        cfg = small_world(seed=4)
        data.generate_dataset(cfg, tmp_path / "a")
        data.generate_dataset(cfg, tmp_path / "b")
        for rel in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")):
            pa, pb = tmp_path / "a" / rel, tmp_path / "b" / rel
            assert pb.exists(), rel
            if pa.is_file():
                assert pa.read_bytes() == pb.read_bytes(), rel

    def test_seed_shifts_content(self, tmp_path):
        data.generate_dataset(small_world(seed=0), tmp_path / "a")
        data.generate_dataset(small_world(seed=9), tmp_path / "b")
        va = (tmp_path / "a/train/sample_00000/video.rgb24").read_bytes()
        vb = (tmp_path / "b/train/sample_00000/video.rgb24").read_bytes()
        assert va != vb

    def test_existing_dataset_refused_without_force(self, tmp_path):
        cfg = small_world()
        data.generate_dataset(cfg, tmp_path)
        with pytest.raises(data.DatasetExistsError, match="force"):
            data.generate_dataset(cfg, tmp_path)
        data.generate_dataset(cfg, tmp_path, force=True)

    def test_load_split_respects_limit_and_order(self, tmp_path):
        data.generate_dataset(small_world(), tmp_path)
        two = data.load_split(tmp_path / "train", limit=2)
        assert [s.name for s in two] == ["sample_00000", "sample_00001"]
        all_ = data.load_split(tmp_path / "train")
        assert len(all_) == 3

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(data.DatasetError, match="manifest.json"):
            data.load_split(tmp_path)

    def test_sample_size_independent_of_position(self, tmp_path):
        """The object count must depend on the sample's own seed only: the
        same seed at a different index yields the same scene."""
        data.generate_dataset(small_world(seed=2), tmp_path / "a")  # seeds 2,3,4
        data.generate_dataset(small_world(seed=3), tmp_path / "b")  # seeds 3,4,5
        a = (tmp_path / "a/train/sample_00001/video.rgb24").read_bytes()
        b = (tmp_path / "b/train/sample_00000/video.rgb24").read_bytes()
        assert a == b

    def test_manifest_echoes_config(self, tmp_path):
        cfg = small_world()
        data.generate_dataset(cfg, tmp_path)
        manifest = json.loads((tmp_path / "train/manifest.json").read_text())
        assert manifest["config"] == cfg.to_dict()

    def test_samples_loadable_and_consistent(self, tiny_dataset):
        samples = data.load_split(tiny_dataset / "train")
        cfg = tiny_run_config().world
        for s in samples:
            assert s.video.shape == (cfg.frames, cfg.height, cfg.width, 3)
            assert s.mask.shape == (cfg.frames, cfg.height, cfg.width)
            assert s.mask.any(), "subject must be visible"
            assert len(s.caption_ids) == cfg.text_len

"""
Tests for evaluation, inference and profiling
"""
import numpy as np
import pandas as pd
import pytest
import torch
from PIL import Image

from src.evaluation.metrics import CSV_COLUMNS, OVERALL
from src.ingestion.dataset_loader import encode_frame_file
from src.ingestion.synthetic import synthetic_videos
from src.orchestration.checkpoint import Checkpoint
from src.orchestration.evaluator import (
    config_from_checkpoint,
    evaluate,
    infer,
    load_model,
    profile_model,
)
from src.orchestration.trainer import train
from src.utils.exceptions import ConfigurationError, DataIngestionError

PCE = ("diffusion.guidance_mode=pce", "diffusion.scale=0.1", "diffusion.schedule=linear")


class TestEvaluate:
    """Test cases for evaluate()"""

    def setup_method(self):
        self.videos = synthetic_videos(2, 4, (32, 32), seed=3)

    def test_scores_every_frame(self, tiny_config, tmp_path):
        config = tiny_config("epochs=0")
        checkpoint = train(config)
        report = evaluate(config, checkpoint, self.videos, output_dir=tmp_path / "eval")

        # 4 frames with clip_len 3: the padded frame of the second clip is not scored
        assert report.overall.frames == 8
        assert {v: m.frames for v, m in report.per_video.items()} == {
            "video_000": 4,
            "video_001": 4,
        }
        frame = pd.read_csv(tmp_path / "eval" / "metrics.csv")
        assert list(frame.columns) == CSV_COLUMNS
        assert frame["video_id"].tolist() == ["video_000", "video_001", OVERALL]
        predictions = sorted((tmp_path / "eval" / "predictions" / "video_000").iterdir())
        assert [p.name for p in predictions] == [f"{i:05d}.png" for i in range(4)]
        values = np.unique(np.asarray(Image.open(predictions[0])))
        assert set(values.tolist()) <= {0, 255}

    def test_metric_ranges(self, tiny_config):
        report = evaluate(tiny_config(), videos=self.videos)
        overall = report.overall
        assert 0.0 <= overall.mae <= 1.0
        assert 0.0 <= overall.iou <= 1.0
        assert 0.0 <= overall.ber <= 100.0

    def test_deterministic(self, tiny_config):
        config = tiny_config()
        model = load_model(config)
        first = evaluate(config, videos=self.videos, model=model).to_dataframe()
        second = evaluate(config, videos=self.videos, model=model).to_dataframe()
        pd.testing.assert_frame_equal(first, second)

    def test_empty_dataset(self, tiny_config, tmp_path):
        report = evaluate(tiny_config(), videos=[], output_dir=tmp_path)
        frame = pd.read_csv(tmp_path / "metrics.csv")
        assert frame["video_id"].tolist() == [OVERALL]
        assert report.overall.frames == 0

    def test_resolution_mismatch(self, tiny_config):
        videos = synthetic_videos(1, 3, (64, 64), seed=0)
        with pytest.raises(ConfigurationError, match="expects"):
            evaluate(tiny_config(), videos=videos)

    def test_checkpoint_of_other_architecture(self, tiny_config, tmp_path):
        checkpoint = train(tiny_config("epochs=0", f"output_dir={tmp_path / 'a'}"))
        with pytest.raises(ConfigurationError, match="architecture"):
            load_model(tiny_config("model.use_dsa=false"), checkpoint)

    def test_checkpoint_of_other_diffusion_setup(self, tiny_config):
        checkpoint = train(tiny_config("epochs=0", *PCE))
        with pytest.raises(ConfigurationError, match="architecture"):
            load_model(tiny_config(), checkpoint)
        with pytest.raises(ConfigurationError, match="architecture"):
            load_model(tiny_config("diffusion.guidance_mode=pce"), checkpoint)
        # sampling steps do not bind a checkpoint
        model = load_model(tiny_config("diffusion.sample_steps=1", *PCE), checkpoint)
        assert model.scale == 0.1

    def test_parameters_that_do_not_fit(self, tiny_config):
        checkpoint = Checkpoint(parameters={"x": torch.zeros(1)}, config={})
        with pytest.raises(ConfigurationError, match="do not fit"):
            load_model(tiny_config(), checkpoint)

    @pytest.mark.parametrize("mode", ["pce", "pee"])
    def test_sequential_guidance_modes(self, tiny_config, mode):
        config = tiny_config(f"diffusion.guidance_mode={mode}")
        report = evaluate(config, videos=self.videos[:1])
        assert report.overall.frames == 4


class TestInfer:
    """Test cases for infer()"""

    def setup_method(self):
        rng = np.random.default_rng(0)
        self.frames = rng.random((5, 3, 40, 48))

    def _write_frames(self, directory):
        directory.mkdir()
        for i, frame in enumerate(self.frames):
            encode_frame_file(frame, directory / f"frame_{i:02d}.png")
        return directory

    def test_masks_at_source_size(self, tiny_config, tmp_path):
        frames_dir = self._write_frames(tmp_path / "clip")
        written = infer(tiny_config(), None, frames_dir, tmp_path / "out")

        assert sorted(written) == [f"frame_{i:02d}" for i in range(5)]
        for path in written.values():
            mask = np.asarray(Image.open(path))
            assert mask.shape == (40, 48)
            assert set(np.unique(mask).tolist()) <= {0, 255}

    def test_rerun_is_byte_identical(self, tiny_config, tmp_path):
        frames_dir = self._write_frames(tmp_path / "clip")
        config = tiny_config()
        model = load_model(config)
        first = infer(config, None, frames_dir, tmp_path / "a", model=model)
        second = infer(config, None, frames_dir, tmp_path / "b", model=model)
        for stem, path in first.items():
            assert path.read_bytes() == second[stem].read_bytes()

    def test_config_taken_from_checkpoint(self, tiny_config, tmp_path):
        config = tiny_config("epochs=0", *PCE)
        train(config)
        checkpoint = config.output_dir / "checkpoints" / "last.safetensors"

        restored = config_from_checkpoint(checkpoint)
        assert restored.diffusion.scale == 0.1
        assert restored.diffusion.guidance_mode == "pce"
        assert restored.resolution == 32

        frames_dir = self._write_frames(tmp_path / "clip")
        written = infer(None, checkpoint, frames_dir, tmp_path / "out")
        assert len(written) == 5
        for path in written.values():
            assert np.asarray(Image.open(path)).shape == (40, 48)

    def test_checkpoint_without_config(self):
        checkpoint = Checkpoint(parameters={}, config={})
        with pytest.raises(ConfigurationError, match="no configuration"):
            config_from_checkpoint(checkpoint)

    def test_missing_frames_dir(self, tiny_config, tmp_path):
        with pytest.raises(DataIngestionError, match="not found"):
            infer(tiny_config(), None, tmp_path / "missing", tmp_path / "out")


class TestProfile:
    def test_report_keys(self, tiny_config):
        report = profile_model(tiny_config())
        assert set(report) == {"parameters", "total_parameters", "size_mb", "fps"}
        assert report["total_parameters"] == sum(report["parameters"].values())
        assert report["size_mb"] > 0
        assert report["fps"] > 0

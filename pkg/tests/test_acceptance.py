"""
Long-running end-to-end runs (enable with --runslow)
"""
import itertools

import numpy as np
import pytest
import torch

from config.settings import build_config
from src.evaluation.metrics import MetricAccumulator
from src.ingestion.clips import make_clips
from src.orchestration.evaluator import evaluate, load_model
from src.orchestration.trainer import clips_to_tensors, load_videos, train


@pytest.mark.slow
class TestOverfit:
    """Eight synthetic clips, 5 frames at 64x64, trained until they are memorized"""

    def test_overfit_training_clips(self, tmp_path):
        config = build_config(
            {},
            [
                "resolution=64",
                "clip_len=5",
                "batch_clips=4",
                "epochs=1000",
                "max_steps=2000",
                "lr=1e-3",
                "augment=false",
                "checkpoint_every=500",
                "synthetic.videos=8",
                "synthetic.frames=5",
                "synthetic.seed=0",
                f"output_dir={tmp_path / 'overfit'}",
            ],
        )
        checkpoint = train(config)

        losses = np.array([record["loss"] for record in checkpoint.history])
        assert losses[:10].mean() > losses[40:50].mean()

        report = evaluate(config, checkpoint, output_dir=tmp_path / "eval")
        assert report.overall.iou >= 0.85
        assert report.overall.ber <= 10.0

        # auxiliary head on its own
        model = load_model(config, checkpoint)
        accumulator = MetricAccumulator()
        for video in load_videos(config):
            clip = make_clips(video, config.clip_len, config.clip_len)[0]
            frames, _, _ = clips_to_tensors([clip], model.dtype)
            with torch.no_grad():
                logits = model.clip_context(frames).pseudo_logits[0]
            for prob, gt in zip(torch.sigmoid(logits).numpy(), video.masks):
                accumulator.add(video.video_id, prob, gt)
        assert accumulator.report().overall.iou >= 0.8


ABLATION_GRID = list(
    itertools.product(["cosine", "linear"], [0.1, 0.01, 0.001], ["pce", "pee", "stee"])
)


@pytest.mark.slow
class TestAblationSwitches:
    @pytest.mark.parametrize("schedule,scale,mode", ABLATION_GRID)
    def test_fifty_steps(self, tiny_config, schedule, scale, mode):
        config = tiny_config(
            "max_steps=50",
            "epochs=100",
            f"diffusion.schedule={schedule}",
            f"diffusion.scale={scale}",
            f"diffusion.guidance_mode={mode}",
        )
        checkpoint = train(config)
        assert checkpoint.step == 50
        assert all(np.isfinite(record["loss"]) for record in checkpoint.history)

        names = list(checkpoint.parameters)
        assert any(n.startswith("guidance_encoder.") for n in names) == (mode != "pce")

        report = evaluate(config, checkpoint)
        assert report.overall.frames == config.synthetic.videos * config.synthetic.frames


@pytest.mark.slow
class TestDeterminismAndResume:
    def test_fifty_plus_fifty_matches_hundred(self, tiny_config, tmp_path):
        common = ("epochs=100", "checkpoint_every=50")
        straight = train(tiny_config("max_steps=100", f"output_dir={tmp_path / 's'}", *common))
        again = train(tiny_config("max_steps=100", f"output_dir={tmp_path / 'r'}", *common))
        assert straight.history == again.history

        first = tiny_config("max_steps=50", f"output_dir={tmp_path / 'a'}", *common)
        train(first)
        resumed = train(
            tiny_config("max_steps=100", f"output_dir={tmp_path / 'b'}", *common),
            resume_from=first.output_dir / "checkpoints" / "last.safetensors",
        )
        for expected, actual in zip(straight.history, resumed.history):
            assert actual["loss"] == pytest.approx(expected["loss"], abs=1e-10)
        for name, value in straight.parameters.items():
            torch.testing.assert_close(resumed.parameters[name], value, rtol=0, atol=1e-10)

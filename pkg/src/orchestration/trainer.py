"""
Training loop

Every optimizer step consumes ``grad_accum`` micro-batches of ``batch_clips``
clips. Clip order, timesteps, noise and flips are derived from (seed, step),
so a run resumed from a checkpoint continues exactly like an uninterrupted one.
"""
import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from config.settings import RunConfig, architecture_of, save_config
from src.evaluation.losses import LossTerms, aux_loss, total_loss
from src.ingestion.clips import Video, VideoClip, augment_clip, make_clips
from src.ingestion.dataset_loader import load_dataset
from src.ingestion.synthetic import synthetic_videos
from src.models.diffusion import bit_encode, forward_diffuse
from src.models.network import TBGDiff
from src.orchestration.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from src.utils import get_logger, seed_everything, setup_logging
from src.utils.exceptions import ConfigurationError, DataIngestionError, NumericalError

logger = get_logger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
LOSS_LOG = "loss_log.csv"
LAST_CHECKPOINT = "last.safetensors"


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers"""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def load_videos(config: RunConfig) -> List[Video]:
    """Materialize the configured dataset at the run resolution"""
    size = (config.resolution, config.resolution)
    if config.data.source == "synthetic":
        return synthetic_videos(
            config.synthetic.videos, config.synthetic.frames, size, config.synthetic.seed
        )

    if config.data.root is None:
        raise ConfigurationError("data.root is required when data.source is 'directory'")
    dataset = load_dataset(config.data.root, size if config.data.resize else None)
    videos = list(dataset)
    for video in videos:
        if video.size != size:
            raise ConfigurationError(
                f"Video '{video.video_id}' has size {video.size} but the run resolution "
                f"is {size}; set data.resize=true to resize on ingestion"
            )
    return videos


def clips_to_tensors(clips: Sequence[VideoClip], dtype: torch.dtype):
    """Stack clips to frames [B, L, 3, H, W], masks and boundaries [B, L, H, W]"""
    frames = torch.from_numpy(np.stack([c.frames for c in clips])).to(dtype)
    masks = torch.from_numpy(np.stack([c.masks for c in clips])).to(dtype)
    boundaries = torch.from_numpy(np.stack([c.boundaries for c in clips])).to(dtype)
    return frames, masks, boundaries


def clip_losses(
    model: TBGDiff,
    frames: torch.Tensor,
    masks: torch.Tensor,
    boundaries: torch.Tensor,
    generator: torch.Generator,
) -> LossTerms:
    """
    Loss of a batch of clips, all frames of each clip predicted

    Sequential guidance modes are guided by ground-truth masks;
    stee uses the auxiliary head's pseudo masks.
    """
    context = model.clip_context(frames)
    aux = aux_loss(context.pseudo_logits, context.boundary_logits, masks, boundaries)

    b, length, height, width = masks.shape
    if model.mode.sequential:
        guidance_masks = {i: masks[:, i] for i in range(length)}
    else:
        guidance_masks = model.pseudo_masks(context)

    cache: Dict[int, torch.Tensor] = {}
    logits = []
    for center in range(length):
        t = torch.randint(1, model.schedule.t_train + 1, (b,), generator=generator)
        eps = torch.randn((b, height, width), generator=generator, dtype=masks.dtype)
        y_t = forward_diffuse(bit_encode(masks[:, center], model.scale), t, eps, model.schedule)
        bundle = model.guidance(frames, guidance_masks, center, context, cache)
        logits.append(model.predict_mask(y_t.values, t, context, center, bundle))

    final = torch.stack(logits, dim=1).flatten(0, 1)
    return total_loss(final, masks.flatten(0, 1), aux)


class Trainer:
    """Trains a TBGDiff network on clips of a video dataset"""

    def __init__(self, config: RunConfig, videos: Optional[List[Video]] = None):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.dtype = DTYPES[config.dtype]

        videos = load_videos(config) if videos is None else videos
        stride = config.data.clip_stride or config.clip_len
        self.clips: List[VideoClip] = [
            clip for video in videos for clip in make_clips(video, config.clip_len, stride)
        ]
        for clip in self.clips:
            if clip.size != (config.resolution, config.resolution):
                raise ConfigurationError(
                    f"Clip of '{clip.video_id}' has size {clip.size}, "
                    f"expected {config.resolution}x{config.resolution}"
                )

        seed_everything(config.seed, config.deterministic)
        self.model = TBGDiff(config).to(self.dtype)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=config.lr, weight_decay=config.weight_decay
        )
        self.step = 0
        self.history: List[Dict[str, float]] = []
        logger.info(
            f"Trainer ready: {len(self.clips)} clips, "
            f"{sum(p.numel() for p in self.model.parameters())} parameters"
        )

    @property
    def steps_per_epoch(self) -> int:
        batches = math.ceil(len(self.clips) / self.config.batch_clips)
        return math.ceil(batches / self.config.grad_accum)

    @property
    def total_steps(self) -> int:
        total = self.config.epochs * self.steps_per_epoch
        if self.config.max_steps is not None:
            total = min(total, self.config.max_steps)
        return total

    def _epoch_order(self, epoch: int) -> List[int]:
        generator = torch.Generator().manual_seed(derive_seed(self.config.seed, epoch))
        return torch.randperm(len(self.clips), generator=generator).tolist()

    def _micro_batches(self, step: int) -> List[List[int]]:
        epoch, position = divmod(step, self.steps_per_epoch)
        order = self._epoch_order(epoch)
        size = self.config.batch_clips
        batches = [order[i : i + size] for i in range(0, len(order), size)]
        accum = self.config.grad_accum
        return batches[position * accum : (position + 1) * accum]

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            parameters=dict(self.model.state_dict()),
            optimizer_state=self.optimizer.state_dict(),
            epoch=self.step // max(self.steps_per_epoch, 1),
            step=self.step,
            config=self.config.to_flat_dict(),
            history=list(self.history),
        )

    def resume(self, checkpoint: Union[Checkpoint, str, Path]) -> None:
        """Restore parameters, optimizer state, step and history"""
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = load_checkpoint(checkpoint)
        if architecture_of(checkpoint.config) != architecture_of(self.config):
            raise ConfigurationError(
                "Checkpoint architecture does not match the run configuration: "
                f"{architecture_of(checkpoint.config)} vs {architecture_of(self.config)}"
            )
        try:
            self.model.load_state_dict(checkpoint.parameters)
        except RuntimeError as e:
            logger.error(f"Checkpoint parameters do not fit the network: {str(e)}")
            raise ConfigurationError(
                "Checkpoint parameters do not fit the network built from the configuration"
            ) from e
        if checkpoint.optimizer_state is not None:
            self.optimizer.load_state_dict(checkpoint.optimizer_state)
        self.step = checkpoint.step
        self.history = list(checkpoint.history)
        logger.info(f"Resumed from step {self.step}")

    def train_step(self) -> Dict[str, float]:
        """One optimizer step over ``grad_accum`` micro-batches"""
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        micro_batches = self._micro_batches(self.step)
        totals = {"loss": 0.0, "bce": 0.0, "hinge": 0.0, "aux": 0.0}

        for micro, indices in enumerate(micro_batches):
            clips = [self.clips[i] for i in indices]
            if self.config.augment:
                clips = [
                    augment_clip(
                        clip,
                        derive_seed(self.config.seed, self.step, micro, slot),
                        self.config.flip_prob,
                    )
                    for slot, clip in enumerate(clips)
                ]
            frames, masks, boundaries = clips_to_tensors(clips, self.dtype)
            generator = torch.Generator().manual_seed(
                derive_seed(self.config.seed, self.step, micro)
            )
            terms = clip_losses(self.model, frames, masks, boundaries, generator)
            values = terms.as_floats()
            if not all(math.isfinite(v) for v in values.values()):
                self._dump_failure(values)
                raise NumericalError(
                    f"Non-finite loss at step {self.step}: {values}"
                )
            (terms.total / len(micro_batches)).backward()
            for key, value in values.items():
                totals[key] += value / len(micro_batches)

        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        self.step += 1
        record = {"step": self.step, "epoch": (self.step - 1) // self.steps_per_epoch, **totals}
        self.history.append(record)
        return record

    def _dump_failure(self, values: Dict[str, float]) -> None:
        """Write the failing step's loss terms and the pre-step parameters"""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        report = {
            "step": self.step,
            "loss_terms": {k: repr(v) for k, v in values.items()},
            "non_finite_parameters": [
                name
                for name, p in self.model.named_parameters()
                if not torch.isfinite(p).all()
            ],
            "config": self.config.to_flat_dict(),
        }
        path = self.output_dir / f"failure_step_{self.step:06d}.json"
        path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
        try:
            save_checkpoint(self.checkpoint(), self.output_dir / "failure.safetensors")
        except Exception as e:
            logger.error(f"Could not save failure checkpoint: {str(e)}")
        logger.error(f"Non-finite loss at step {self.step}; diagnostics in {path}")

    def write_loss_log(self) -> Path:
        path = self.output_dir / LOSS_LOG
        columns = ["step", "epoch", "loss", "bce", "hinge", "aux"]
        pd.DataFrame(self.history, columns=columns).to_csv(path, index=False)
        return path

    def _save(self, name: str) -> Checkpoint:
        checkpoint = self.checkpoint()
        save_checkpoint(checkpoint, self.output_dir / "checkpoints" / name)
        return checkpoint

    def train(self, resume_from: Optional[Union[str, Path, Checkpoint]] = None) -> Checkpoint:
        """
        Run training to ``total_steps``

        Returns:
            The final checkpoint (the initialization checkpoint for 0 epochs)
        """
        self.output_dir.mkdir(parents=True, exist_ok=True)
        setup_logging("src", log_file=self.output_dir / "train.log")
        save_config(self.config, self.output_dir / "config.yaml")
        if resume_from is not None:
            self.resume(resume_from)

        if not self.clips and self.config.epochs > 0 and self.config.max_steps != 0:
            raise DataIngestionError("The dataset yields no training clips")
        total = self.total_steps
        logger.info(f"Training from step {self.step} to {total}")

        while self.step < total:
            record = self.train_step()
            message = (
                f"step {record['step']}/{total} loss {record['loss']:.5f} "
                f"(bce {record['bce']:.5f}, hinge {record['hinge']:.5f}, aux {record['aux']:.5f})"
            )
            if self.step == 1 or self.step % self.config.checkpoint_every == 0:
                logger.info(message)
            else:
                logger.debug(message)
            if self.step % self.config.checkpoint_every == 0:
                self._save(f"step_{self.step:06d}.safetensors")
                self._save(LAST_CHECKPOINT)
                self.write_loss_log()

        checkpoint = self._save(LAST_CHECKPOINT)
        self.write_loss_log()
        logger.info(f"Training finished at step {self.step}")
        return checkpoint


def train(
    config: RunConfig,
    videos: Optional[List[Video]] = None,
    resume_from: Optional[Union[str, Path, Checkpoint]] = None,
) -> Checkpoint:
    """Train with ``config`` and return the final checkpoint"""
    return Trainer(config, videos).train(resume_from)
